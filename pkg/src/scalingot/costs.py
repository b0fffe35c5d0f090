"""Cost functions on pairs of grids and their hierarchical lower bounds."""

from __future__ import annotations

import csv
import math
from typing import Dict, Tuple

import numpy as np

from .measures import GridGeometry

# cos^2 floor before taking -log near d = pi/2
WFR_COS2_FLOOR = 1e-300


def box_sq_distance(lo_x, hi_x, lo_y, hi_y) -> np.ndarray:
    """Squared Euclidean distance between axis-aligned boxes (0 if they meet)."""
    gap = np.maximum(0.0, np.maximum(np.asarray(lo_y) - hi_x, np.asarray(lo_x) - hi_y))
    return np.sum(gap * gap, axis=-1)


def wfr_from_distance(d) -> np.ndarray:
    """``-log(cos(d)^2)`` for ``d < pi/2``, ``+inf`` otherwise."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        c2 = np.maximum(np.cos(np.minimum(d, math.pi / 2)) ** 2, WFR_COS2_FLOOR)
        out = -np.log(c2)
    return np.where(d < math.pi / 2, out, np.inf)


class CostFunction:
    """Base class. Subclasses provide pointwise costs and cell lower bounds.

    The ``cell_*`` methods work on cells of hierarchical partitions: the cost
    of a problem coarsened to level ``i`` is ``cell_costs`` between level-``i``
    cells, and ``cell_lower_bounds`` at level ``j >= i`` must not exceed the
    level-``i`` cost of any pair of descendants.
    """

    kind = "abstract"

    def __init__(self, geometry_x: GridGeometry, geometry_y: GridGeometry):
        self.geometry_x = geometry_x
        self.geometry_y = geometry_y

    @property
    def shape(self) -> Tuple[int, int]:
        return self.geometry_x.size, self.geometry_y.size

    def _check_ids(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        nx, ny = self.shape
        if np.any(x < 0) or np.any(x >= nx) or np.any(y < 0) or np.any(y >= ny):
            raise IndexError("point id out of range")
        return x, y

    def evaluate(self, x, y):
        """Cost between base points ``x`` (in X) and ``y`` (in Y); vectorized."""
        x, y = self._check_ids(x, y)
        px = self.geometry_x.positions()[x]
        py = self.geometry_y.positions()[y]
        out = self.from_positions(px, py)
        return float(out) if out.ndim == 0 else out

    def matrix(self) -> np.ndarray:
        nx, ny = self.shape
        if nx * ny > 4096 * 4096:
            raise MemoryError("dense cost matrix too large")
        px = self.geometry_x.positions()
        py = self.geometry_y.positions()
        return self.from_positions(px[:, None, :], py[None, :, :])

    def from_positions(self, px, py) -> np.ndarray:
        raise NotImplementedError

    def lower_bound_on_cells(self, box_x, box_y):
        """Lower bound of the cost over all pairs in ``box_x`` x ``box_y``.

        Boxes are ``(lo, hi)`` pairs of coordinate vectors.
        """
        raise NotImplementedError

    def cell_costs(self, part_x, part_y, level: int, a, b) -> np.ndarray:
        lx, ly = part_x.levels[level], part_y.levels[level]
        return self.from_positions(lx.centers[a], ly.centers[b])

    def cell_lower_bounds(self, part_x, part_y, level: int, a, b) -> np.ndarray:
        lx, ly = part_x.levels[level], part_y.levels[level]
        return self.lower_bound_on_cells((lx.box_lo[a], lx.box_hi[a]), (ly.box_lo[b], ly.box_hi[b]))

    def scale(self) -> float:
        """Largest finite cost value (or an upper bound for it)."""
        raise NotImplementedError


class SquaredEuclidean(CostFunction):
    """``|x - y|^2`` in length^2 units."""

    kind = "sqeuclid"

    def from_positions(self, px, py):
        d = np.asarray(px, float) - np.asarray(py, float)
        return np.sum(d * d, axis=-1)

    def lower_bound_on_cells(self, box_x, box_y):
        return box_sq_distance(box_x[0], box_x[1], box_y[0], box_y[1])

    def scale(self) -> float:
        gx, gy = self.geometry_x, self.geometry_y
        lo_x, hi_x = np.asarray(gx.origin), np.asarray(gx.origin) + gx.spacing * (np.asarray(gx.shape) - 1)
        lo_y, hi_y = np.asarray(gy.origin), np.asarray(gy.origin) + gy.spacing * (np.asarray(gy.shape) - 1)
        far = np.maximum(np.abs(hi_y - lo_x), np.abs(hi_x - lo_y))
        return float(np.sum(far * far))


class WassersteinFisherRao(CostFunction):
    """``-log(cos^2 d(x, y))`` for ``d < pi/2``, ``+inf`` beyond."""

    kind = "wfr"

    def from_positions(self, px, py):
        d = np.asarray(px, float) - np.asarray(py, float)
        return wfr_from_distance(np.sqrt(np.sum(d * d, axis=-1)))

    def lower_bound_on_cells(self, box_x, box_y):
        # the cost is monotone in d, so the box distance gives a valid bound
        return wfr_from_distance(np.sqrt(box_sq_distance(box_x[0], box_x[1], box_y[0], box_y[1])))

    def scale(self) -> float:
        sq = SquaredEuclidean(self.geometry_x, self.geometry_y).scale()
        return float(wfr_from_distance(min(math.sqrt(sq), math.pi / 2 - 1e-3)))


class ExplicitMatrix(CostFunction):
    """Cost given as a dense table; X and Y are index lines with unit spacing.

    Entries may be ``+inf``. Coarse-level costs are block minima over cells.
    """

    kind = "matrix"

    def __init__(self, matrix):
        m = np.array(matrix, dtype=float)
        if m.ndim != 2:
            raise ValueError("cost matrix must be two-dimensional")
        if np.any(np.isnan(m)) or np.any(m == -np.inf):
            raise ValueError("cost entries must be finite or +inf")
        m.setflags(write=False)
        self.table = m
        super().__init__(GridGeometry((m.shape[0],)), GridGeometry((m.shape[1],)))
        self._block_cache: Dict[tuple, np.ndarray] = {}

    def evaluate(self, x, y):
        x, y = self._check_ids(x, y)
        out = self.table[x, y]
        return float(out) if np.ndim(out) == 0 else out

    def matrix(self) -> np.ndarray:
        return np.array(self.table)

    def lower_bound_on_cells(self, box_x, box_y):
        # boxes are index ranges here
        x0, x1 = int(np.ceil(np.min(box_x[0]))), int(np.floor(np.max(box_x[1])))
        y0, y1 = int(np.ceil(np.min(box_y[0]))), int(np.floor(np.max(box_y[1])))
        return float(self.table[x0:x1 + 1, y0:y1 + 1].min())

    def _blocks(self, part_x, part_y, level: int) -> np.ndarray:
        key = (id(part_x), id(part_y), level)
        if key not in self._block_cache:
            if level == 0:
                blk = self.table
            else:
                prev = self._blocks(part_x, part_y, level - 1)
                px = part_x.levels[level - 1].parent
                py = part_y.levels[level - 1].parent
                rows = np.full((part_x.levels[level].size, prev.shape[1]), np.inf)
                np.minimum.at(rows, px, prev)
                blk = np.full((rows.shape[0], part_y.levels[level].size), np.inf)
                np.minimum.at(blk.T, py, rows.T)
            self._block_cache[key] = blk
        return self._block_cache[key]

    def cell_costs(self, part_x, part_y, level, a, b):
        return self._blocks(part_x, part_y, level)[a, b]

    def cell_lower_bounds(self, part_x, part_y, level, a, b):
        return self._blocks(part_x, part_y, level)[a, b]

    def scale(self) -> float:
        fin = self.table[np.isfinite(self.table)]
        return float(fin.max()) if fin.size else 0.0


def make_cost(kind: str, geometry_x: GridGeometry, geometry_y: GridGeometry) -> CostFunction:
    kinds = {"sqeuclid": SquaredEuclidean, "wfr": WassersteinFisherRao}
    if kind not in kinds:
        raise ValueError(f"unknown cost kind {kind!r}")
    return kinds[kind](geometry_x, geometry_y)


def load_cost_matrix(path) -> ExplicitMatrix:
    """Read a row-major CSV cost table; the token ``inf`` is allowed."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(tok) for tok in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: cost table must be a non-empty rectangle")
    return ExplicitMatrix(np.array(rows))
