"""2^d-tree hierarchical partitions of grids.

Level ``i`` of the tree is the grid obtained by merging pairs of neighbouring
cells of level ``i - 1`` along every axis. A point with per-axis index ``k``
belongs to the level-``i`` cell with index ``k >> i``; an odd cell at the end
of an axis is carried upward unpaired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .measures import DiscreteMeasure, GridGeometry


@dataclass(frozen=True)
class PartitionLevel:
    """One level of a hierarchical partition.

    Cells are enumerated in row-major order over ``shape``. ``box_lo`` and
    ``box_hi`` hold the closed coordinate box spanned by the cell's points,
    ``parent`` the flat id of the enclosing cell one level up (``-1`` at the
    top) and ``child_ptr``/``child_idx`` the children one level down in CSR
    layout (empty at level 0).
    """

    shape: tuple
    box_lo: np.ndarray
    box_hi: np.ndarray
    parent: np.ndarray
    child_ptr: np.ndarray
    child_idx: np.ndarray
    point_count: np.ndarray

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.box_lo + self.box_hi)

    def children(self, cell: int) -> np.ndarray:
        return self.child_idx[self.child_ptr[cell]:self.child_ptr[cell + 1]]


class HierarchicalPartition:
    """Hierarchical partition of a grid together with multi-scale measures.

    Parameters
    ----------
    geometry : GridGeometry
        The finest grid (level 0).
    measure : DiscreteMeasure or array, optional
        Base measure; its coarsenings are stored in ``coarse_measures``.
    depth : int, optional
        Number of coarsening steps. Defaults to ``ceil(log2(max(shape)))``,
        the smallest depth whose top level is a single cell. A larger depth
        repeats the single top cell, which lets two partitions of different
        grids share a common depth.
    """

    def __init__(self, geometry: GridGeometry, measure=None, depth: Optional[int] = None):
        self.geometry = geometry
        min_depth = max(0, math.ceil(math.log2(max(geometry.shape))))
        if depth is None:
            depth = min_depth
        if depth < min_depth:
            raise ValueError(f"depth {depth} too small for grid {geometry.shape}")
        self.depth = int(depth)
        self.levels: List[PartitionLevel] = self._build()
        self.coarse_measures: Optional[List[np.ndarray]] = None
        if measure is not None:
            self.coarse_measures = self.coarsen(measure)

    def _build(self) -> List[PartitionLevel]:
        g = self.geometry
        n = np.asarray(g.shape)
        origin = np.asarray(g.origin)
        h = g.spacing
        shapes = [tuple(int(s) for s in -(-n // (1 << i))) for i in range(self.depth + 1)]

        levels = []
        for i, shape in enumerate(shapes):
            idx = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
            first = idx << i
            last = np.minimum(((idx + 1) << i) - 1, n - 1)
            count = np.prod(last - first + 1, axis=1)
            if i < self.depth:
                parent = np.ravel_multi_index(tuple((idx >> 1).T), shapes[i + 1])
            else:
                parent = np.full(len(idx), -1)
            levels.append(dict(shape=shape, box_lo=origin + h * first, box_hi=origin + h * last,
                               parent=parent, point_count=count))

        out = []
        for i, lv in enumerate(levels):
            if i == 0:
                ptr = np.zeros(len(lv["parent"]) + 1, dtype=np.int64)
                cidx = np.zeros(0, dtype=np.int64)
            else:
                par = levels[i - 1]["parent"]
                order = np.argsort(par, kind="stable")
                counts = np.bincount(par, minlength=int(np.prod(lv["shape"])))
                ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
                cidx = order.astype(np.int64)
            out.append(PartitionLevel(lv["shape"], lv["box_lo"], lv["box_hi"],
                                      lv["parent"].astype(np.int64), ptr, cidx,
                                      lv["point_count"]))
        return out

    def __len__(self):
        return self.depth + 1

    def level(self, i: int) -> PartitionLevel:
        return self.levels[i]

    def level_geometry(self, i: int) -> GridGeometry:
        """The level-``i`` cells viewed as a grid (centers of the first cell as origin)."""
        lv = self.levels[i]
        return GridGeometry(lv.shape, self.geometry.spacing * (1 << i), tuple(lv.centers[0]))

    def coarsen(self, measure) -> List[np.ndarray]:
        """Multi-scale approximation: per-level cell masses of ``measure``."""
        w = measure.weights if isinstance(measure, DiscreteMeasure) else np.asarray(measure, float)
        if w.size != self.geometry.size:
            raise ValueError("measure does not live on the partitioned grid")
        out = [np.array(w, dtype=float)]
        for i in range(self.depth):
            nxt = np.zeros(self.levels[i + 1].size)
            np.add.at(nxt, self.levels[i].parent, out[-1])
            out.append(nxt)
        return out

    def coarsen_from(self, values: np.ndarray, level: int, target: int) -> np.ndarray:
        """Sum a level-``level`` vector up to level ``target``."""
        out = np.asarray(values, dtype=float)
        for i in range(level, target):
            nxt = np.zeros(self.levels[i + 1].size)
            np.add.at(nxt, self.levels[i].parent, out)
            out = nxt
        return out


def build_partition(geometry: GridGeometry, measure=None, depth: Optional[int] = None) -> HierarchicalPartition:
    """Build the 2^d-tree of ``geometry`` and the coarsenings of ``measure``."""
    return HierarchicalPartition(geometry, measure, depth)


def extend_dual(partition: HierarchicalPartition, dual, base_level: int = 0) -> List[np.ndarray]:
    """Max-extension of a dual vector to all coarser levels.

    Entry ``[j][A]`` is the maximum of ``dual`` over the level-``base_level``
    cells contained in the level-``base_level + j`` cell ``A``.
    """
    dual = np.asarray(dual, dtype=float)
    if dual.size != partition.levels[base_level].size:
        raise ValueError(
            f"dual has {dual.size} entries, level {base_level} has "
            f"{partition.levels[base_level].size} cells")
    out = [dual]
    for i in range(base_level, partition.depth):
        nxt = np.full(partition.levels[i + 1].size, -np.inf)
        np.maximum.at(nxt, partition.levels[i].parent, out[-1])
        out.append(nxt)
    return out


def refine_duals(partition_x: HierarchicalPartition, partition_y: HierarchicalPartition,
                 level: int, coarse_alpha, coarse_beta):
    """Piecewise constant prolongation of level ``level + 1`` duals to ``level``."""
    return (refine_dual(partition_x, level, coarse_alpha),
            refine_dual(partition_y, level, coarse_beta))


def refine_dual(partition: HierarchicalPartition, level: int, coarse) -> np.ndarray:
    coarse = np.asarray(coarse, dtype=float)
    if coarse.size != partition.levels[level + 1].size:
        raise ValueError(
            f"coarse vector has {coarse.size} entries, level {level + 1} has "
            f"{partition.levels[level + 1].size} cells")
    return coarse[partition.levels[level].parent]
