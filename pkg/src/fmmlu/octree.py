"""Adaptive level-restricted octree and the near/far bookkeeping of the sweep."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class DepthExceeded(RuntimeError):
    """Refinement would exceed ``max_depth`` (typically duplicate points)."""


_OCTANTS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)])


@dataclass
class Box:
    id: int
    level: int
    center: np.ndarray
    side: float
    parent: int
    points: np.ndarray
    children: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def boxes_touch(a: Box, b: Box, tol=1e-12) -> bool:
    """True if the closed cubes intersect (share a face, edge or corner, or overlap)."""
    gap = np.abs(a.center - b.center) - 0.5 * (a.side + b.side)
    return bool(np.all(gap <= tol * max(a.side, b.side)))


class Octree:
    """Adaptive octree over a point set.

    Boxes are stored in a flat list; ``levels[l]`` lists box ids of level ``l``
    in Morton order. Empty children are never created.
    """

    def __init__(self, points, s=40, max_depth=30):
        points = np.asarray(points, dtype=float)
        if len(points) == 0:
            raise ValueError("no points")
        if s < 1:
            raise ValueError("occupancy must be >= 1")
        self.points = points
        self.s = int(s)
        self.max_depth = int(max_depth)
        lo, hi = points.min(axis=0), points.max(axis=0)
        side = float(np.max(hi - lo)) * (1 + 1e-10) or 1.0
        root = Box(0, 0, 0.5 * (lo + hi), side, -1, np.arange(len(points)))
        self.boxes = [root]
        frontier = [0]
        while frontier:
            nxt = []
            for b in frontier:
                if len(self.boxes[b].points) > self.s:
                    if self.boxes[b].level >= self.max_depth:
                        raise DepthExceeded(
                            f"box {b} still holds {len(self.boxes[b].points)} points "
                            f"at depth {self.max_depth}")
                    nxt.extend(self._split(b))
            frontier = nxt
        self._finalize()

    def _split(self, b):
        box = self.boxes[b]
        pts = self.points[box.points]
        octant = ((pts[:, 0] > box.center[0]).astype(int) * 4
                  + (pts[:, 1] > box.center[1]).astype(int) * 2
                  + (pts[:, 2] > box.center[2]).astype(int))
        new = []
        for o in range(8):
            sel = box.points[octant == o]
            if len(sel) == 0:
                continue
            c = box.center + (_OCTANTS[o] - 0.5) * 0.5 * box.side
            child = Box(len(self.boxes), box.level + 1, c, 0.5 * box.side, b, sel)
            self.boxes.append(child)
            box.children.append(child.id)
            new.append(child.id)
        return new

    def _finalize(self):
        """Recompute per-level Morton lists, colleagues and the point-to-leaf map."""
        self.levels = [[0]]
        while True:
            nxt = [c for b in self.levels[-1] for c in self.boxes[b].children]
            if not nxt:
                break
            self.levels.append(nxt)
        self.colleagues = {0: []}
        for lvl in self.levels[1:]:
            for b in lvl:
                box = self.boxes[b]
                par = self.boxes[box.parent]
                cands = [c for q in [par.id] + self.colleagues[par.id]
                         for c in self.boxes[q].children if c != b]
                self.colleagues[b] = [c for c in cands if boxes_touch(box, self.boxes[c])]
        self.leaf_of_point = np.empty(len(self.points), dtype=np.int64)
        for b in self.leaves:
            self.leaf_of_point[self.boxes[b].points] = b

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def leaves(self):
        return [b.id for b in self.boxes if b.is_leaf]

    def coarser_leaf_neighbors(self, b):
        """Leaves one level coarser than ``b`` that touch it."""
        box = self.boxes[b]
        if box.parent < 0:
            return []
        return [c for c in self.colleagues[box.parent]
                if self.boxes[c].is_leaf and boxes_touch(box, self.boxes[c])]

    def adjacent_leaves(self, b):
        """All leaves touching leaf ``b`` at any level (brute force over ancestors)."""
        box = self.boxes[b]
        out = []
        anc = b
        while anc >= 0:
            for c in self.colleagues[anc]:
                stack = [c]
                while stack:
                    x = stack.pop()
                    bx = self.boxes[x]
                    if not boxes_touch(box, bx):
                        continue
                    if bx.is_leaf:
                        out.append(x)
                    else:
                        stack.extend(bx.children)
            anc = self.boxes[anc].parent
        return sorted(set(out))

    def is_level_restricted(self) -> bool:
        lv = {b.id: b.level for b in self.boxes}
        return all(abs(lv[a] - lv[c]) <= 1
                   for a in self.leaves for c in self.adjacent_leaves(a))

    def stats(self) -> dict:
        leaves = self.leaves
        occ = Counter(len(self.boxes[b].points) for b in leaves)
        return {
            "n_points": int(len(self.points)),
            "occupancy": self.s,
            "depth": self.depth,
            "boxes_per_level": [len(l) for l in self.levels],
            "leaves_per_level": [sum(self.boxes[b].is_leaf for b in l) for l in self.levels],
            "leaf_levels": sorted({self.boxes[b].level for b in leaves}),
            "occupancy_histogram": {str(k): v for k, v in sorted(occ.items())},
        }

    def stats_json(self, **kw) -> str:
        return json.dumps(self.stats(), **kw)


def build_tree(points, s=40, max_depth=30) -> Octree:
    return Octree(points, s, max_depth)


def enforce_level_restriction(tree: Octree) -> Octree:
    """Split leaves until touching leaves differ by at most one level (in place)."""
    while True:
        to_split = set()
        for b in tree.leaves:
            box = tree.boxes[b]
            # a coarse leaf touching b must be a colleague of one of b's ancestors
            anc = box.parent
            while anc >= 0 and tree.boxes[anc].level >= box.level - 1:
                anc = tree.boxes[anc].parent
            while anc >= 0:
                for c in tree.colleagues[anc]:
                    cb = tree.boxes[c]
                    if cb.is_leaf and boxes_touch(box, cb):
                        to_split.add(c)
                anc = tree.boxes[anc].parent
        if not to_split:
            return tree
        for c in sorted(to_split):
            tree._split(c)
        tree._finalize()


@dataclass
class FarPartition:
    """Owner boxes around box ``box``: near ``N`` and far ``Q`` / ``P``."""

    box: int
    B: np.ndarray
    N_boxes: list
    Q_boxes: list
    P_boxes: list
    _owners: dict = field(repr=False, default_factory=dict)

    def _cat(self, boxes):
        if not boxes:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self._owners[b] for b in boxes])

    @property
    def N(self):
        return self._cat(self.N_boxes)

    @property
    def Q(self):
        return self._cat(self.Q_boxes)

    @property
    def P(self):
        return self._cat(self.P_boxes)

    @property
    def F(self):
        return self._cat(self.Q_boxes + self.P_boxes)


def separation_distance(tree: Octree, b, others):
    """Distance from the centre of ``b`` to the nearest point of each box in ``others``."""
    c = tree.boxes[b].center
    cen = np.array([tree.boxes[o].center for o in others]).reshape(-1, 3)
    half = 0.5 * np.array([tree.boxes[o].side for o in others])
    gap = np.maximum(np.abs(cen - c) - half[:, None], 0.0)
    return np.sqrt(np.sum(gap * gap, axis=1))


def near_owners(tree: Octree, b, owners):
    """Colleagues of ``b`` plus touching coarser leaves that currently own indices."""
    out = [c for c in tree.colleagues[b] if c in owners and len(owners[c])]
    out += [c for c in tree.coarser_leaf_neighbors(b) if c in owners and len(owners[c])]
    return out


def partition_far_field(tree: Octree, b, owners: dict, store=None,
                        near_pattern=None, owner_of=None, radius_factor=2.5):
    """Split the active indices around box ``b`` into ``N``, ``Q`` and ``P``.

    ``owners`` maps each box currently holding active indices to its index
    array. A far owner box goes to ``Q`` when it is not fully outside the
    sphere of radius ``radius_factor * side`` about the centre of ``b``, when
    a near-quadrature correction couples it to ``b`` (``near_pattern``, a
    ``(csr, csc)`` pair of the correction sparsity, with ``owner_of`` mapping
    indices to owner boxes), or when ``store`` holds an update block between it
    and ``b``.
    """
    B = owners[b]
    nb = near_owners(tree, b, owners)
    skip = set(nb) | {b}
    far = [o for o in owners if o not in skip and len(owners[o])]
    qset = set()
    if far:
        dist = separation_distance(tree, b, far)
        lim = radius_factor * tree.boxes[b].side * (1 - 1e-12)
        qset.update(o for o, d in zip(far, dist) if d < lim)
    if near_pattern is not None and len(B):
        csr, csc = near_pattern
        cols = csr[B].indices
        rows = csc[:, B].indices
        idx = np.concatenate([cols, rows])
        own = owner_of[idx]
        qset.update(int(o) for o in np.unique(own[own >= 0]))
    if store is not None:
        qset.update(store.partners(b))
    qset -= skip
    Q = [o for o in far if o in qset]
    P = [o for o in far if o not in qset]
    return FarPartition(b, B, nb, Q, P, owners)


def build_schur_pair_list(tree: Octree, order=None):
    """Pairs ``(i, j)``: eliminating box ``i`` updates entries read for box ``j``.

    Geometric prediction within each level for the sweep ``order`` (default:
    Morton order), ignoring quadrature spill. Eliminating ``i`` writes blocks
    among ``{i} + N(i)``; skeletonizing a later box ``j`` reads blocks against
    ``{j} + N(j) + Q(j)``, so the pair is recorded when the two sets meet.
    """
    pairs = []
    for lvl in tree.levels[1:]:
        order_l = lvl if order is None else [b for b in order if b in set(lvl)]
        owners = {b: np.array([0]) for b in order_l}
        for b in order_l:
            for c in tree.coarser_leaf_neighbors(b):
                owners.setdefault(c, np.array([0]))
        foot = {i: {i} | set(near_owners(tree, i, owners)) for i in order_l}
        read = {}
        for j in order_l:
            part = partition_far_field(tree, j, owners)
            read[j] = {j} | set(part.N_boxes) | set(part.Q_boxes)
        for a, i in enumerate(order_l):
            for j in order_l[a + 1:]:
                if foot[i] & read[j]:
                    pairs.append((i, j))
    return pairs
