"""Median-split bounding volume hierarchy over triangles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TriangleBVH:
    lo: np.ndarray          # (nodes, 3) box minimum
    hi: np.ndarray          # (nodes, 3) box maximum
    left: np.ndarray        # child index or -1 for leaves
    right: np.ndarray
    start: np.ndarray       # leaves: first slot in ``order``
    count: np.ndarray       # leaves: number of triangles
    order: np.ndarray       # triangle ids grouped by leaf
    depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_triangles(self, node: int) -> np.ndarray:
        s = self.start[node]
        return self.order[s:s + self.count[node]]


def build_bvh(corners: np.ndarray, leaf_size: int = 8) -> TriangleBVH:
    """Build over (T, 3, 3) triangle corners by splitting centroids at the median of the longest axis."""
    t = len(corners)
    tlo = corners.min(axis=1)
    thi = corners.max(axis=1)
    cen = corners.mean(axis=1)
    order = np.arange(t)
    lo, hi, left, right, start, count, depth = [], [], [], [], [], [], []

    def new_node(a, b, d):
        ids = order[a:b]
        lo.append(tlo[ids].min(0))
        hi.append(thi[ids].max(0))
        left.append(-1)
        right.append(-1)
        start.append(a)
        count.append(b - a)
        depth.append(d)
        return len(lo) - 1

    root = new_node(0, t, 0)
    stack = [(root, 0, t, 0)]
    while stack:
        node, a, b, d = stack.pop()
        if b - a <= leaf_size:
            continue
        ids = order[a:b]
        c = cen[ids]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        mid = (b - a) // 2
        part = np.argsort(c[:, axis], kind="stable")
        order[a:b] = ids[part]
        l_node = new_node(a, a + mid, d + 1)
        r_node = new_node(a + mid, b, d + 1)
        left[node] = l_node
        right[node] = r_node
        count[node] = 0
        stack.append((r_node, a + mid, b, d + 1))
        stack.append((l_node, a, a + mid, d + 1))
    return TriangleBVH(
        np.array(lo), np.array(hi), np.array(left), np.array(right),
        np.array(start), np.array(count), order, np.array(depth),
    )
