"""Exact nearest-point-on-mesh queries via a bounding-volume hierarchy.

The tree is built once in numpy (median split on the longest centroid axis);
queries run in numba-compiled code with distance-priority pruning, so the
result is exact — identical to a brute-force scan over all triangles — with
ties broken toward the lowest triangle index.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 4


class MeshBvh:
    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, np.float64)
        faces = np.asarray(faces, np.int64)
        if len(faces) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.vertices = vertices
        self.faces = faces
        self.triangles = vertices[faces]               # (M, 3, 3)
        centroids = self.triangles.mean(axis=1)

        # flat node arrays; children index into nodes, leaves into tri_order
        nodes_min, nodes_max = [], []
        nodes_left, nodes_right = [], []
        nodes_start, nodes_count = [], []
        order = np.arange(len(faces))

        def build(idx):
            node = len(nodes_min)
            tris = self.triangles[idx]
            nodes_min.append(tris.reshape(-1, 3).min(axis=0))
            nodes_max.append(tris.reshape(-1, 3).max(axis=0))
            nodes_left.append(-1)
            nodes_right.append(-1)
            nodes_start.append(-1)
            nodes_count.append(0)
            if len(idx) <= LEAF_SIZE:
                nodes_start[node] = len(leaf_order)
                nodes_count[node] = len(idx)
                leaf_order.extend(sorted(idx.tolist()))
                return node
            cent = centroids[idx]
            axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
            half = len(idx) // 2
            part = idx[np.argsort(cent[:, axis], kind="stable")]
            nodes_left[node] = build(part[:half])
            nodes_right[node] = build(part[half:])
            return node

        leaf_order = []
        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            build(order)
        finally:
            sys.setrecursionlimit(old)

        self.node_min = np.asarray(nodes_min)
        self.node_max = np.asarray(nodes_max)
        self.node_left = np.asarray(nodes_left, np.int64)
        self.node_right = np.asarray(nodes_right, np.int64)
        self.node_start = np.asarray(nodes_start, np.int64)
        self.node_count = np.asarray(nodes_count, np.int64)
        self.tri_order = np.asarray(leaf_order, np.int64)

    def nearest(self, points):
        """Exact nearest surface point for each query (Q, 3).

        Returns (distance (Q,), triangle index (Q,), closest point (Q, 3),
        barycentric coords (Q, 3)).
        """
        points = np.atleast_2d(np.asarray(points, np.float64))
        dist, tri, closest = _query_batch(
            points, self.triangles, self.node_min, self.node_max,
            self.node_left, self.node_right, self.node_start,
            self.node_count, self.tri_order)
        bary = barycentric_coordinates(closest, self.triangles[tri])
        return dist, tri, closest, bary


def barycentric_coordinates(points, triangles):
    """Barycentric coords of points (Q, 3) known to lie on triangles
    (Q, 3, 3); degenerate triangles collapse mass onto the nearest vertex."""
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    v0, v1 = b - a, c - a
    v2 = points - a
    d00 = np.einsum("qk,qk->q", v0, v0)
    d01 = np.einsum("qk,qk->q", v0, v1)
    d11 = np.einsum("qk,qk->q", v1, v1)
    d20 = np.einsum("qk,qk->q", v2, v0)
    d21 = np.einsum("qk,qk->q", v2, v1)
    denom = d00 * d11 - d01 * d01
    ok = denom > 1e-18
    denom = np.where(ok, denom, 1.0)
    v = np.where(ok, (d11 * d20 - d01 * d21) / denom, 0.0)
    w = np.where(ok, (d00 * d21 - d01 * d20) / denom, 0.0)
    bary = np.stack([1.0 - v - w, v, w], axis=1)
    bary = np.clip(bary, 0.0, 1.0)
    return bary / bary.sum(axis=1, keepdims=True)


@njit(cache=True)
def _closest_on_triangle(a, b, c, p):
    """Ericson's closest point on a triangle."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + ab * (d1 / (d1 - d3))
    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + ac * (d2 / (d2 - d6))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


@njit(cache=True)
def _box_dist2(bmin, bmax, p):
    d2 = 0.0
    for k in range(3):
        if p[k] < bmin[k]:
            d2 += (bmin[k] - p[k]) ** 2
        elif p[k] > bmax[k]:
            d2 += (p[k] - bmax[k]) ** 2
    return d2


@njit(cache=True)
def _query_one(p, triangles, node_min, node_max, node_left, node_right,
               node_start, node_count, tri_order):
    best_d2 = np.inf
    best_tri = -1
    best_pt = np.zeros(3)
    stack = np.empty(128, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_dist2(node_min[node], node_max[node], p) > best_d2 + 1e-18:
            continue
        if node_count[node] > 0:
            for i in range(node_start[node], node_start[node] + node_count[node]):
                tri = tri_order[i]
                q = _closest_on_triangle(triangles[tri, 0], triangles[tri, 1],
                                         triangles[tri, 2], p)
                d2 = ((q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2
                      + (q[2] - p[2]) ** 2)
                if d2 < best_d2 - 1e-18 or (abs(d2 - best_d2) <= 1e-18
                                            and tri < best_tri):
                    best_d2 = d2
                    best_tri = tri
                    best_pt = q
        else:
            left = node_left[node]
            right = node_right[node]
            dl = _box_dist2(node_min[left], node_max[left], p)
            dr = _box_dist2(node_min[right], node_max[right], p)
            # push the farther child first so the nearer is visited next
            if dl <= dr:
                stack[top] = right
                stack[top + 1] = left
            else:
                stack[top] = left
                stack[top + 1] = right
            top += 2
    return best_d2, best_tri, best_pt


@njit(cache=True)
def _query_batch(points, triangles, node_min, node_max, node_left,
                 node_right, node_start, node_count, tri_order):
    q = points.shape[0]
    dist = np.empty(q)
    tri = np.empty(q, np.int64)
    closest = np.empty((q, 3))
    for i in range(q):
        d2, t, pt = _query_one(points[i], triangles, node_min, node_max,
                               node_left, node_right, node_start,
                               node_count, tri_order)
        dist[i] = np.sqrt(d2)
        tri[i] = t
        closest[i] = pt
    return dist, tri, closest


def brute_force_nearest(points, vertices, faces):
    """Reference oracle: exhaustive scan over all triangles."""
    points = np.atleast_2d(np.asarray(points, np.float64))
    tris = np.asarray(vertices, np.float64)[np.asarray(faces, np.int64)]
    dist = np.empty(len(points))
    tri = np.empty(len(points), np.int64)
    for i, p in enumerate(points):
        best_d2, best_t = np.inf, -1
        for m in range(len(tris)):
            q = _closest_on_triangle(tris[m, 0], tris[m, 1], tris[m, 2], p)
            d2 = float(np.sum((q - p) ** 2))
            if d2 < best_d2 - 1e-18:
                best_d2, best_t = d2, m
        dist[i] = np.sqrt(best_d2)
        tri[i] = best_t
    return dist, tri
