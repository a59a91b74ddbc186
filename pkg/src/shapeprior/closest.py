"""Exact closest-point queries on triangle meshes.

Candidate triangles are pruned with a KD-tree over triangle centroids: the
nearest mesh vertex gives an upper bound ``d`` on the surface distance, so
only triangles whose centroid lies within ``d + r_max`` (``r_max`` the largest
centroid-to-corner distance) can hold a closer point.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to points ``p`` (all ``(k, 3)``).

    Voronoi-region classification; zero-area triangles fall back to their
    edges.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    def assign(cond, value):
        sel = cond & ~done
        if np.any(sel):
            out[sel] = value(sel)
            done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.cross(ab, ac)
        area2 = np.einsum("ij,ij->i", cross, cross)
        scale = np.maximum(np.einsum("ij,ij->i", ab, ab), np.einsum("ij,ij->i", ac, ac))
        degenerate = area2 <= 1e-24 * np.maximum(scale, 1e-300) ** 2
        if np.any(degenerate):
            sel = degenerate
            out[sel] = _closest_on_edges(p[sel], a[sel], b[sel], c[sel])
            done[sel] = True

        assign((d1 <= 0) & (d2 <= 0), lambda s: a[s])
        assign((d3 >= 0) & (d4 <= d3), lambda s: b[s])
        assign((d6 >= 0) & (d5 <= d6), lambda s: c[s])
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0),
               lambda s: a[s] + (d1[s] / (d1[s] - d3[s]))[:, None] * ab[s])
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0),
               lambda s: a[s] + (d2[s] / (d2[s] - d6[s]))[:, None] * ac[s])
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
               lambda s: b[s] + ((d4[s] - d3[s]) / ((d4[s] - d3[s]) + (d5[s] - d6[s])))[:, None]
               * (c[s] - b[s]))

        rest = ~done
        if np.any(rest):
            denom = 1.0 / (va[rest] + vb[rest] + vc[rest])
            v = vb[rest] * denom
            w = vc[rest] * denom
            out[rest] = a[rest] + v[:, None] * ab[rest] + w[:, None] * ac[rest]
    return out


def _closest_on_segments(p, a, b):
    ab = b - a
    L = np.einsum("ij,ij->i", ab, ab)
    t = np.where(L > 0, np.einsum("ij,ij->i", p - a, ab) / np.where(L > 0, L, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return a + t[:, None] * ab


def _closest_on_edges(p, a, b, c):
    cands = [_closest_on_segments(p, a, b), _closest_on_segments(p, b, c),
             _closest_on_segments(p, c, a)]
    d = np.stack([((q - p) ** 2).sum(axis=1) for q in cands])
    k = np.argmin(d, axis=0)
    return np.stack(cands)[k, np.arange(p.shape[0])]


class ClosestPointIndex:
    """Read-only spatial index over the triangles of a target surface."""

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise ValueError("closest-point index needs at least one triangle")
        self.mesh = mesh
        tri = mesh.vertices[mesh.triangles]
        self._a = np.ascontiguousarray(tri[:, 0])
        self._b = np.ascontiguousarray(tri[:, 1])
        self._c = np.ascontiguousarray(tri[:, 2])
        centroids = tri.mean(axis=1)
        self._r_max = float(np.linalg.norm(tri - centroids[:, None], axis=2).max())
        self._tri_tree = cKDTree(centroids)
        used = np.unique(mesh.triangles)
        self._used_vertices = mesh.vertices[used]
        self._vert_tree = cKDTree(self._used_vertices)

    def query(self, points):
        """Closest surface points and squared distances for ``(k, 3)`` queries."""
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d_vert, _ = self._vert_tree.query(q)
        radii = d_vert * (1.0 + 1e-9) + self._r_max + 1e-12
        cand = self._tri_tree.query_ball_point(q, radii)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        qi = np.repeat(np.arange(q.shape[0]), counts)
        ti = np.fromiter((t for c in cand for t in c), dtype=np.int64, count=int(counts.sum()))
        pts = closest_point_on_triangles(q[qi], self._a[ti], self._b[ti], self._c[ti])
        d2 = ((pts - q[qi]) ** 2).sum(axis=1)
        # Per-query minimum: sort by (query, distance) and take the first of each group.
        order = np.lexsort((d2, qi))
        first = np.ones(order.size, dtype=bool)
        first[1:] = qi[order][1:] != qi[order][:-1]
        best = order[first]
        return pts[best], d2[best]


def closest_point(index: ClosestPointIndex, x):
    """Closest point on the indexed surface to a single point and its squared distance."""
    pts, d2 = index.query(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return pts[0], float(d2[0])
