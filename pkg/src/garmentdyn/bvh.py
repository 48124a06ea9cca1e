"""Axis-aligned bounding volume hierarchy over triangles, and closest-point queries.

The tree topology is built once from a reference pose; posed meshes only refit
the boxes. Queries run in numba. A vectorised brute-force scan lives next to it
as the reference implementation.
"""
from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 4

# closest-feature codes returned by the triangle routine
FEAT_FACE = 0
FEAT_EDGE = 1  # + local edge index (0: v0v1, 1: v1v2, 2: v2v0)
FEAT_VERT = 4  # + local vertex index


class BVHTopology:
    """Preorder node arrays for one or more independent subtrees (one per component)."""

    def __init__(self, vertices, faces, components=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if components is None:
            components = np.zeros(len(faces), dtype=np.int64)
        components = np.asarray(components, dtype=np.int64)
        centroids = vertices[faces].mean(axis=1)
        left, right, start, count = [], [], [], []
        order: list[int] = []
        roots = []

        def build(ids):
            node = len(left)
            left.append(-1)
            right.append(-1)
            start.append(len(order))
            count.append(0)
            if len(ids) <= LEAF_SIZE:
                order.extend(int(i) for i in ids)
                count[node] = len(ids)
                return node
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            half = len(srt) // 2
            left[node] = build(srt[:half])
            right[node] = build(srt[half:])
            return node

        for comp in np.unique(components):
            ids = np.flatnonzero(components == comp)
            roots.append(build(ids))
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.order = np.asarray(order, dtype=np.int64)
        self.roots = np.asarray(roots, dtype=np.int64)
        self.faces = faces
        self.components = components

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def refit(self, vertices) -> tuple[np.ndarray, np.ndarray]:
        return _refit(np.asarray(vertices, dtype=np.float64), self.faces, self.left, self.right,
                      self.start, self.count, self.order)


@njit(cache=True)
def _refit(verts, faces, left, right, start, count, order):
    n = left.shape[0]
    lo = np.empty((n, 3))
    hi = np.empty((n, 3))
    for node in range(n - 1, -1, -1):
        if left[node] < 0:
            for k in range(3):
                lo[node, k] = np.inf
                hi[node, k] = -np.inf
            for s in range(start[node], start[node] + count[node]):
                f = order[s]
                for c in range(3):
                    v = faces[f, c]
                    for k in range(3):
                        x = verts[v, k]
                        if x < lo[node, k]:
                            lo[node, k] = x
                        if x > hi[node, k]:
                            hi[node, k] = x
        else:
            a = left[node]
            b = right[node]
            for k in range(3):
                lo[node, k] = min(lo[a, k], lo[b, k])
                hi[node, k] = max(hi[a, k], hi[b, k])
    return lo, hi


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p and the feature code it lies on."""
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]; ap1 = p[1] - a[1]; ap2 = p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    out = np.empty(3)
    if d1 <= 0.0 and d2 <= 0.0:
        out[:] = a
        return out, FEAT_VERT + 0
    bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        out[:] = b
        return out, FEAT_VERT + 1
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0] = a[0] + v * ab0; out[1] = a[1] + v * ab1; out[2] = a[2] + v * ab2
        return out, FEAT_EDGE + 0
    cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        out[:] = c
        return out, FEAT_VERT + 2
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0] = a[0] + w * ac0; out[1] = a[1] + w * ac1; out[2] = a[2] + w * ac2
        return out, FEAT_EDGE + 2
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = b[0] + w * (c[0] - b[0]); out[1] = b[1] + w * (c[1] - b[1]); out[2] = b[2] + w * (c[2] - b[2])
        return out, FEAT_EDGE + 1
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = a[0] + ab0 * v + ac0 * w
    out[1] = a[1] + ab1 * v + ac1 * w
    out[2] = a[2] + ab2 * v + ac2 * w
    return out, FEAT_FACE


@njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            s += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            s += d * d
    return s


@njit(cache=True)
def _nearest_in_tree(p, root, verts, faces, left, right, start, count, order, lo, hi, bound):
    best = bound
    best_face = -1
    best_feat = -1
    best_pt = np.zeros(3)
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = root
    sp += 1
    visited = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        visited += 1
        if _box_dist2(p, lo[node], hi[node]) > best:
            continue
        if left[node] < 0:
            for s in range(start[node], start[node] + count[node]):
                f = order[s]
                q, feat = closest_point_triangle(p, verts[faces[f, 0]], verts[faces[f, 1]], verts[faces[f, 2]])
                d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
                if d2 < best or (d2 == best and f < best_face):
                    best = d2
                    best_face = f
                    best_feat = feat
                    best_pt[:] = q
        else:
            a = left[node]
            b = right[node]
            da = _box_dist2(p, lo[a], hi[a])
            db = _box_dist2(p, lo[b], hi[b])
            # push the farther child first so the nearer one is popped next
            if da <= db:
                stack[sp] = b
                stack[sp + 1] = a
            else:
                stack[sp] = a
                stack[sp + 1] = b
            sp += 2
    return best, best_face, best_feat, best_pt, visited


@njit(cache=True)
def _feature_normal(face, feat, face_normals, edge_normals, vert_normals, face_edges, faces):
    if feat == FEAT_FACE:
        return face_normals[face]
    if feat < FEAT_VERT:
        return edge_normals[face_edges[face, feat - FEAT_EDGE]]
    return vert_normals[faces[face, feat - FEAT_VERT]]


@njit(cache=True)
def query_signed(points, verts, faces, left, right, start, count, order, lo, hi, roots,
                 face_normals, edge_normals, vert_normals, face_edges):
    """Signed distance to the union of the closed components rooted at ``roots``."""
    n = points.shape[0]
    dist = np.empty(n)
    closest = np.empty((n, 3))
    normal = np.empty((n, 3))
    face_id = np.empty(n, dtype=np.int64)
    visits = 0
    for i in range(n):
        p = points[i]
        best_signed = np.inf
        nroot = roots.shape[0]
        bds = np.empty(nroot)
        for r in range(nroot):
            bds[r] = _box_dist2(p, lo[roots[r]], hi[roots[r]])
        for r in np.argsort(bds, kind="mergesort"):
            root = roots[r]
            bd = bds[r]
            bound = np.inf
            # outside the box means outside the component, so only an unsigned
            # distance below the current best can matter
            if bd > 0.0 and best_signed >= 0.0 and best_signed < np.inf:
                if bd > best_signed * best_signed:
                    continue
                bound = best_signed * best_signed
            d2, f, feat, q, v = _nearest_in_tree(p, root, verts, faces, left, right, start, count, order,
                                                 lo, hi, bound)
            visits += v
            if f < 0:
                continue
            nrm = _feature_normal(f, feat, face_normals, edge_normals, vert_normals, face_edges, faces)
            dot = (p[0] - q[0]) * nrm[0] + (p[1] - q[1]) * nrm[1] + (p[2] - q[2]) * nrm[2]
            d = np.sqrt(d2)
            if dot < 0.0:
                d = -d
            if d < best_signed:
                best_signed = d
                dist[i] = d
                closest[i] = q
                normal[i] = nrm
                face_id[i] = f
    return dist, closest, normal, face_id, visits


# --------------------------------------------------------------------------- reference scan


def closest_points_bruteforce(p, tri):
    """Vectorised closest points from every point in ``p`` (k, 3) to every triangle in ``tri`` (m, 3, 3).

    Returns squared distances (k, m), closest points (k, m, 3) and feature codes (k, m).
    """
    p = np.asarray(p, dtype=np.float64)[:, None, :]
    a, b, c = (tri[None, :, i, :] for i in range(3))
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c

    def dot(u, v):
        return np.einsum("...k,...k->...", u, v)

    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    shape = d1.shape
    q = np.empty(shape + (3,))
    feat = np.full(shape, -1, dtype=np.int64)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, point, code):
        m = mask & ~done
        q[m] = np.broadcast_to(point, shape + (3,))[m]
        feat[m] = code
        done[m] = True

    with np.errstate(invalid="ignore", divide="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a, FEAT_VERT + 0)
        assign((d3 >= 0) & (d4 <= d3), b, FEAT_VERT + 1)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab, FEAT_EDGE + 0)
        assign((d6 >= 0) & (d5 <= d6), c, FEAT_VERT + 2)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac, FEAT_EDGE + 2)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w2[..., None] * (c - b), FEAT_EDGE + 1)
        denom = 1.0 / (va + vb + vc)
        assign(np.ones(shape, dtype=bool),
               a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None], FEAT_FACE)
    d2s = np.sum((p - q) ** 2, axis=-1)
    return d2s, q, feat
