"""Parametric skinned body: shape blend shapes, joint regression, linear blend skinning,
and signed-distance queries against the posed surface."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import bvh as _bvh
from .mesh import TriMesh, scatter_add

log = logging.getLogger(__name__)


class ShapeDimMismatch(ValueError):
    pass


class BodyFormatError(ValueError):
    pass


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 1e-12, theta, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    z = np.zeros_like(kx)
    K = np.stack([z, -kz, ky, kz, z, -kx, -ky, kx, z], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    small = (theta[..., 0] <= 1e-12)
    if np.any(small):
        R = np.where(small[..., None, None], eye, R)
    return R


@dataclass(frozen=True)
class BodyPose:
    joint_rotations: np.ndarray  # (J, 3) axis-angle, radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.root_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "joint_rotations", r)
        object.__setattr__(self, "root_translation", t)

    @classmethod
    def identity(cls, n_joints: int) -> "BodyPose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotations)


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Blend-shape template, skeleton and skinning weights.

    shape_dirs is (V, 3, n_shape); joint_regressor is (J, V); parents[0] == -1.
    """

    template_verts: np.ndarray
    faces: np.ndarray
    shape_dirs: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    joint_names: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.template_verts, dtype=np.float64).reshape(-1, 3)
        nv = len(v)
        sd = np.asarray(self.shape_dirs, dtype=np.float64)
        sd = sd.reshape(nv, 3, -1) if sd.size else np.zeros((nv, 3, 0))
        jr = np.asarray(self.joint_regressor, dtype=np.float64).reshape(-1, nv)
        parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        w = np.asarray(self.skin_weights, dtype=np.float64).reshape(nv, -1)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nj = len(parents)
        if jr.shape[0] != nj or w.shape[1] != nj:
            raise BodyFormatError("joint count mismatch between parents, regressor and weights")
        if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, nj)):
            raise BodyFormatError("parents must define a tree rooted at joint 0 in topological order")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise BodyFormatError("skin weights must be non-negative with rows summing to 1")
        if faces.size and (faces.min() < 0 or faces.max() >= nv):
            raise BodyFormatError("face index out of range")
        for name, arr in (("template_verts", v), ("shape_dirs", sd), ("joint_regressor", jr),
                          ("parents", parents), ("skin_weights", w), ("faces", faces)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_vertices(self) -> int:
        return len(self.template_verts)

    def shaped_verts(self, shape) -> np.ndarray:
        beta = self._check_shape(shape)
        return self.template_verts + self.shape_dirs @ beta

    def joints(self, shape) -> np.ndarray:
        """Rest joint locations J(beta), shape (J, 3)."""
        return self.joint_regressor @ self.shaped_verts(shape)

    def _check_shape(self, shape) -> np.ndarray:
        beta = np.asarray(shape, dtype=np.float64).reshape(-1)
        if len(beta) != self.n_shape:
            raise ShapeDimMismatch(f"expected {self.n_shape} shape coefficients, got {len(beta)}")
        return beta

    # topology caches (computed once per model)
    @cached_property
    def topology(self) -> "SurfaceTopology":
        return SurfaceTopology(self.template_verts, self.faces)


class SurfaceTopology:
    """Edge table, connected components and BVH tree layout for a fixed face list."""

    def __init__(self, verts, faces):
        faces = np.asarray(faces, dtype=np.int64)
        self.faces = faces
        nv = len(verts)
        corners = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        key = np.sort(corners, axis=1)
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        self.edges = uniq
        self.face_edges = inverse.reshape(-1)[: 3 * len(faces)].reshape(3, -1).T.copy()
        m = len(faces)
        rows = np.repeat(np.arange(m), 3)
        adj = coo_matrix((np.ones(3 * m), (rows, faces.ravel())), shape=(m, nv)).tocsr()
        _, labels = connected_components(adj @ adj.T, directed=False)
        self.components = labels.astype(np.int64)
        self.bvh = _bvh.BVHTopology(verts, faces, self.components)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass(frozen=True, eq=False)
class PosedBody:
    """Posed surface with the data needed for signed-distance queries."""

    verts: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray
    face_normals: np.ndarray
    edge_normals: np.ndarray
    joint_transforms: np.ndarray  # (J, 4, 4) rest-relative skinning transforms
    joint_positions: np.ndarray  # (J, 3) posed world positions
    topology: SurfaceTopology = field(repr=False)
    box_lo: np.ndarray = field(repr=False)
    box_hi: np.ndarray = field(repr=False)
    query_stats: dict = field(default_factory=lambda: {"queries": 0, "node_visits": 0}, compare=False)

    @classmethod
    def from_surface(cls, verts, topology: SurfaceTopology, joint_transforms=None, joint_positions=None):
        verts = np.ascontiguousarray(verts, dtype=np.float64)
        faces = topology.faces
        tri = verts[faces]
        raw = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        fn = _unit(raw)
        # angle-weighted vertex pseudo-normals
        angles = []
        for k in range(3):
            u = _unit(tri[:, (k + 1) % 3] - tri[:, k])
            w = _unit(tri[:, (k + 2) % 3] - tri[:, k])
            angles.append(np.arccos(np.clip(np.einsum("ij,ij->i", u, w), -1.0, 1.0)))
        weighted = np.concatenate([a[:, None] * fn for a in angles])
        vn = _unit(scatter_add(faces.T.ravel(), weighted, len(verts)))
        en = _unit(scatter_add(topology.face_edges.T.ravel(), np.tile(fn, (3, 1)), len(topology.edges)))
        lo, hi = topology.bvh.refit(verts)
        eye = np.eye(4)[None] if joint_transforms is None else joint_transforms
        jp = np.zeros((0, 3)) if joint_positions is None else joint_positions
        return cls(verts, faces, vn, fn, en, eye, jp, topology, lo, hi)

    @classmethod
    def from_mesh(cls, verts, faces) -> "PosedBody":
        """Static body from a raw triangle soup (no skeleton)."""
        return cls.from_surface(verts, SurfaceTopology(verts, faces))

    def signed_distance(self, points):
        """Signed distance, closest surface point and pseudo-normal for each point.

        Positive outside, negative inside. A body made of several closed
        components is treated as their union.
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        t = self.topology.bvh
        d, q, n, _, visits = _bvh.query_signed(
            pts, self.verts, self.faces, t.left, t.right, t.start, t.count, t.order,
            self.box_lo, self.box_hi, t.roots, self.face_normals, self.edge_normals,
            self.vertex_normals, self.topology.face_edges,
        )
        self.query_stats["queries"] += len(pts)
        self.query_stats["node_visits"] += int(visits)
        log.debug("bvh query: %d points, %d node visits", len(pts), visits)
        return d, q, n

    def signed_distance_with_faces(self, points):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        t = self.topology.bvh
        d, q, n, f, _ = _bvh.query_signed(
            pts, self.verts, self.faces, t.left, t.right, t.start, t.count, t.order,
            self.box_lo, self.box_hi, t.roots, self.face_normals, self.edge_normals,
            self.vertex_normals, self.topology.face_edges,
        )
        return d, q, n, f

    def signed_distance_bruteforce(self, points):
        """Exhaustive scan over every triangle; same contract as :meth:`signed_distance`."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tri = self.verts[self.faces]
        d2, q, feat = _bvh.closest_points_bruteforce(pts, tri)
        comps = self.topology.components
        out_d = np.full(len(pts), np.inf)
        out_q = np.zeros((len(pts), 3))
        out_n = np.zeros((len(pts), 3))
        out_f = np.full(len(pts), -1, dtype=np.int64)
        rows = np.arange(len(pts))
        for c in np.unique(comps):
            ids = np.flatnonzero(comps == c)
            j = ids[np.argmin(d2[:, ids], axis=1)]
            fq = q[rows, j]
            ff = feat[rows, j]
            nrm = np.where(
                (ff == _bvh.FEAT_FACE)[:, None], self.face_normals[j],
                np.where(
                    (ff < _bvh.FEAT_VERT)[:, None],
                    self.edge_normals[self.topology.face_edges[j, np.clip(ff - _bvh.FEAT_EDGE, 0, 2)]],
                    self.vertex_normals[self.faces[j, np.clip(ff - _bvh.FEAT_VERT, 0, 2)]],
                ),
            )
            dist = np.sqrt(d2[rows, j])
            dist = np.where(np.einsum("ij,ij->i", pts - fq, nrm) < 0, -dist, dist)
            better = dist < out_d
            out_d[better] = dist[better]
            out_q[better] = fq[better]
            out_n[better] = nrm[better]
            out_f[better] = j[better]
        return out_d, out_q, out_n, out_f


def joint_transforms(model: BodyModel, shape, pose: BodyPose):
    """Rest-relative skinning transforms (J, 4, 4) and posed joint positions (J, 3)."""
    if pose.n_joints != model.n_joints:
        raise ValueError(f"pose has {pose.n_joints} joints, model has {model.n_joints}")
    J = model.joints(shape)
    R = rodrigues(pose.joint_rotations)
    nj = model.n_joints
    Rw = np.empty((nj, 3, 3))
    tw = np.empty((nj, 3))
    for j in range(nj):
        p = model.parents[j]
        if p < 0:
            Rw[j] = R[j]
            tw[j] = J[j] + pose.root_translation
        else:
            Rw[j] = Rw[p] @ R[j]
            tw[j] = Rw[p] @ (J[j] - J[p]) + tw[p]
    A = np.zeros((nj, 4, 4))
    A[:, :3, :3] = Rw
    A[:, :3, 3] = tw - np.einsum("jab,jb->ja", Rw, J)
    A[:, 3, 3] = 1.0
    return A, tw


def skin_points(points, weights, transforms) -> np.ndarray:
    """Linear blend skinning of rest-space ``points`` (n, 3)."""
    blended = np.einsum("nj,jab->nab", weights, transforms[:, :3, :])
    return np.einsum("nab,nb->na", blended[:, :, :3], points) + blended[:, :, 3]


def pose_body(model: BodyModel, shape, pose: BodyPose) -> PosedBody:
    shaped = model.shaped_verts(shape)
    A, jpos = joint_transforms(model, shape, pose)
    verts = skin_points(shaped, model.skin_weights, A)
    return PosedBody.from_surface(verts, model.topology, A, jpos)


def signed_distance(body: PosedBody, x):
    """Signed distance of one point or an (n, 3) array of points to ``body``."""
    x = np.asarray(x, dtype=np.float64)
    d, q, n = body.signed_distance(x.reshape(-1, 3))
    if x.ndim == 1:
        return float(d[0]), q[0], n[0]
    return d, q, n


def transfer_skin_weights(body: BodyModel, garment: TriMesh | np.ndarray) -> np.ndarray:
    """Skinning weights of the nearest rest-pose body vertex for each garment vertex.

    Ties go to the lowest body vertex index.
    """
    pts = garment.vertices if isinstance(garment, TriMesh) else np.asarray(garment, dtype=np.float64)
    ref = body.template_verts
    out = np.empty((len(pts), body.n_joints))
    for s in range(0, len(pts), 256):
        chunk = pts[s:s + 256]
        d2 = ((chunk[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
        out[s:s + 256] = body.skin_weights[np.argmin(d2, axis=1)]
    return out


# --------------------------------------------------------------------------- file format


def save_body(model: BodyModel, path) -> None:
    doc = {
        "template": model.template_verts.ravel().tolist(),
        "faces": model.faces.tolist(),
        "shape_dirs": model.shape_dirs.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "parents": model.parents.tolist(),
        "skin_weights": model.skin_weights.tolist(),
    }
    if model.joint_names:
        doc["joint_names"] = list(model.joint_names)
    Path(path).write_text(json.dumps(doc))


def load_body(path) -> BodyModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BodyFormatError(f"{path}: invalid JSON ({exc})") from None
    required = ("template", "faces", "shape_dirs", "joint_regressor", "parents", "skin_weights")
    missing = [k for k in required if k not in doc]
    if missing:
        raise BodyFormatError(f"{path}: missing keys {missing}")
    return BodyModel(
        template_verts=np.asarray(doc["template"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        shape_dirs=np.asarray(doc["shape_dirs"], dtype=np.float64),
        joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
        parents=np.asarray(doc["parents"], dtype=np.int64),
        skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
        joint_names=tuple(doc.get("joint_names", ())),
    )
