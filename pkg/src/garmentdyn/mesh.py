"""Triangle meshes, rest-state precomputation and Wavefront OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEGENERATE_DET = 1e-12


class MeshError(ValueError):
    pass


class DegenerateFace(MeshError):
    def __init__(self, face_id: int):
        super().__init__(f"face {face_id} is degenerate in rest coordinates")
        self.face_id = face_id


class ParseError(MeshError):
    def __init__(self, line: int, msg: str = ""):
        super().__init__(f"OBJ parse error at line {line}" + (f": {msg}" if msg else ""))
        self.line = line


class NonTriangularFace(ParseError):
    def __init__(self, line: int):
        super().__init__(line, "only triangular faces are supported")


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with a flat 2D rest parameterisation.

    ``vertices`` is (n, 3) in meters, ``faces`` is (m, 3) 0-based and
    ``rest_uv`` is (n, 2): the undeformed planar position of every vertex.
    """

    vertices: np.ndarray
    faces: np.ndarray
    rest_uv: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        uv = _frozen(self.rest_uv, np.float64).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "rest_uv", uv)
        n = len(v)
        if len(uv) != n:
            raise MeshError(f"rest_uv has {len(uv)} rows, expected {n}")
        if f.size and (f.min() < 0 or f.max() >= n):
            raise MeshError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face with repeated vertex")
        if len(np.unique(np.sort(f, axis=1), axis=0)) != len(f):
            raise MeshError("duplicate faces")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @classmethod
    def from_vertices(cls, vertices, faces, **metadata) -> "TriMesh":
        """Build a mesh whose rest shape is the projection of ``vertices`` on their best-fit plane."""
        vertices = np.asarray(vertices, dtype=np.float64)
        md = {"rest_uv_source": "projection", **metadata}
        return cls(vertices, faces, planar_projection(vertices), md)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.rest_uv, dict(self.metadata))


@dataclass(frozen=True)
class HingeSet:
    """Interior edges with their two adjacent faces.

    For hinge ``e``: ``edge[e] = (a, b)``; face ``faces[e, 0]`` is ``(a, b, opposite[e, 0])``
    up to rotation and ``faces[e, 1]`` is ``(b, a, opposite[e, 1])`` up to rotation.
    """

    edge: np.ndarray
    opposite: np.ndarray
    faces: np.ndarray

    def __len__(self):
        return len(self.edge)


@dataclass(frozen=True, eq=False)
class RestState:
    inv_rest_edges: np.ndarray  # (m, 2, 2)
    face_area: np.ndarray  # (m,)
    face_volume: np.ndarray  # (m,)
    dihedral_edges: HingeSet
    vertex_mass: np.ndarray  # (n,)
    vertex_area: np.ndarray  # (n,)
    faces: np.ndarray
    rest_angle: np.ndarray | None = None  # per hinge; None means flat

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_mass)

    @property
    def total_mass(self) -> float:
        return float(self.vertex_mass.sum())

    def scaled_masses(self, factor: float) -> "RestState":
        return RestState(
            self.inv_rest_edges, self.face_area, self.face_volume, self.dihedral_edges,
            _frozen(self.vertex_mass * factor, np.float64), self.vertex_area, self.faces,
            self.rest_angle,
        )


def scatter_add(index, values, n) -> np.ndarray:
    """Sum rows of ``values`` (k, 3) into an (n, 3) array at ``index``."""
    return np.stack([np.bincount(index, values[:, c], minlength=n) for c in range(3)], axis=1)


def planar_projection(points) -> np.ndarray:
    """Coordinates of ``points`` in the plane spanned by their two principal axes."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 3:
        return np.zeros((len(p), 2))
    centered = p - p.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return p @ vt[:2].T


def find_hinges(faces) -> HingeSet:
    """Interior manifold edges; edges shared by more than two faces are ignored."""
    faces = np.asarray(faces, dtype=np.int64)
    owners: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            owners.setdefault((min(u, v), max(u, v)), []).append((fi, u, w))
    edge, opp, fids = [], [], []
    for key in sorted(owners):
        entries = owners[key]
        if len(entries) != 2:
            continue
        (f0, u0, w0), (f1, _, w1) = entries
        b = key[1] if u0 == key[0] else key[0]
        edge.append((u0, b))
        opp.append((w0, w1))
        fids.append((f0, f1))
    shape = (-1, 2)
    return HingeSet(
        _frozen(np.reshape(edge, shape) if edge else np.zeros((0, 2)), np.int64),
        _frozen(np.reshape(opp, shape) if opp else np.zeros((0, 2)), np.int64),
        _frozen(np.reshape(fids, shape) if fids else np.zeros((0, 2)), np.int64),
    )


def precompute_rest_state(mesh: TriMesh, material) -> RestState:
    """Per-face inverse rest edges, areas, volumes, lumped masses and the hinge list."""
    uv = mesh.rest_uv
    f = mesh.faces
    d1 = uv[f[:, 1]] - uv[f[:, 0]]
    d2 = uv[f[:, 2]] - uv[f[:, 0]]
    dm = np.stack([d1, d2], axis=-1)  # columns are rest edges
    det = dm[:, 0, 0] * dm[:, 1, 1] - dm[:, 0, 1] * dm[:, 1, 0]
    bad = np.flatnonzero(np.abs(det) < DEGENERATE_DET)
    if bad.size:
        raise DegenerateFace(int(bad[0]))
    inv = np.empty_like(dm)
    inv[:, 0, 0] = dm[:, 1, 1] / det
    inv[:, 1, 1] = dm[:, 0, 0] / det
    inv[:, 0, 1] = -dm[:, 0, 1] / det
    inv[:, 1, 0] = -dm[:, 1, 0] / det
    area = 0.5 * np.abs(det)
    vertex_area = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(vertex_area, f[:, k], area / 3.0)
    rho_h = material.density * material.thickness
    hinges = find_hinges(f)
    rest_angle = None
    if getattr(material, "rest_angle_from_mesh", False):
        from .energy import dihedral_angles

        rest_angle = _frozen(dihedral_angles(mesh.vertices, hinges), np.float64)
    return RestState(
        inv_rest_edges=_frozen(inv, np.float64),
        face_area=_frozen(area, np.float64),
        face_volume=_frozen(area * material.thickness, np.float64),
        dihedral_edges=hinges,
        vertex_mass=_frozen(vertex_area * rho_h, np.float64),
        vertex_area=_frozen(vertex_area, np.float64),
        faces=f,
        rest_angle=rest_angle,
    )


def grid_mesh(nx: int, ny: int, width: float, height: float, origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Flat ``nx`` x ``ny`` vertex grid in the xy plane, rest shape equal to the embedding."""
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    uv = np.stack([gx.ravel(), gy.ravel()], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            # alternate diagonals to avoid a directional bias
            if (i + j) % 2 == 0:
                faces += [(a, b, d), (a, d, c)]
            else:
                faces += [(a, b, c), (b, d, c)]
    verts = np.column_stack([uv, np.zeros(len(uv))]) + np.asarray(origin, dtype=np.float64)
    return TriMesh(verts, faces, uv, {"rest_uv_source": "generated"})


# --------------------------------------------------------------------------- OBJ


def load_obj(path, uv_scale: float = 1.0) -> TriMesh:
    """Read a triangle OBJ. ``vt`` records become ``rest_uv`` (times ``uv_scale``).

    Without texture coordinates the rest shape is the best-fit planar projection
    of the vertices and ``metadata["rest_uv_source"] == "projection"``.
    """
    verts, tex, faces, face_tex = [], [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise ParseError(lineno, "vertex needs 3 coordinates")
                    verts.append([float(t) for t in rest[:3]])
                elif tag == "vt":
                    if len(rest) < 2:
                        raise ParseError(lineno, "vt needs 2 coordinates")
                    tex.append([float(rest[0]), float(rest[1])])
                elif tag == "f":
                    if len(rest) != 3:
                        raise NonTriangularFace(lineno)
                    vi, ti = [], []
                    for tok in rest:
                        parts = tok.split("/")
                        vi.append(_obj_index(parts[0], len(verts)))
                        if len(parts) > 1 and parts[1]:
                            ti.append(_obj_index(parts[1], len(tex)))
                    faces.append(vi)
                    face_tex.append(ti if len(ti) == 3 else None)
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(lineno, str(exc)) from None
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if tex and all(t is not None for t in face_tex):
        tex_arr = np.asarray(tex, dtype=np.float64) * uv_scale
        uv = np.full((len(verts), 2), np.nan)
        for vi, ti in zip(faces, face_tex):
            for a, b in zip(vi, ti):
                if np.isnan(uv[a, 0]):
                    uv[a] = tex_arr[b]
        if np.isnan(uv).any():
            # vertices not referenced by any face keep a projected position
            uv[np.isnan(uv[:, 0])] = planar_projection(verts)[np.isnan(uv[:, 0])]
        return TriMesh(verts, faces_arr, uv, {"rest_uv_source": "vt", "path": str(path)})
    mesh = TriMesh.from_vertices(verts, faces_arr, path=str(path))
    return mesh


def _obj_index(token: str, count: int) -> int:
    idx = int(token)
    if idx < 0:
        idx = count + idx
    else:
        idx -= 1
    if not 0 <= idx < count:
        raise ValueError(f"index {token} out of range")
    return idx


def save_obj(mesh: TriMesh, path, vertices=None, with_uv: bool = True) -> None:
    """Write ``mesh`` (optionally with replacement ``vertices``) as ASCII OBJ."""
    v = mesh.vertices if vertices is None else np.asarray(vertices)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in v]
    if with_uv:
        lines += [f"vt {u:.17g} {w:.17g}" for u, w in mesh.rest_uv]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (mesh.faces + 1)]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.faces + 1)]
    Path(path).write_text("\n".join(lines) + "\n")
