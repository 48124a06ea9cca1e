"""Static cloth energies (membrane strain, bending, gravity, body collision) with gradients.

Every term returns ``(energy, gradient)`` where ``gradient`` has the shape of the
(n, 3) position array.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .mesh import HingeSet, RestState, scatter_add

HINGE_EPS = 1e-12


class DegenerateHinge(UserWarning):
    pass


@dataclass(frozen=True)
class MaterialParams:
    """Cloth material. Defaults describe a 100% cotton fabric."""

    lambda_lame: float = 20.9
    mu_lame: float = 11.1
    k_bending: float = 3.96e-5
    k_collision: float = 250.0
    collision_margin_eps: float = 2e-3
    density: float = 426.0
    thickness: float = 0.47e-3
    gravity: tuple = (0.0, 0.0, -9.81)
    rest_angle_from_mesh: bool = False
    # "area": Lame constants are thickness-integrated (N/m) and weight rest area;
    # "volume": they weight area * thickness
    strain_measure: str = "area"

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if min(self.lambda_lame, self.mu_lame, self.k_bending, self.k_collision) < 0:
            raise ValueError("stiffness parameters must be non-negative")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        if self.collision_margin_eps <= 0:
            raise ValueError("collision margin must be positive")
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if self.strain_measure not in ("area", "volume"):
            raise ValueError("strain_measure must be 'area' or 'volume'")

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown material keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "MaterialParams":
        return MaterialParams(**{**self.__dict__, **kw})


@dataclass
class EnergyReport:
    strain: float
    bending: float
    gravity: float
    collision: float
    gradient: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def total_static(self) -> float:
        return self.strain + self.bending + self.gravity + self.collision

    def as_dict(self) -> dict:
        return {"strain": self.strain, "bending": self.bending, "gravity": self.gravity,
                "collision": self.collision, "total_static": self.total_static}


# ---------------------------------------------------------------- membrane


def deformation_gradient(x, rest: RestState) -> np.ndarray:
    """Per-face 3x2 map from rest (uv) to deformed coordinates."""
    f = rest.faces
    ds = np.stack([x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]]], axis=-1)
    return ds @ rest.inv_rest_edges


def green_strain(F) -> np.ndarray:
    return 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(2))


def stvk_density(G, lam, mu):
    tr = G[..., 0, 0] + G[..., 1, 1]
    return 0.5 * lam * tr**2 + mu * np.einsum("...ij,...ij->...", G, G)


def membrane_weight(rest: RestState, mat: MaterialParams) -> np.ndarray:
    return rest.face_area if mat.strain_measure == "area" else rest.face_volume


def strain_energy(x, rest: RestState, mat: MaterialParams):
    x = np.asarray(x, dtype=np.float64)
    F = deformation_gradient(x, rest)
    G = green_strain(F)
    lam, mu = mat.lambda_lame, mat.mu_lame
    V = membrane_weight(rest, mat)
    energy = float(np.sum(V * stvk_density(G, lam, mu)))
    tr = G[:, 0, 0] + G[:, 1, 1]
    S = 2.0 * mu * G
    S[:, 0, 0] += lam * tr
    S[:, 1, 1] += lam * tr
    # dE/dDs = V * F S Dm^-T
    H = V[:, None, None] * (F @ S @ np.swapaxes(rest.inv_rest_edges, 1, 2))
    f = rest.faces
    idx = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    vals = np.concatenate([H[:, :, 0], H[:, :, 1], -H[:, :, 0] - H[:, :, 1]])
    return energy, scatter_add(idx, vals, len(x))


# ---------------------------------------------------------------- bending


def _hinge_geometry(x, hinges: HingeSet):
    a = x[hinges.edge[:, 0]]
    b = x[hinges.edge[:, 1]]
    c = x[hinges.opposite[:, 0]]
    d = x[hinges.opposite[:, 1]]
    e = b - a
    n0 = np.cross(c - a, c - b)  # normal of (a, b, c)
    n1 = np.cross(d - b, d - a)  # normal of (b, a, d)
    return a, b, c, d, e, n0, n1


def dihedral_angles(x, hinges: HingeSet) -> np.ndarray:
    """Signed deviation from flat of every hinge, in (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    _, _, _, _, e, n0, n1 = _hinge_geometry(x, hinges)
    elen = np.linalg.norm(e, axis=1)
    l0 = np.linalg.norm(n0, axis=1)
    l1 = np.linalg.norm(n1, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sin = np.einsum("ij,ij->i", np.cross(n0, n1), e) / (l0 * l1 * elen)
        cos = np.einsum("ij,ij->i", n0, n1) / (l0 * l1)
    return np.arctan2(sin, cos)


def bending_energy(x, rest: RestState, mat: MaterialParams, return_skipped: bool = False):
    """Sum over interior edges of ``k/2 * (theta - theta_rest)^2``.

    Hinges whose faces have (near) zero area are skipped; with
    ``return_skipped`` their ids come back as a third value.
    """
    x = np.asarray(x, dtype=np.float64)
    hinges = rest.dihedral_edges
    grad = np.zeros_like(x)
    if len(hinges) == 0:
        return (0.0, grad, []) if return_skipped else (0.0, grad)
    a, b, c, d, e, n0, n1 = _hinge_geometry(x, hinges)
    elen = np.linalg.norm(e, axis=1)
    l0sq = np.einsum("ij,ij->i", n0, n0)
    l1sq = np.einsum("ij,ij->i", n1, n1)
    bad = (np.sqrt(l0sq) < HINGE_EPS) | (np.sqrt(l1sq) < HINGE_EPS) | (elen < HINGE_EPS)
    skipped = np.flatnonzero(bad).tolist()
    ok = ~bad
    theta = np.zeros(len(hinges))
    theta[ok] = dihedral_angles(x, hinges)[ok]
    if rest.rest_angle is not None:
        delta = np.where(ok, theta - rest.rest_angle, 0.0)
        delta = (delta + np.pi) % (2 * np.pi) - np.pi
    else:
        delta = theta
    energy = float(0.5 * mat.k_bending * np.sum(delta[ok] ** 2))

    # dtheta/dx for the four stencil vertices
    ok_idx = np.flatnonzero(ok)
    e_ok, el = e[ok], elen[ok]
    u0 = n0[ok] / l0sq[ok, None]
    u1 = n1[ok] / l1sq[ok, None]
    ehat = e_ok / el[:, None]
    dc = -el[:, None] * u0
    dd = -el[:, None] * u1
    ta = np.einsum("ij,ij->i", c[ok] - b[ok], ehat)
    tb = np.einsum("ij,ij->i", c[ok] - a[ok], ehat)
    sa = np.einsum("ij,ij->i", d[ok] - b[ok], ehat)
    sb = np.einsum("ij,ij->i", d[ok] - a[ok], ehat)
    da = -ta[:, None] * u0 - sa[:, None] * u1
    db = tb[:, None] * u0 + sb[:, None] * u1
    coef = (mat.k_bending * delta[ok])[:, None]
    idx = np.concatenate([hinges.edge[ok_idx, 0], hinges.edge[ok_idx, 1],
                          hinges.opposite[ok_idx, 0], hinges.opposite[ok_idx, 1]])
    grad = scatter_add(idx, np.tile(coef, (4, 1)) * np.concatenate([da, db, dc, dd]), len(x))
    return (energy, grad, skipped) if return_skipped else (energy, grad)


# ---------------------------------------------------------------- gravity


def gravity_energy(x, rest: RestState, mat: MaterialParams):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(mat.gravity)
    m = rest.vertex_mass
    energy = float(-np.sum(m * (x @ g)))
    grad = -m[:, None] * g[None, :]
    return energy, np.broadcast_to(grad, x.shape).copy()


# ---------------------------------------------------------------- collision


def collision_energy(x, body, mat: MaterialParams, query=None):
    """Cubic penalty ``k * max(eps - d, 0)^3`` per vertex against ``body``.

    ``query`` may carry a precomputed ``(distance, closest, normal)`` triple
    for ``x``; the gradient treats the closest point as fixed.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    if body is None:
        return 0.0, grad
    dist, closest, normal = body.signed_distance(x) if query is None else query
    pen = np.maximum(mat.collision_margin_eps - dist, 0.0)
    energy = float(mat.k_collision * np.sum(pen**3))
    active = pen > 0
    if np.any(active):
        grad[active] = (-3.0 * mat.k_collision * pen[active] ** 2)[:, None] * distance_gradient(
            x[active], dist[active], closest[active], normal[active]
        )
    return energy, grad


def distance_gradient(x, dist, closest, normal):
    """Unit direction of increasing signed distance, the closest point held fixed."""
    off = x - closest
    r = np.linalg.norm(off, axis=1)
    sign = np.where(dist < 0, -1.0, 1.0)
    out = normal.copy()
    far = r > 1e-12
    out[far] = sign[far, None] * off[far] / r[far, None]
    return out


# ---------------------------------------------------------------- total


def static_loss(x, rest: RestState, body, mat: MaterialParams, query=None) -> EnergyReport:
    """Sum of the four static terms and of their gradients."""
    x = np.asarray(x, dtype=np.float64)
    es, gs = strain_energy(x, rest, mat)
    eb, gb, skipped = bending_energy(x, rest, mat, return_skipped=True)
    eg, gg = gravity_energy(x, rest, mat)
    ec, gc = collision_energy(x, body, mat, query=query)
    report = EnergyReport(es, eb, eg, ec, gs + gb + gg + gc)
    if skipped:
        msg = f"skipped {len(skipped)} degenerate hinge(s): {skipped[:10]}"
        report.warnings.append(msg)
        warnings.warn(msg, DegenerateHinge, stacklevel=2)
    return report
