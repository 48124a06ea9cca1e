"""Central finite-difference checks of every analytic energy gradient.

Each suite draws randomized configurations, compares the analytic gradient
against central differences over all coordinates, and reports the worst
norm-wise relative error ``|g - g_fd| / max(|g_fd|, |g|, floor)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import icosphere
from .body import PosedBody
from .dynamics import SimState, inertia_loss
from .energy import (MaterialParams, bending_energy, collision_energy, dihedral_angles, gravity_energy,
                     strain_energy)
from .mesh import grid_mesh, precompute_rest_state

TERMS = ("strain", "bending", "gravity", "collision", "inertia")


@dataclass
class TermResult:
    term: str
    configs: int
    max_rel_error: float
    excluded: int = 0

    def passed(self, tol: float) -> bool:
        return self.configs > 0 and self.max_rel_error <= tol


def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(g, g_fd, floor: float = 1e-12) -> float:
    den = max(np.linalg.norm(g_fd), np.linalg.norm(g), floor)
    return float(np.linalg.norm(np.asarray(g) - g_fd) / den)


class _Scenes:
    """Shared fixtures for the suites (built lazily)."""

    def __init__(self, mat: MaterialParams):
        self.mat = mat
        self.mesh = grid_mesh(3, 3, 0.2, 0.2)
        self.rest = precompute_rest_state(self.mesh, mat)
        v, f = icosphere(3, 0.3)
        self.sphere = PosedBody.from_mesh(v, f)


def _strain(scenes, rng, funcs):
    x = scenes.mesh.vertices + rng.normal(0, 0.02, scenes.mesh.vertices.shape)
    fn = funcs["strain"]
    return x, (lambda y: fn(y, scenes.rest, scenes.mat)), True


def _bending(scenes, rng, funcs):
    x = scenes.mesh.vertices + rng.normal(0, 0.03, scenes.mesh.vertices.shape)
    theta = dihedral_angles(x, scenes.rest.dihedral_edges)
    # atan2 branch cut at +-pi and collapsed triangles are singular
    tri = x[scenes.mesh.faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    ok = np.all(np.abs(theta) < np.pi - 0.1) and area2.min() > 1e-4
    fn = funcs["bending"]
    return x, (lambda y: fn(y, scenes.rest, scenes.mat)), ok


def _gravity(scenes, rng, funcs):
    x = scenes.mesh.vertices + rng.normal(0, 0.05, scenes.mesh.vertices.shape)
    fn = funcs["gravity"]
    return x, (lambda y: fn(y, scenes.rest, scenes.mat)), True


def _collision(scenes, rng, funcs):
    eps = scenes.mat.collision_margin_eps
    n = 12
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = 0.3 + rng.uniform(-1.5 * eps, 1.5 * eps, size=n)
    x = dirs * r[:, None]
    d, _, _ = scenes.sphere.signed_distance(x)
    # the distance is not differentiable on the surface itself
    ok = np.all(np.abs(d) > 1e-4)
    fn = funcs["collision"]
    return x, (lambda y: fn(y, scenes.sphere, scenes.mat)), ok


def _inertia(scenes, rng, funcs):
    nv = scenes.mesh.n_vertices
    prev = SimState(scenes.mesh.vertices + rng.normal(0, 0.01, (nv, 3)), rng.normal(0, 0.5, (nv, 3)))
    x = prev.predicted + rng.normal(0, 0.01, (nv, 3))
    fn = funcs["inertia"]
    return x, (lambda y: fn(y, prev, scenes.rest)), True


_BUILDERS = {"strain": _strain, "bending": _bending, "gravity": _gravity, "collision": _collision,
             "inertia": _inertia}

DEFAULT_FUNCTIONS = {"strain": strain_energy, "bending": bending_energy, "gravity": gravity_energy,
                     "collision": collision_energy, "inertia": inertia_loss}


def check_term(term: str, n_configs: int = 50, seed: int = 0, h: float = 1e-6, mat=None,
               functions=None, scenes=None, max_draws: int = 10) -> TermResult:
    """Worst relative error of ``term`` over ``n_configs`` non-singular random configurations."""
    mat = mat or MaterialParams()
    funcs = dict(DEFAULT_FUNCTIONS, **(functions or {}))
    scenes = scenes or _Scenes(mat)
    rng = np.random.default_rng([seed, TERMS.index(term)])
    worst, done, excluded = 0.0, 0, 0
    while done < n_configs and excluded < max_draws * n_configs:
        x, f, ok = _BUILDERS[term](scenes, rng, funcs)
        if not ok:
            excluded += 1
            continue
        _, g = f(x)
        g_fd = central_difference(lambda y: f(y)[0], x, h)
        worst = max(worst, relative_error(g, g_fd))
        done += 1
    return TermResult(term, done, worst, excluded)


def run_gradcheck(n_configs: int = 50, seed: int = 0, h: float = 1e-6, mat=None, functions=None,
                  terms=TERMS) -> list[TermResult]:
    mat = mat or MaterialParams()
    scenes = _Scenes(mat)
    return [check_term(t, n_configs, seed, h, mat, functions, scenes) for t in terms]


def format_report(results, tol: float) -> str:
    lines = [f"{'term':<10} {'configs':>7} {'excluded':>8} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.term:<10} {r.configs:>7d} {r.excluded:>8d} {r.max_rel_error:>12.3e}  "
                     f"{'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
