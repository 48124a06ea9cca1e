"""Backward-Euler cloth dynamics written as a minimisation.

One step solves ``argmin_x  |x - x_hat|^2_M / (2 dt^2) + static energy(x)`` with
``x_hat = x_t + dt v_t``; at the minimiser the gradient of that objective is
exactly the discrete Newton residual ``M (x - x_hat) / dt^2 - f(x)``.
"""
from __future__ import annotations

import logging
import warnings
import weakref
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .energy import MaterialParams, membrane_weight, static_loss
from .mesh import RestState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        x = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        v = np.array(self.velocities, dtype=np.float64).reshape(-1, 3)
        if x.shape != v.shape:
            raise ValueError("positions and velocities differ in shape")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("state must be finite")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)

    @classmethod
    def at_rest(cls, positions, dt: float = 1.0 / 30.0, time: float = 0.0) -> "SimState":
        x = np.asarray(positions, dtype=np.float64)
        return cls(x, np.zeros_like(x), time, dt)

    @property
    def predicted(self) -> np.ndarray:
        """Explicit prediction ``x + dt v``."""
        return self.positions + self.dt * self.velocities


@dataclass
class StepReport:
    iterations: int
    final_objective: float
    grad_norm: float
    converged: bool
    tolerance: float = 0.0
    inertia: float = 0.0
    energies: dict = field(default_factory=dict)


class NotConverged(RuntimeWarning):
    """Raised (or warned) when a step hits its iteration cap; carries the best iterate."""

    def __init__(self, state: SimState, report: StepReport):
        super().__init__(
            f"implicit step not converged after {report.iterations} iterations "
            f"(|grad|_inf={report.grad_norm:.3e} > {report.tolerance:.3e})"
        )
        self.state = state
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1.0 / 30.0
    max_iters: int = 200
    tol_scale: float = 1e-6  # tolerance = tol_scale * total mass * |g|
    history: int = 10
    armijo_c: float = 1e-4
    max_backtracks: int = 40


def inertia_loss(x, prev: SimState, rest: RestState):
    """``sum_i m_i |x_i - x_hat_i|^2 / (2 dt^2)`` and its gradient."""
    x = np.asarray(x, dtype=np.float64)
    diff = x - prev.predicted
    m = rest.vertex_mass
    dt2 = prev.dt**2
    loss = float(np.sum(m * np.einsum("ij,ij->i", diff, diff)) / (2.0 * dt2))
    return loss, m[:, None] * diff / dt2


def step_tolerance(rest: RestState, mat: MaterialParams, cfg: SolverConfig) -> float:
    g = float(np.linalg.norm(mat.gravity))
    # a gravity-free scene still needs a force scale
    g = g if g > 0 else 9.81
    return cfg.tol_scale * rest.total_mass * g


_PRECOND_CACHE: "weakref.WeakKeyDictionary[RestState, dict]" = weakref.WeakKeyDictionary()


class _Preconditioner:
    """Inverse of ``M / dt^2 + K`` where K is the rest-state membrane Laplacian.

    Used as the initial inverse Hessian of the quasi-Newton iteration; only
    the free vertices take part.
    """

    def __init__(self, rest: RestState, mat: MaterialParams, dt: float, free):
        n = rest.n_vertices
        grads = np.empty((len(rest.faces), 3, 2))
        grads[:, 1] = rest.inv_rest_edges[:, 0, :]
        grads[:, 2] = rest.inv_rest_edges[:, 1, :]
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        w = (mat.lambda_lame + 2.0 * mat.mu_lame) * membrane_weight(rest, mat)
        local = w[:, None, None] * np.einsum("fik,fjk->fij", grads, grads)
        rows = np.repeat(rest.faces, 3, axis=1).ravel()
        cols = np.tile(rest.faces, (1, 3)).ravel()
        K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
        P = K + sp.diags(rest.vertex_mass / dt**2)
        self.free = np.flatnonzero(free)
        self.n = n
        self.lu = splu(P[self.free][:, self.free].tocsc()) if len(self.free) else None

    def solve(self, q):
        out = np.zeros_like(q)
        if self.lu is not None:
            out[self.free] = self.lu.solve(q[self.free])
        return out


def _preconditioner(rest, mat, dt, free) -> _Preconditioner:
    per_rest = _PRECOND_CACHE.setdefault(rest, {})
    key = (mat.lambda_lame, mat.mu_lame, mat.strain_measure, dt, free.tobytes())
    if key not in per_rest:
        per_rest.clear()
        per_rest[key] = _Preconditioner(rest, mat, dt, free)
    return per_rest[key]


class _Objective:
    def __init__(self, prev, rest, body, mat, free):
        self.prev, self.rest, self.body, self.mat, self.free = prev, rest, body, mat, free
        self.evals = 0

    def __call__(self, x):
        self.evals += 1
        li, gi = inertia_loss(x, self.prev, self.rest)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = static_loss(x, self.rest, self.body, self.mat)
        g = gi + rep.gradient
        g[~self.free] = 0.0
        return li + rep.total_static, g, li, rep


def implicit_step(prev: SimState, rest: RestState, body, mat: MaterialParams,
                  cfg: SolverConfig | None = None, pinned=None, pin_targets=None,
                  x0=None, strict: bool = True):
    """Advance one backward-Euler step by minimising the incremental potential.

    ``pinned`` is an optional boolean mask or index array of fixed vertices held at
    ``pin_targets`` (default: their current positions). Returns ``(state, report)``;
    when the iteration cap is hit :class:`NotConverged` is raised if ``strict``
    and warned otherwise.
    """
    cfg = cfg or SolverConfig(dt=prev.dt)
    n = len(prev.positions)
    free = np.ones(n, dtype=bool)
    if pinned is not None:
        pinned = np.asarray(pinned)
        idx = np.flatnonzero(pinned) if pinned.dtype == bool else pinned.astype(np.int64)
        free[idx] = False
    x = prev.predicted.copy() if x0 is None else np.array(x0, dtype=np.float64)
    if not free.all():
        targets = prev.positions if pin_targets is None else np.asarray(pin_targets, dtype=np.float64)
        x[~free] = targets[~free]
    tol = step_tolerance(rest, mat, cfg)
    f = _Objective(prev, rest, body, mat, free)
    precond = _preconditioner(rest, mat, prev.dt, free)
    fx, g, li, rep = f(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    it = 0
    while np.abs(g).max(initial=0.0) > tol and it < cfg.max_iters:
        it += 1
        d = -_two_loop(g, s_hist, y_hist, precond.solve)
        slope = float(np.sum(d * g))
        if slope >= 0:  # not a descent direction: restart from the preconditioned gradient
            s_hist.clear()
            y_hist.clear()
            d = -precond.solve(g)
            slope = float(np.sum(d * g))
        alpha, accepted = 1.0, False
        for _ in range(cfg.max_backtracks):
            xn = x + alpha * d
            fn, gn, lin, repn = f(xn)
            if np.isfinite(fn) and fn <= fx + cfg.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                continue
            log.debug("line search failed at iteration %d", it)
            break
        s, y = xn - x, gn - g
        if np.sum(s * y) > 1e-16 * np.sqrt(np.sum(s * s) * np.sum(y * y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.history:
                s_hist.pop(0)
                y_hist.pop(0)
        x, fx, g, li, rep = xn, fn, gn, lin, repn
    gnorm = float(np.abs(g).max(initial=0.0))
    report = StepReport(it, float(fx), gnorm, gnorm <= tol, tol, li,
                        {**rep.as_dict(), "inertia": li})
    state = SimState(x, (x - prev.positions) / prev.dt, prev.time + prev.dt, prev.dt)
    if not report.converged:
        exc = NotConverged(state, report)
        if strict:
            raise exc
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
    return state, report


def _two_loop(g, s_hist, y_hist, h0_solve):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.sum(y * s)
        a = rho * np.sum(s * q)
        alphas.append((a, rho))
        q -= a * y
    r = h0_solve(q)
    for (s, y), (a, rho) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.sum(y * r)
        r += (a - b) * s
    return r


def simulate(initial: SimState, frames, rest: RestState, mat: MaterialParams,
             cfg: SolverConfig | None = None, model=None, pinned=None, pin_targets=None,
             callback=None):
    """Run :func:`implicit_step` once per entry of ``frames``.

    Each frame is ``None`` (no body), a posed body, or a ``(shape, BodyPose)`` pair
    posed with ``model``. Returns ``(states, reports)`` where ``states[0]`` is
    ``initial``. Non-converged steps are logged and the sequence continues.
    """
    from .body import pose_body

    cfg = cfg or SolverConfig(dt=initial.dt)
    states = [initial]
    reports = []
    state = initial
    for k, frame in enumerate(frames):
        if isinstance(frame, tuple):
            body = pose_body(model, frame[0], frame[1])
        else:
            body = frame
        try:
            state, report = implicit_step(state, rest, body, mat, cfg, pinned, pin_targets)
        except NotConverged as exc:
            log.warning("frame %d: %s", k + 1, exc)
            state, report = exc.state, exc.report
        states.append(state)
        reports.append(report)
        if callback is not None:
            callback(k + 1, state, report, body)
    return states, reports


def with_time(state: SimState, t: float) -> SimState:
    return replace(state, time=t)
