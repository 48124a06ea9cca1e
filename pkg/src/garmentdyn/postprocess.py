"""Collision clean-up: push garment vertices that sit inside the margin back out."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import distance_gradient


@dataclass
class PushOutReport:
    moved: int
    passes: int
    residual: int  # vertices still closer than the margin (minus tolerance)
    min_distance: float


def push_out(x, body, eps: float, passes: int = 3, tol: float = 1e-6):
    """Move every vertex with signed distance below ``eps`` to ``closest + eps * n``.

    ``n`` is the unit direction of increasing distance at the closest point. Up to
    ``passes`` sweeps are made; returns ``(positions, PushOutReport)``.
    """
    x = np.array(x, dtype=np.float64).reshape(-1, 3)
    moved = np.zeros(len(x), dtype=bool)
    done = 0
    d, q, n = body.signed_distance(x)
    for done in range(1, passes + 1):
        bad = d < eps - tol
        if not np.any(bad):
            done -= 1
            break
        direction = distance_gradient(x[bad], d[bad], q[bad], n[bad])
        x[bad] = q[bad] + eps * direction
        moved |= bad
        d, q, n = body.signed_distance(x)
    residual = int(np.count_nonzero(d < eps - tol))
    return x, PushOutReport(int(moved.sum()), done, residual, float(d.min()) if len(d) else float("inf"))


def push_out_sequence(frames, bodies, eps: float, passes: int = 3, tol: float = 1e-6):
    """Apply :func:`push_out` frame by frame; frame and body counts must match."""
    if len(frames) != len(bodies):
        raise ValueError(f"{len(frames)} garment frames but {len(bodies)} body frames")
    out, reports = [], []
    for x, body in zip(frames, bodies):
        y, rep = push_out(x, body, eps, passes, tol)
        out.append(y)
        reports.append(rep)
    return out, reports
