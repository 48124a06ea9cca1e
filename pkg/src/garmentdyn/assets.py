"""Procedural assets: a capsule-built humanoid, a shoulder cape, drape test scenes,
and reference shapes (cube, icosphere)."""
from __future__ import annotations

import numpy as np

from .body import BodyModel, PosedBody
from .mesh import TriMesh, grid_mesh

JOINT_NAMES = (
    "pelvis", "spine", "chest", "neck",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
JOINT_INDEX = {n: i for i, n in enumerate(JOINT_NAMES)}

# rest-pose layout, meters (x: left, y: forward, z: up)
TORSO_BOTTOM, TORSO_TOP, TORSO_RADIUS = 0.92, 1.42, 0.14
HEAD_BOTTOM, HEAD_TOP, HEAD_RADIUS = 1.62, 1.70, 0.09


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return axis, u, np.cross(axis, u)


def capsule(p0, p1, radius, n_seg=12, n_body=6, n_cap=3):
    """Closed capsule mesh around segment p0-p1.

    Returns vertices, faces, per-vertex axial parameter t (0 at p0, 1 at p1,
    outside [0, 1] on the caps), radial unit directions and the index arrays
    of the rings at t=0 and t=1.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    L = np.linalg.norm(p1 - p0)
    axis, u, w = _frame(p1 - p0)
    rings = []  # (axial offset from p0, ring radius, radial z-component for direction)
    for i in range(1, n_cap + 1):
        a = -np.pi / 2 + i * (np.pi / 2) / (n_cap + 1)
        rings.append((radius * np.sin(a), radius * np.cos(a), np.sin(a)))
    body_start = len(rings)
    for i in range(n_body + 1):
        rings.append((L * i / n_body, radius, 0.0))
    body_end = len(rings) - 1
    for i in range(1, n_cap + 1):
        a = i * (np.pi / 2) / (n_cap + 1)
        rings.append((L + radius * np.sin(a), radius * np.cos(a), np.sin(a)))
    phis = 2 * np.pi * np.arange(n_seg) / n_seg
    verts, tpar, radial = [p0 - radius * axis], [-radius / L], [-axis]
    for off, r, sz in rings:
        for phi in phis:
            d = np.cos(phi) * u + np.sin(phi) * w
            verts.append(p0 + off * axis + r * d)
            tpar.append(off / L)
            radial.append(sz * axis + np.sqrt(max(0.0, 1 - sz * sz)) * d)
    verts.append(p1 + radius * axis)
    tpar.append(1 + radius / L)
    radial.append(axis)
    nr = len(rings)
    top = len(verts) - 1
    faces = []
    for j in range(n_seg):
        k = (j + 1) % n_seg
        faces.append((0, 1 + k, 1 + j))
    for i in range(nr - 1):
        a0 = 1 + i * n_seg
        b0 = a0 + n_seg
        for j in range(n_seg):
            k = (j + 1) % n_seg
            faces.append((a0 + j, a0 + k, b0 + k))
            faces.append((a0 + j, b0 + k, b0 + j))
    last = 1 + (nr - 1) * n_seg
    for j in range(n_seg):
        k = (j + 1) % n_seg
        faces.append((last + j, last + k, top))
    ring0 = 1 + body_start * n_seg + np.arange(n_seg)
    ring1 = 1 + body_end * n_seg + np.arange(n_seg)
    return (np.asarray(verts), np.asarray(faces, dtype=np.int64), np.asarray(tpar),
            np.asarray(radial), ring0, ring1)


def _hat_weights(z, knots):
    """Piecewise-linear partition of unity over sorted ``knots``."""
    z = np.clip(z, knots[0], knots[-1])
    w = np.zeros((len(z), len(knots)))
    for i in range(len(knots) - 1):
        m = (z >= knots[i]) & (z <= knots[i + 1])
        t = (z[m] - knots[i]) / (knots[i + 1] - knots[i])
        w[m, i] = 1 - t
        w[m, i + 1] = t
    return w / w.sum(axis=1, keepdims=True)


def toy_humanoid(n_seg: int = 16) -> BodyModel:
    """Capsule-sculpted humanoid: 16 joints, 4 shape coefficients.

    Shape coefficients: 0 height, 1 girth, 2 torso width, 3 arm length.
    Arms rest in an A-pose.
    """
    J = {
        "pelvis": (0.0, 0.0, 0.95), "spine": (0.0, 0.0, 1.10), "chest": (0.0, 0.0, 1.28),
        "neck": (0.0, 0.0, HEAD_BOTTOM),
        "l_shoulder": (0.19, 0.0, 1.38), "l_elbow": (0.36, 0.0, 1.13), "l_wrist": (0.50, 0.0, 0.90),
        "r_shoulder": (-0.19, 0.0, 1.38), "r_elbow": (-0.36, 0.0, 1.13), "r_wrist": (-0.50, 0.0, 0.90),
        "l_hip": (0.09, 0.0, 0.88), "l_knee": (0.10, 0.0, 0.50), "l_ankle": (0.10, 0.0, 0.10),
        "r_hip": (-0.09, 0.0, 0.88), "r_knee": (-0.10, 0.0, 0.50), "r_ankle": (-0.10, 0.0, 0.10),
    }
    J = {k: np.asarray(v) for k, v in J.items()}
    nj = len(JOINT_NAMES)
    verts, faces, weights, sdirs, regress = [], [], [], [], {}
    offset = 0

    def add(v, f, w, sd):
        nonlocal offset
        verts.append(v)
        faces.append(f + offset)
        weights.append(w)
        sdirs.append(sd)
        offset += len(v)
        return offset - len(v)

    # torso
    v, f, t, radial, r0, r1 = capsule((0, 0, TORSO_BOTTOM), (0, 0, TORSO_TOP), TORSO_RADIUS,
                                      n_seg=n_seg + 8, n_body=10, n_cap=4)
    w = np.zeros((len(v), nj))
    hw = _hat_weights(v[:, 2], [0.95, 1.10, 1.28])
    w[:, [0, 1, 2]] = hw
    sd = np.zeros((len(v), 3, 4))
    sd[:, 2, 0] = 0.02 * v[:, 2]
    sd[:, :, 1] = 0.01 * radial
    sd[:, 0, 2] = 0.012 * radial[:, 0]
    base = add(v, f, w, sd)
    zs = v[:, 2]
    for name in ("pelvis", "spine", "chest"):
        # torso ring closest to the joint height
        ring_z = np.unique(np.round(zs[(zs > TORSO_BOTTOM - 1e-9) & (zs < TORSO_TOP + 1e-9)], 9))
        zr = ring_z[np.argmin(np.abs(ring_z - J[name][2]))]
        regress[name] = base + np.flatnonzero(np.isclose(zs, zr) & (t >= 0) & (t <= 1))

    # head
    v, f, t, radial, r0, r1 = capsule((0, 0, HEAD_BOTTOM), (0, 0, HEAD_TOP), HEAD_RADIUS,
                                      n_seg=n_seg, n_body=2, n_cap=4)
    w = np.zeros((len(v), nj))
    w[:, JOINT_INDEX["neck"]] = 1.0
    sd = np.zeros((len(v), 3, 4))
    sd[:, 2, 0] = 0.02 * v[:, 2]
    base = add(v, f, w, sd)
    regress["neck"] = base + r0

    def limb(j0, j1, j_parent, radius, side, arm, chain_prev=None):
        p0, p1 = J[j0], J[j1]
        v, f, t, radial, r0, r1 = capsule(p0, p1, radius, n_seg=n_seg - 4, n_body=6, n_cap=3)
        w = np.zeros((len(v), nj))
        a, b, c = JOINT_INDEX[j0], JOINT_INDEX[j1], JOINT_INDEX[j_parent]
        tt = np.clip(t, 0, 1)
        # blend with the parent near the proximal end and the child near the distal end
        wp = np.clip(0.5 - tt / 0.4, 0, 0.5)
        wc = np.clip((tt - 0.8) / 0.4, 0, 0.5)
        w[:, a] = 1 - wp - wc
        w[:, c] += wp
        w[:, b] += wc
        sd = np.zeros((len(v), 3, 4))
        sd[:, 2, 0] = 0.02 * v[:, 2]
        sd[:, :, 1] = 0.01 * radial
        if arm:
            sd[:, 0, 2] = 0.012 * side
            axis = (p1 - p0) / np.linalg.norm(p1 - p0)
            L = np.linalg.norm(p1 - p0)
            sd[:, :, 3] = 0.03 * L * tt[:, None] * axis
            if chain_prev is not None:
                sd[:, :, 3] += chain_prev
        base = add(v, f, w, sd)
        return base, r0, r1, (0.03 * np.linalg.norm(p1 - p0) * (p1 - p0) / np.linalg.norm(p1 - p0))

    for side, s in (("l", 1.0), ("r", -1.0)):
        b, r0, _, ext = limb(f"{side}_shoulder", f"{side}_elbow", "chest", 0.05, s, True)
        regress[f"{side}_shoulder"] = b + r0
        b, r0, r1, _ = limb(f"{side}_elbow", f"{side}_wrist", f"{side}_shoulder", 0.04, s, True, ext)
        regress[f"{side}_elbow"] = b + r0
        regress[f"{side}_wrist"] = b + r1
        b, r0, _, _ = limb(f"{side}_hip", f"{side}_knee", "pelvis", 0.075, s, False)
        regress[f"{side}_hip"] = b + r0
        b, r0, r1, _ = limb(f"{side}_knee", f"{side}_ankle", f"{side}_hip", 0.055, s, False)
        regress[f"{side}_knee"] = b + r0
        regress[f"{side}_ankle"] = b + r1

    V = np.concatenate(verts)
    F = np.concatenate(faces)
    W = np.concatenate(weights)
    SD = np.concatenate(sdirs)
    JR = np.zeros((nj, len(V)))
    for name, ids in regress.items():
        JR[JOINT_INDEX[name], ids] = 1.0 / len(ids)
    return BodyModel(V, F, SD, JR, np.asarray(PARENTS), W, JOINT_NAMES)


def cape(n_around: int = 28, n_rings: int = 12, coverage_deg: float = 320.0,
         top=(0.115, 1.52), bottom=(0.36, 1.34)) -> TriMesh:
    """Open cone sector resting on the shoulders, gap at the front.

    ``top`` and ``bottom`` are (radius, height) of the two boundary rings. The
    rest shape is the exact unrolling of the cone, so the template is unstrained.
    """
    r_top, z_top = top
    r_bot, z_bot = bottom
    slant = np.hypot(r_bot - r_top, z_top - z_bot)
    sin_half = (r_bot - r_top) / slant
    apex_dist = r_top / sin_half  # slant distance from apex to the top ring
    cov = np.radians(coverage_deg)
    # gap centred on +y (front)
    phis = np.pi / 2 + (np.pi - cov / 2) + cov * np.arange(n_around) / (n_around - 1)
    verts, uv = [], []
    for i in range(n_rings):
        s = i / (n_rings - 1)
        r = r_top + s * (r_bot - r_top)
        z = z_top + s * (z_bot - z_top)
        rho = apex_dist + s * slant
        for j, phi in enumerate(phis):
            verts.append((r * np.cos(phi), r * np.sin(phi), z))
            psi = (phi - phis[0]) * sin_half
            uv.append((rho * np.cos(psi), rho * np.sin(psi)))
    faces = []
    for i in range(n_rings - 1):
        for j in range(n_around - 1):
            a = i * n_around + j
            b, c, d = a + 1, a + n_around, a + n_around + 1
            if (i + j) % 2:
                faces += [(a, c, d), (a, d, b)]
            else:
                faces += [(a, c, b), (b, c, d)]
    return TriMesh(np.asarray(verts), faces, np.asarray(uv), {"rest_uv_source": "generated", "name": "cape"})


def capsule_body(p0, p1, radius, n_seg=32, n_body=16, n_cap=8) -> PosedBody:
    """Static capsule obstacle."""
    v, f, *_ = capsule(p0, p1, radius, n_seg=n_seg, n_body=n_body, n_cap=n_cap)
    return PosedBody.from_mesh(v, f)


def unit_cube_body() -> PosedBody:
    v = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    # outward-oriented triangles of the unit cube
    f = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    return PosedBody.from_mesh(v, f)


def icosphere(subdivisions: int = 4, radius: float = 1.0):
    """Icosphere vertices and faces (2562 vertices at 4 subdivisions)."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return radius * np.asarray(verts), np.asarray(faces, dtype=np.int64)


def drape_scene(n: int = 20, size: float = 0.5, height: float = 0.13, radius: float = 0.1):
    """Square cloth patch pinned at its four corners above a horizontal capsule.

    Returns ``(mesh, body, pinned_indices)``.
    """
    mesh = grid_mesh(n, n, size, size, origin=(-size / 2, -size / 2, height))
    body = capsule_body((-0.4, 0.0, 0.0), (0.4, 0.0, 0.0), radius)
    pins = np.array([0, n - 1, n * (n - 1), n * n - 1])
    return mesh, body, pins
