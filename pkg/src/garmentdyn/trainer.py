"""Self-supervised training of the garment regressor on physics losses.

Each training window is three consecutive motion frames. The regressor is
unrolled over them from a noisy hidden state; the loss is the static energy of
every frame plus the inertia of the last frame given the first two. Gradients
enter the network through the (linear) skinning Jacobians.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .body import BodyModel, joint_transforms, pose_body
from .energy import MaterialParams, static_loss
from .mesh import RestState, precompute_rest_state
from .neural import AdamState, Tape, adam_update, load_checkpoint, save_checkpoint
from .regressor import (RegressorModel, backprop_entry, forward_batch, init_hidden, motion_features,
                        rollout, skin_garment, skinning_jacobians)

log = logging.getLogger(__name__)

TERMS = ("strain", "bending", "gravity", "collision", "inertia")


class SequenceTooShort(ValueError):
    def __init__(self, seq_id, length: int = 0, needed: int = 3):
        super().__init__(f"sequence {seq_id!r} has {length} frames, need at least {needed}")
        self.seq_id = seq_id


class NonFiniteLoss(FloatingPointError):
    def __init__(self, window):
        super().__init__(f"non-finite loss in window {window}")
        self.window = window


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_phase1: float = 1e-3
    phase1_epochs: int = 10
    lr_phase2: float = 1e-4
    subseq_len: int = 3
    shape_range: float = 3.0
    dt: float = 1.0 / 30.0
    seed: int = 0
    max_epochs: int = 100
    max_steps: int | None = None
    time_budget: float | None = None  # seconds; a safety cap, not used for reproducible runs
    checkpoint_interval: int = 1  # epochs
    patience: int = 5
    min_improvement: float = 0.005
    threads: int = 1
    hidden_noise_sigma: float = 0.1
    val_shapes: int = 2

    def __post_init__(self):
        if self.subseq_len < 3:
            raise ValueError("subseq_len must be at least 3")
        if self.shape_range < 0:
            raise ValueError("shape_range must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    strain: float
    bending: float
    gravity: float
    collision: float
    inertia: float
    total: float
    grad_norm: float
    lr: float
    skipped: int
    wall_time: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Window:
    source: int
    start: int
    window_id: int


def make_subsequences(motions, subseq_len: int = 3) -> list[Window]:
    """All overlapping windows (stride 1) of ``subseq_len`` frames."""
    out = []
    for i, m in enumerate(motions):
        n = len(m)
        if n < subseq_len:
            raise SequenceTooShort(getattr(m, "name", i), n, subseq_len)
        for s in range(n - subseq_len + 1):
            out.append(Window(i, s, len(out)))
    return out


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr_phase1 if epoch < cfg.phase1_epochs else cfg.lr_phase2


def window_rng(seed: int, epoch: int, window_id: int):
    """Generator for the randomness of one window in one epoch (shape and hidden noise)."""
    return np.random.default_rng([seed, epoch, window_id])


def sample_shape(rng, n_shape: int, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=n_shape)


# --------------------------------------------------------------------------- physics per frame


@dataclass
class PhysicsContext:
    """Everything the loss needs besides the network."""

    body_model: BodyModel | None
    rest: RestState
    mat: MaterialParams
    garment_weights: np.ndarray
    template: np.ndarray

    def frame_terms(self, disp, shape, pose):
        """Positions, static-energy report and skinning Jacobians for one frame."""
        if self.body_model is None:
            jac = np.broadcast_to(np.eye(3), (len(self.template), 3, 3))
            x = self.template + disp
            body = None
        else:
            A, _ = joint_transforms(self.body_model, shape, pose)
            jac = skinning_jacobians(self.garment_weights, A)
            pts = self.template + disp
            x = np.einsum("nab,nb->na", jac, pts) + np.einsum("nj,ja->na", self.garment_weights, A[:, :3, 3])
            body = pose_body(self.body_model, shape, pose)
        rep = static_loss(x, self.rest, body, self.mat)
        return x, rep, jac


def inertia_from_history(x2, x1, x0, mass, dt):
    """Inertia of ``x2`` against the prediction ``2 x1 - x0`` and gradients w.r.t. all three frames."""
    diff = x2 - (2.0 * x1 - x0)
    loss = float(np.sum(mass * np.einsum("ij,ij->i", diff, diff)) / (2.0 * dt * dt))
    g2 = mass[:, None] * diff / (dt * dt)
    return loss, g2, -2.0 * g2, g2


# --------------------------------------------------------------------------- training


@dataclass
class TrainingSet:
    motions: list
    features: list  # per motion (T, 3J + 3)
    windows: list

    @classmethod
    def build(cls, motions, dt: float, subseq_len: int = 3) -> "TrainingSet":
        feats = [motion_features(m.frames, dt) for m in motions]
        return cls(list(motions), feats, make_subsequences(motions, subseq_len))


def _window_physics(ctx: PhysicsContext, data: TrainingSet, win: Window, shape, disps, dt: float):
    """Loss terms and per-frame displacement gradients of one window."""
    m = data.motions[win.source]
    n = len(disps)
    xs, jacs, grads = [], [], []
    terms = dict.fromkeys(TERMS, 0.0)
    for f in range(n):
        x, rep, jac = ctx.frame_terms(disps[f], shape, m.frames[win.start + f])
        xs.append(x)
        jacs.append(jac)
        grads.append(rep.gradient.copy())
        for k in ("strain", "bending", "gravity", "collision"):
            terms[k] += getattr(rep, k)
    li, g2, g1, g0 = inertia_from_history(xs[-1], xs[-2], xs[-3], ctx.rest.vertex_mass, dt)
    terms["inertia"] = li
    grads[-1] += g2
    grads[-2] += g1
    grads[-3] += g0
    gd = [backprop_entry(g, J) for g, J in zip(grads, jacs)]
    return terms, gd


@dataclass
class BatchGradient:
    means: dict  # term -> mean over the used windows
    grads: dict  # parameter name -> gradient of the summed mean loss
    used: int
    skipped: int

    @property
    def total(self) -> float:
        return sum(self.means[k] for k in TERMS)


def batch_gradient(model: RegressorModel, batch, data: TrainingSet, ctx: PhysicsContext, cfg: TrainConfig,
                   epoch: int, pool=None) -> BatchGradient:
    """Mean window loss over ``batch`` and its gradient w.r.t. every network parameter.

    Windows whose loss or gradient is not finite are left out of both.
    """
    B = len(batch)
    n_frames = cfg.subseq_len
    shapes, hidden0 = [], []
    for w in batch:
        rng = window_rng(cfg.seed, epoch, w.window_id)
        shapes.append(sample_shape(rng, model.n_shape, cfg.shape_range))
        hidden0.append(init_hidden(model, rng, sigma=cfg.hidden_noise_sigma))
    shapes = np.asarray(shapes)
    hidden = [np.stack([h[k] for h in hidden0]) for k in range(len(model.grus))]

    tape = Tape()
    outs = []
    for f in range(n_frames):
        feats = np.stack([data.features[w.source][w.start + f] for w in batch])
        out, hv = forward_batch(model, np.concatenate([shapes, feats], axis=1), hidden, tape)
        outs.append(out)
        hidden = hv
    scale = model.output_scale
    disps = np.stack([scale * o.value.astype(np.float64).reshape(B, -1, 3) for o in outs], axis=1)  # (B, F, V, 3)

    jobs = [(w, shapes[b], disps[b]) for b, w in enumerate(batch)]

    def run(job):
        w, s, d = job
        return _window_physics(ctx, data, w, s, d, cfg.dt)

    results = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]

    seeds = [np.zeros((B, 3 * model.n_vertices)) for _ in range(n_frames)]
    sums = dict.fromkeys(TERMS, 0.0)
    used = 0
    for b, (terms, gd) in enumerate(results):
        finite = all(math.isfinite(v) for v in terms.values()) and all(np.all(np.isfinite(g)) for g in gd)
        if not finite:
            log.warning("%s; window skipped", NonFiniteLoss(batch[b]))
            continue
        used += 1
        for k in TERMS:
            sums[k] += terms[k]
        for f in range(n_frames):
            seeds[f][b] = gd[f].reshape(-1)
    means = {k: (sums[k] / used if used else float("nan")) for k in TERMS}
    grads = {}
    if used:
        model.zero_grad()
        tape.backward([(o, s * (scale / used)) for o, s in zip(outs, seeds)])
        grads = {p.name: (p.grad if p.grad is not None else np.zeros_like(p.value)) for p in model.parameters()}
        model.zero_grad()
    return BatchGradient(means, grads, used, B - used)


def train_step(model: RegressorModel, batch, data: TrainingSet, ctx: PhysicsContext, cfg: TrainConfig,
               adam: AdamState, epoch: int, step: int, lr: float, pool=None):
    """One Adam update on a batch of windows; returns a :class:`TrainLogRecord`."""
    t0 = time.perf_counter()
    bg = batch_gradient(model, batch, data, ctx, cfg, epoch, pool)
    skipped = bg.skipped
    grad_norm = float("nan")
    if bg.used:
        params = model.param_dict()
        grad_norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in bg.grads.values())))
        if math.isfinite(grad_norm):
            backup = ({k: v.copy() for k, v in params.items()},
                      ({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.t))
            adam_update(params, bg.grads, adam, lr)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                log.warning("non-finite parameters after step %d; restored", step)
                for k, v in backup[0].items():
                    params[k][...] = v
                adam.m, adam.v, adam.t = backup[1]
                skipped = len(batch)
        else:
            log.warning("non-finite gradient at step %d; update skipped", step)
            skipped = len(batch)
    return TrainLogRecord(epoch, step, *(bg.means[k] for k in TERMS), bg.total, grad_norm, lr, skipped,
                          time.perf_counter() - t0)


# --------------------------------------------------------------------------- evaluation


def mean_curvature(verts, faces) -> np.ndarray:
    """Per-vertex discrete mean curvature from the cotangent Laplacian (0 on boundary vertices).

    Sign convention: positive where the surface bends away from its face normals
    (a sphere with outward normals has H = 1 / radius).
    """
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = len(v)
    lap = np.zeros_like(v)
    area = np.zeros(n)
    normal = np.zeros_like(v)
    tri = v[f]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fa = 0.5 * np.linalg.norm(fn, axis=1)
    for k in range(3):
        i, j, o = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        a, b = v[i] - v[o], v[j] - v[o]
        cot = np.einsum("ij,ij->i", a, b) / np.maximum(np.linalg.norm(np.cross(a, b), axis=1), 1e-300)
        e = (v[j] - v[i]) * cot[:, None]
        for c in range(3):
            lap[:, c] += np.bincount(i, e[:, c], minlength=n) - np.bincount(j, e[:, c], minlength=n)
        area += np.bincount(f[:, k], fa / 3.0, minlength=n)
        for c in range(3):
            normal[:, c] += np.bincount(f[:, k], fn[:, c], minlength=n)
    # lap_i = sum_j (cot a + cot b)(x_j - x_i) = -4 A_i H n_i for outward n
    k_vec = lap / (2.0 * np.maximum(area, 1e-300))[:, None]
    h = 0.5 * np.linalg.norm(k_vec, axis=1) * np.sign(-np.einsum("ij,ij->i", k_vec, normal))
    h[boundary_vertices(f, n)] = 0.0
    return h


def boundary_vertices(faces, n: int) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    mask = np.zeros(n, dtype=bool)
    mask[uniq[counts == 1].ravel()] = True
    return mask


def curvature_error(verts, ref_verts, faces) -> float:
    return float(np.mean(np.abs(mean_curvature(verts, faces) - mean_curvature(ref_verts, faces))))


@dataclass
class SequenceEval:
    name: str
    per_frame: dict  # term -> (T,) array; inertia is 0 for the first two frames
    positions: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return sum(self.per_frame[k] for k in TERMS)


def frame_losses(positions, shape, poses, ctx: PhysicsContext, dt: float) -> dict:
    """Physics terms of each frame of a garment trajectory."""
    T = len(positions)
    out = {k: np.zeros(T) for k in TERMS}
    for t in range(T):
        body = None if ctx.body_model is None else pose_body(ctx.body_model, shape, poses[t])
        rep = static_loss(positions[t], ctx.rest, body, ctx.mat)
        for k in ("strain", "bending", "gravity", "collision"):
            out[k][t] = getattr(rep, k)
        if t >= 2:
            out["inertia"][t] = inertia_from_history(positions[t], positions[t - 1], positions[t - 2],
                                                     ctx.rest.vertex_mass, dt)[0]
    return out


def evaluate(model: RegressorModel, motions, ctx: PhysicsContext, dt: float, shapes=None, seed: int = 0,
             zero_hidden: bool = False, references=None, skinned_only: bool = False):
    """Roll the model over each held-out motion and average the physics terms over all frames.

    ``shapes`` is a list (one per motion) of lists of shape vectors; the default is
    the mean shape. ``references`` optionally maps motion index to a (T, V, 3)
    reference trajectory for the mean-curvature error. ``skinned_only`` evaluates
    the zero-displacement garment instead of the network.
    """
    seqs = []
    curv = []
    n_shape = model.n_shape
    for i, m in enumerate(motions):
        for j, shape in enumerate(shapes[i] if shapes is not None else [np.zeros(n_shape)]):
            shape = np.asarray(shape, dtype=np.float64)
            if skinned_only:
                pos = np.stack([skin_garment(model, np.zeros((model.n_vertices, 3)), ctx.body_model, shape, p)
                                for p in m.frames])
            else:
                rng = np.random.default_rng([seed, i, j])
                h = init_hidden(model, rng, sigma=0.0 if zero_hidden else None)
                pos, _ = rollout(model, ctx.body_model, shape, m.frames, dt, hidden=h)
            seqs.append(SequenceEval(m.name, frame_losses(pos, shape, m.frames, ctx, dt), pos))
            if references is not None and i in references:
                ref = references[i]
                curv += [curvature_error(pos[t], ref[t], model.garment.faces) for t in range(len(pos))]
    n = sum(len(s.positions) for s in seqs)
    means = {k: float(sum(s.per_frame[k].sum() for s in seqs) / n) for k in TERMS}
    means["total"] = sum(means[k] for k in TERMS)
    if references is not None:
        means["curvature_error"] = float(np.mean(curv)) if curv else float("nan")
    return means, seqs


def validation_shapes(n_motions: int, n_shape: int, cfg: TrainConfig):
    """Fixed shapes for held-out evaluation: the mean shape plus ``cfg.val_shapes - 1`` random ones."""
    out = []
    for i in range(n_motions):
        rng = np.random.default_rng([cfg.seed, 10**6, i])
        s = [np.zeros(n_shape)] + [sample_shape(rng, n_shape, cfg.shape_range) for _ in range(cfg.val_shapes - 1)]
        out.append(s)
    return out


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: RegressorModel
    adam: AdamState
    records: list
    val_history: list = field(default_factory=list)
    stopped_by: str = ""
    epochs_run: int = 0


def should_stop(history, patience: int, min_improvement: float) -> bool:
    """True when the best of the last ``patience`` epochs improves on the earlier best by < min_improvement."""
    if len(history) <= patience:
        return False
    before = min(history[:-patience])
    recent = min(history[-patience:])
    return recent > before * (1.0 - min_improvement) if before > 0 else recent >= before


def train(model: RegressorModel, train_motions, val_motions, body_model: BodyModel | None, mat: MaterialParams,
          cfg: TrainConfig, out_dir=None, resume=None, adam: AdamState | None = None, log_path=None,
          callback=None) -> TrainResult:
    """Epoch loop with per-epoch validation, checkpoints and the plateau stopping rule."""
    rest = precompute_rest_state(model.garment, mat)
    ctx = PhysicsContext(body_model, rest, mat, model.garment_weights, model.garment.vertices)
    data = TrainingSet.build(train_motions, cfg.dt, cfg.subseq_len)
    adam = adam or AdamState()
    start_epoch, start_batch, step = 0, 0, 0
    val_history: list = []
    if resume is not None:
        params, adam, meta = load_checkpoint(resume)
        model.load_params(params)
        start_epoch, start_batch, step = meta["epoch"], meta["batch"], meta["step"]
        val_history = list(meta.get("val_history", []))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else (out / "train_log.csv" if out is not None else None)
    writer = None
    fh = None
    if log_path is not None:
        new = resume is None or not log_path.exists()
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(TrainLogRecord.columns())
    vshapes = validation_shapes(len(val_motions), model.n_shape, cfg) if val_motions else None
    records = []
    stopped = "max_epochs"
    t_start = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            order = np.random.default_rng([cfg.seed, epoch, 2**31 - 1]).permutation(len(data.windows))
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            lr = lr_schedule(epoch, cfg)
            for bi in range(start_batch if epoch == start_epoch else 0, len(batches)):
                batch = [data.windows[k] for k in batches[bi]]
                rec = train_step(model, batch, data, ctx, cfg, adam, epoch, step, lr, pool)
                step += 1
                records.append(rec)
                if writer is not None:
                    writer.writerow([_fmt(v) for v in asdict(rec).values()])
                if callback is not None:
                    callback(rec)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stopped = "max_steps"
                    _checkpoint(out, model, adam, epoch, bi + 1, step, val_history, cfg)
                    return TrainResult(model, adam, records, val_history, stopped, epoch + 1)
                if cfg.time_budget is not None and time.perf_counter() - t_start > cfg.time_budget:
                    stopped = "time_budget"
                    _checkpoint(out, model, adam, epoch, bi + 1, step, val_history, cfg)
                    return TrainResult(model, adam, records, val_history, stopped, epoch + 1)
            if val_motions:
                means, _ = evaluate(model, val_motions, ctx, cfg.dt, vshapes, seed=cfg.seed)
                val_history.append(means["total"])
                log.info("epoch %d: validation total %.6g", epoch, means["total"])
            if (epoch + 1) % cfg.checkpoint_interval == 0:
                _checkpoint(out, model, adam, epoch + 1, 0, step, val_history, cfg)
            if val_history and should_stop(val_history, cfg.patience, cfg.min_improvement):
                stopped = "plateau"
                return TrainResult(model, adam, records, val_history, stopped, epoch + 1)
        return TrainResult(model, adam, records, val_history, stopped, cfg.max_epochs)
    finally:
        if fh is not None:
            fh.close()
        if pool is not None:
            pool.shutdown()


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _checkpoint(out, model, adam, epoch, batch, step, val_history, cfg):
    if out is None:
        return
    meta = {"epoch": epoch, "batch": batch, "step": step, "val_history": val_history, "seed": cfg.seed,
            "rng": {"kind": "derived", "key": [cfg.seed]}}
    save_checkpoint(out / "checkpoint.snugckpt", model.param_dict(), adam, meta)
