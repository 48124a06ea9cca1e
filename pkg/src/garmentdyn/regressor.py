"""Recurrent garment regressor: (shape, pose, root velocity) -> per-vertex displacements.

The garment in world space is the skinned template-plus-displacement,
``x_i = sum_j W[i, j] * A_j (T_i + d_i)``, with the body's rest-relative joint
transforms ``A_j``.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, BodyPose, joint_transforms, rodrigues, skin_points
from .mesh import TriMesh, load_obj, save_obj
from .neural import (AdamState, DenseLayer, DimMismatch, GruCell, Tape, Var, load_checkpoint,
                     save_checkpoint)

CHECKPOINT_NAME = "model.snugckpt"


@dataclass(frozen=True)
class MotionDescriptor:
    shape: np.ndarray
    pose: np.ndarray  # flattened joint axis-angles
    root_velocity: np.ndarray  # in the root frame, m/s

    def __post_init__(self):
        for name in ("shape", "pose", "root_velocity"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"descriptor {name} must be finite")
            object.__setattr__(self, name, a)
        if len(self.root_velocity) != 3:
            raise DimMismatch("root_velocity must have 3 components")

    def features(self) -> np.ndarray:
        return np.concatenate([self.shape, self.pose, self.root_velocity])


def root_velocities(poses, dt: float) -> np.ndarray:
    """Finite-difference root velocity of each frame expressed in the root frame; zero at frame 0."""
    trans = np.stack([p.root_translation for p in poses])
    vel = np.zeros_like(trans)
    vel[1:] = (trans[1:] - trans[:-1]) / dt
    R = rodrigues(np.stack([p.joint_rotations[0] for p in poses]))
    return np.einsum("tba,tb->ta", R, vel)  # R^T v


def motion_features(poses, dt: float) -> np.ndarray:
    """Per-frame pose + root-velocity features (shape excluded), shape (T, 3J + 3)."""
    pose = np.stack([p.joint_rotations.reshape(-1) for p in poses])
    return np.concatenate([pose, root_velocities(poses, dt)], axis=1)


def describe(shape, poses, dt: float) -> list[MotionDescriptor]:
    feats = motion_features(poses, dt)
    nj3 = 3 * poses[0].n_joints
    return [MotionDescriptor(shape, f[:nj3], f[nj3:]) for f in feats]


@dataclass
class RegressorModel:
    grus: list
    output_layer: DenseLayer
    garment: TriMesh
    garment_weights: np.ndarray  # (V, J) skinning weights of the garment
    n_shape: int
    n_joints: int
    hidden_noise_sigma: float = 0.1
    output_scale: float = 1.0  # meters per unit of network output
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, garment: TriMesh, garment_weights, n_shape: int, n_joints: int, rng=None,
               hidden_size: int = 256, n_layers: int = 4, hidden_noise_sigma: float = 0.1,
               output_scale: float = 1.0, dtype=np.float32, zero: bool = False) -> "RegressorModel":
        rng = np.random.default_rng(0) if rng is None else rng
        n_in = n_shape + 3 * n_joints + 3
        grus = []
        for k in range(n_layers):
            grus.append(GruCell.create(rng, n_in if k == 0 else hidden_size, hidden_size, dtype,
                                       prefix=f"gru{k}", zero=zero))
        out = DenseLayer.create(rng, hidden_size, 3 * garment.n_vertices, "identity", dtype, zero=zero,
                                prefix="output")
        w = np.asarray(garment_weights, dtype=np.float64)
        if w.shape != (garment.n_vertices, n_joints):
            raise DimMismatch(f"garment weights must be ({garment.n_vertices}, {n_joints}), got {w.shape}")
        cfg = {"hidden_size": hidden_size, "n_layers": n_layers, "dtype": np.dtype(dtype).name}
        return cls(grus, out, garment, w, n_shape, n_joints, hidden_noise_sigma, output_scale, cfg)

    @property
    def n_inputs(self) -> int:
        return self.n_shape + 3 * self.n_joints + 3

    @property
    def hidden_size(self) -> int:
        return self.grus[0].hidden_size

    @property
    def n_vertices(self) -> int:
        return self.garment.n_vertices

    @property
    def dtype(self):
        return self.output_layer.weight.value.dtype

    def parameters(self) -> list[Var]:
        out = []
        for g in self.grus:
            out += g.parameters()
        return out + self.output_layer.parameters()

    def param_dict(self) -> dict:
        return {p.name: p.value for p in self.parameters()}

    def load_params(self, params: dict) -> None:
        for p in self.parameters():
            if p.name not in params:
                raise KeyError(f"missing parameter {p.name}")
            v = np.asarray(params[p.name])
            if v.shape != p.value.shape:
                raise DimMismatch(f"{p.name}: shape {v.shape} != {p.value.shape}")
            p.value = v.astype(p.value.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_hidden(model: RegressorModel, rng, batch: int | None = None, sigma: float | None = None):
    """Initial GRU states drawn i.i.d. from N(0, sigma) (sigma defaults to the model's)."""
    sigma = model.hidden_noise_sigma if sigma is None else sigma
    shape = (model.hidden_size,) if batch is None else (batch, model.hidden_size)
    out = []
    for _ in model.grus:
        h = rng.normal(0.0, 1.0, size=shape) * sigma if sigma > 0 else np.zeros(shape)
        out.append(h.astype(model.dtype))
    return out


def forward_batch(model: RegressorModel, inputs, hidden, tape: Tape | None = None):
    """One recurrent step for a batch: inputs (B, n_in), hidden list of (B, H) -> (out Var (B, 3V), hidden Vars)."""
    u = Var(np.asarray(inputs, dtype=model.dtype))
    if u.value.shape[-1] != model.n_inputs:
        raise DimMismatch(f"regressor expects {model.n_inputs} inputs, got {u.value.shape[-1]}")
    new_hidden = []
    for cell, h in zip(model.grus, hidden):
        h = h if isinstance(h, Var) else Var(np.asarray(h, dtype=model.dtype))
        u = cell(u, h, tape)
        new_hidden.append(u)
    return model.output_layer(u, tape), new_hidden


def regress_displacements(model: RegressorModel, desc: MotionDescriptor, h):
    """Displacements (V, 3) and the next hidden state for one frame."""
    x = desc.features()[None, :]
    if x.shape[1] != model.n_inputs:
        raise DimMismatch(f"descriptor has {x.shape[1]} features, model expects {model.n_inputs}")
    out, hn = forward_batch(model, x, [np.asarray(a)[None, :] for a in h])
    disp = model.output_scale * out.value[0].reshape(-1, 3).astype(np.float64)
    return disp, [v.value[0] for v in hn]


def skinning_jacobians(weights, transforms) -> np.ndarray:
    """Per-vertex 3x3 blend of joint linear parts, ``sum_j W[i, j] A_j[:3, :3]``."""
    return np.einsum("nj,jab->nab", weights, transforms[:, :3, :3])


def skin_garment(model: RegressorModel, displacements, body_model: BodyModel, shape, pose: BodyPose,
                 transforms=None) -> np.ndarray:
    """World positions of the garment for the given displacements."""
    if transforms is None:
        transforms, _ = joint_transforms(body_model, shape, pose)
    pts = model.garment.vertices + np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    return skin_points(pts, model.garment_weights, transforms)


def backprop_entry(loss_grad_x, jacobians) -> np.ndarray:
    """Gradient at the displacements: ``J_i^T grad_x_i``."""
    return np.einsum("nab,na->nb", jacobians, np.asarray(loss_grad_x, dtype=np.float64))


def rollout(model: RegressorModel, body_model: BodyModel, shape, poses, dt: float, hidden=None,
            rng=None):
    """Run the regressor over a pose sequence; returns (positions (T, V, 3), transforms list)."""
    shape = np.asarray(shape, dtype=np.float64)
    if hidden is None:
        hidden = init_hidden(model, rng if rng is not None else np.random.default_rng(0))
    feats = motion_features(poses, dt)
    h = [np.asarray(a)[None, :] for a in hidden]
    xs, As = [], []
    for pose, f in zip(poses, feats):
        out, hv = forward_batch(model, np.concatenate([shape, f])[None, :], h)
        h = [v.value for v in hv]
        A, _ = joint_transforms(body_model, shape, pose)
        d = model.output_scale * out.value[0].reshape(-1, 3).astype(np.float64)
        xs.append(skin_garment(model, d, body_model, shape, pose, A))
        As.append(A)
    return np.stack(xs), As


# --------------------------------------------------------------------------- model package


def save_model(model: RegressorModel, directory, adam: AdamState | None = None, meta: dict | None = None,
               body_path=None, run_config: dict | None = None) -> Path:
    """Write checkpoint, garment OBJ, garment weights and a config snapshot into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / CHECKPOINT_NAME, model.param_dict(), adam, meta)
    save_obj(model.garment, d / "garment.obj")
    np.save(d / "garment_weights.npy", model.garment_weights)
    snap = {
        "n_shape": model.n_shape,
        "n_joints": model.n_joints,
        "hidden_noise_sigma": model.hidden_noise_sigma,
        "output_scale": model.output_scale,
        **model.config,
        "run": run_config or {},
    }
    if body_path is not None:
        shutil.copyfile(body_path, d / "body.json")
    (d / "model.json").write_text(json.dumps(snap, indent=1, sort_keys=True, default=str))
    return d


def load_model(directory):
    """Inverse of :func:`save_model`; returns ``(model, adam_state, meta)``."""
    d = Path(directory)
    for name in (CHECKPOINT_NAME, "garment.obj", "garment_weights.npy", "model.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"model package incomplete: {d / name} missing")
    snap = json.loads((d / "model.json").read_text())
    garment = load_obj(d / "garment.obj")
    weights = np.load(d / "garment_weights.npy")
    model = RegressorModel.create(garment, weights, snap["n_shape"], snap["n_joints"],
                                  hidden_size=snap["hidden_size"], n_layers=snap["n_layers"],
                                  hidden_noise_sigma=snap["hidden_noise_sigma"],
                                  output_scale=snap.get("output_scale", 1.0),
                                  dtype=np.dtype(snap.get("dtype", "float32")), zero=True)
    params, adam, meta = load_checkpoint(d / CHECKPOINT_NAME)
    model.load_params(params)
    return model, adam, meta
