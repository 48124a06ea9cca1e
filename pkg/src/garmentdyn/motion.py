"""Motion sequences: JSON I/O, procedural generators, resampling and train/val splits.

Poses are axis-angle per joint (radians) plus a root translation. The procedural
generators assume the 16-joint toy skeleton of :mod:`garmentdyn.assets`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .body import BodyPose

KINDS = ("idle", "walk", "squat", "arm_wave", "random_smooth")


class SchemaError(ValueError):
    def __init__(self, field: str, msg: str = ""):
        super().__init__(f"motion schema error in '{field}'" + (f": {msg}" if msg else ""))
        self.field = field


@dataclass
class MotionSequence:
    fps: float
    frames: list
    name: str = "motion"

    def __post_init__(self):
        if not (self.fps > 0 and np.isfinite(self.fps)):
            raise SchemaError("fps", "must be positive")
        self.frames = list(self.frames)
        if self.frames:
            nj = self.frames[0].n_joints
            for k, f in enumerate(self.frames):
                if f.n_joints != nj:
                    raise SchemaError("frames", f"frame {k} has {f.n_joints} joints, expected {nj}")

    def __len__(self):
        return len(self.frames)

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def joint_count(self) -> int:
        return self.frames[0].n_joints if self.frames else 0

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([f.joint_rotations for f in self.frames])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([f.root_translation for f in self.frames])

    @classmethod
    def from_arrays(cls, rotations, translations, fps, name="motion") -> "MotionSequence":
        return cls(fps, [BodyPose(r, t) for r, t in zip(rotations, translations)], name)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.fps, self.frames[start:stop], self.name)


# --------------------------------------------------------------------------- JSON


def save_motion(seq: MotionSequence, path) -> None:
    doc = {
        "fps": float(seq.fps),
        "joint_count": seq.joint_count,
        "name": seq.name,
        "frames": [
            {"root_translation": f.root_translation.tolist(), "rotations": f.joint_rotations.tolist()}
            for f in seq.frames
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_motion(path) -> MotionSequence:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("<document>", str(exc)) from exc
    if not isinstance(doc, dict):
        raise SchemaError("<document>", "expected an object")
    for key in ("fps", "joint_count", "frames"):
        if key not in doc:
            raise SchemaError(key, "missing")
    fps = doc["fps"]
    if not isinstance(fps, (int, float)) or not fps > 0:
        raise SchemaError("fps", "must be a positive number")
    nj = doc["joint_count"]
    if not isinstance(nj, int) or nj < 1:
        raise SchemaError("joint_count", "must be a positive integer")
    frames = []
    for k, fr in enumerate(doc["frames"]):
        try:
            rot = np.asarray(fr["rotations"], dtype=np.float64)
            tr = np.asarray(fr["root_translation"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"frames[{k}]", str(exc)) from exc
        if rot.shape != (nj, 3):
            raise SchemaError(f"frames[{k}].rotations", f"expected {nj}x3, got {rot.shape}")
        if tr.shape != (3,):
            raise SchemaError(f"frames[{k}].root_translation", "expected 3 numbers")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise SchemaError(f"frames[{k}]", "non-finite value")
        frames.append(BodyPose(rot, tr))
    return MotionSequence(float(fps), frames, str(doc.get("name", Path(path).stem)))


def load_motion_dir(path) -> list[MotionSequence]:
    return [load_motion(p) for p in sorted(Path(path).glob("*.json"))]


# --------------------------------------------------------------------------- resampling


def resample(seq: MotionSequence, fps: float) -> MotionSequence:
    """Resample to ``fps``: linear in root translation, SLERP per joint rotation."""
    if fps == seq.fps:
        return seq
    n = len(seq)
    t_src = np.arange(n) / seq.fps
    n_out = int(np.floor(t_src[-1] * fps + 1e-9)) + 1
    t_out = np.arange(n_out) / fps
    trans = np.stack([np.interp(t_out, t_src, seq.translations[:, k]) for k in range(3)], axis=1)
    rots = seq.rotations
    out = np.empty((n_out, seq.joint_count, 3))
    for j in range(seq.joint_count):
        slerp = Slerp(t_src, Rotation.from_rotvec(rots[:, j]))
        out[:, j] = slerp(np.clip(t_out, 0, t_src[-1])).as_rotvec()
    return MotionSequence.from_arrays(out, trans, fps, seq.name)


def angular_speed(seq: MotionSequence) -> np.ndarray:
    """Finite-difference angular speed (frames-1, joints) in rad/s from relative rotations."""
    rots = seq.rotations
    nj = seq.joint_count
    a = Rotation.from_rotvec(rots[:-1].reshape(-1, 3))
    b = Rotation.from_rotvec(rots[1:].reshape(-1, 3))
    return (a.inv() * b).magnitude().reshape(-1, nj) * seq.fps


# --------------------------------------------------------------------------- procedural motions

# toy skeleton joint ids
PELVIS, SPINE, CHEST, NECK = 0, 1, 2, 3
L_SHOULDER, L_ELBOW, R_SHOULDER, R_ELBOW = 4, 5, 7, 8
L_HIP, L_KNEE, R_HIP, R_KNEE = 10, 11, 13, 14


def _limit_speed(rot, trans, fps, cap):
    """Scale joint curves about their first frame so |d rot/dt| stays below ``cap``."""
    speed = np.abs(np.diff(rot, axis=0)).max(initial=0.0) * fps * np.sqrt(3.0)
    if speed > 0.95 * cap:
        rot = rot[:1] + (rot - rot[:1]) * (0.95 * cap / speed)
    return rot, trans


def generate_procedural(kind: str, n_frames: int, seed: int = 0, fps: float = 30.0,
                        n_joints: int = 16, max_angular_speed: float = 10.0,
                        name: str | None = None) -> MotionSequence:
    """Deterministic synthetic motion of the given kind.

    All curves are sums of sinusoids, so they are smooth in time; the
    finite-difference angular speed never exceeds ``max_angular_speed``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {KINDS}")
    if n_frames < 3:
        raise ValueError("n_frames must be at least 3")
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / fps
    rot = np.zeros((n_frames, n_joints, 3))
    trans = np.zeros((n_frames, 3))
    toy = n_joints == 16

    if kind == "idle":
        f = rng.uniform(0.2, 0.35)
        trans[:, 2] = 0.01 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif kind == "walk":
        f = rng.uniform(0.8, 1.1)
        speed = rng.uniform(0.6, 1.2)
        w = 2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
        trans[:, 1] = speed * t
        trans[:, 0] = 0.03 * np.sin(w)
        trans[:, 2] = 0.015 * np.sin(2 * w)
        if toy:
            swing = rng.uniform(0.3, 0.5)
            rot[:, L_HIP, 0] = swing * np.sin(w)
            rot[:, R_HIP, 0] = -swing * np.sin(w)
            rot[:, L_KNEE, 0] = -0.25 * (1 + np.sin(w + 1.0))
            rot[:, R_KNEE, 0] = -0.25 * (1 + np.sin(w + 1.0 + np.pi))
            rot[:, L_SHOULDER, 0] = -0.6 * swing * np.sin(w)
            rot[:, R_SHOULDER, 0] = 0.6 * swing * np.sin(w)
            rot[:, PELVIS, 2] = 0.08 * np.sin(w)
            rot[:, CHEST, 2] = -0.1 * np.sin(w)
    elif kind == "squat":
        f = rng.uniform(0.3, 0.5)
        depth = rng.uniform(0.6, 1.1)
        s = 0.5 * (1 - np.cos(2 * np.pi * f * t))
        trans[:, 2] = -0.25 * depth * s
        if toy:
            for hip, knee in ((L_HIP, L_KNEE), (R_HIP, R_KNEE)):
                rot[:, hip, 0] = depth * s
                rot[:, knee, 0] = -1.5 * depth * s
            rot[:, SPINE, 0] = -0.3 * depth * s
            rot[:, L_SHOULDER, 0] = 0.8 * depth * s
            rot[:, R_SHOULDER, 0] = 0.8 * depth * s
    elif kind == "arm_wave":
        f = rng.uniform(0.5, 0.9)
        w = 2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
        trans[:, 0] = 0.05 * np.sin(0.5 * w)
        if toy:
            amp = rng.uniform(0.5, 0.9)
            rot[:, L_SHOULDER, 1] = -amp * (0.5 + 0.5 * np.sin(w))
            rot[:, R_SHOULDER, 1] = amp * (0.5 + 0.5 * np.sin(w + np.pi / 3))
            rot[:, L_ELBOW, 2] = 0.5 * np.sin(2 * w)
            rot[:, R_ELBOW, 2] = -0.5 * np.sin(2 * w)
            rot[:, CHEST, 2] = 0.15 * np.sin(w)
    else:  # random_smooth
        n_terms = 3
        freqs = rng.uniform(0.2, 1.2, size=(n_terms, n_joints, 3))
        phases = rng.uniform(0, 2 * np.pi, size=(n_terms, n_joints, 3))
        amps = rng.uniform(0.0, 0.25, size=(n_terms, n_joints, 3))
        if toy:
            amps[:, [L_SHOULDER, R_SHOULDER, L_HIP, R_HIP]] *= 2.0
            amps[:, NECK] *= 0.5
        for k in range(n_terms):
            rot += amps[k] * np.sin(2 * np.pi * freqs[k] * t[:, None, None] + phases[k])
        tf = rng.uniform(0.3, 1.0, size=(2, 3))
        tp = rng.uniform(0, 2 * np.pi, size=(2, 3))
        ta = rng.uniform(0.0, 0.12, size=(2, 3)) * np.array([1.0, 1.0, 0.3])
        for k in range(2):
            trans += ta[k] * np.sin(2 * np.pi * tf[k] * t[:, None] + tp[k])
    rot, trans = _limit_speed(rot, trans, fps, max_angular_speed)
    return MotionSequence.from_arrays(rot, trans, fps, name or f"{kind}_{seed}")


def oscillating_root(n_frames: int, fps: float = 30.0, amplitude: float = 0.1, freq: float = 1.0,
                     axis: int = 0, n_joints: int = 16, name: str = "root_oscillation") -> MotionSequence:
    """Rest pose with the root swinging sinusoidally along one horizontal axis."""
    t = np.arange(n_frames) / fps
    trans = np.zeros((n_frames, 3))
    trans[:, axis] = amplitude * np.sin(2 * np.pi * freq * t)
    return MotionSequence.from_arrays(np.zeros((n_frames, n_joints, 3)), trans, fps, name)


def default_corpus(seed: int = 0, frames_per_sequence: int = 150, repeats: int = 4,
                   fps: float = 30.0) -> list[MotionSequence]:
    """Procedural training corpus: every kind ``repeats`` times (3000 frames by default)."""
    out = []
    for r in range(repeats):
        for k, kind in enumerate(KINDS):
            s = seed * 1000 + r * len(KINDS) + k
            out.append(generate_procedural(kind, frames_per_sequence, s, fps, name=f"{kind}_{r:02d}"))
    return out


# --------------------------------------------------------------------------- splits


def split_train_val(seqs, n_val: int, seed: int = 0):
    """Hold out ``n_val`` whole sequences (disjoint by name)."""
    names = sorted({s.name for s in seqs})
    if len(names) != len(seqs):
        raise ValueError("sequence names must be unique")
    rng = np.random.default_rng(seed)
    val_names = set(rng.permutation(names)[:n_val].tolist()) if n_val else set()
    train = [s for s in seqs if s.name not in val_names]
    val = [s for s in seqs if s.name in val_names]
    return train, val


def save_split(train, val, path) -> None:
    Path(path).write_text(json.dumps({"train": [s.name for s in train], "val": [s.name for s in val]},
                                     indent=1))


def load_split(path) -> dict:
    return json.loads(Path(path).read_text())
