"""Small reverse-mode autodiff: a tape of numpy ops, dense layers, GRU cells and Adam.

Every op takes an optional ``tape``. Without one it is a plain numpy forward
pass; with one it also records how to push gradients back to its inputs.
Arrays are row-batched: inputs are (batch, features).
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EmptyTape(RuntimeError):
    pass


class DimMismatch(ValueError):
    pass


class Var:
    """An array in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records ops in execution order; :meth:`backward` replays them in reverse once."""

    def __init__(self):
        self.ops: list = []

    def __len__(self):
        return len(self.ops)

    def record(self, out: Var, inputs, backward):
        if any(v.requires_grad for v in inputs):
            out.requires_grad = True
            self.ops.append((out, inputs, backward))
        return out

    def backward(self, seeds):
        """Propagate the ``(var, dL/dvar)`` pairs in ``seeds`` to every recorded input.

        Gradients accumulate into ``var.grad``. The tape is consumed.
        """
        if not self.ops:
            raise EmptyTape("nothing recorded (or backward already ran)")
        for var, g in seeds:
            g = np.asarray(g, dtype=var.value.dtype)
            if g.shape != var.value.shape:
                raise DimMismatch(f"seed shape {g.shape} != {var.value.shape}")
            var.grad = g.copy() if var.grad is None else var.grad + g
        for out, inputs, fn in reversed(self.ops):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
            out.grad = None
        self.ops = []


def backward(tape: Tape, seeds) -> None:
    tape.backward(seeds)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# --------------------------------------------------------------------------- ops


def linear(x, w, b=None, tape: Tape | None = None) -> Var:
    """``x @ w.T + b`` for ``w`` of shape (out, in)."""
    x, w = _wrap(x), _wrap(w)
    if x.value.shape[-1] != w.value.shape[1]:
        raise DimMismatch(f"input has {x.value.shape[-1]} features, weight expects {w.value.shape[1]}")
    y = x.value @ w.value.T
    if b is not None:
        b = _wrap(b)
        y = y + b.value
    out = Var(y)
    if tape is None:
        return out
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = g @ w.value
        gw = g.T @ x.value
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return tape.record(out, inputs, back)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b, tape: Tape | None = None) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value + b.value)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b, tape: Tape | None = None) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value - b.value)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b, tape: Tape | None = None) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value * b.value)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def sigmoid(x, tape: Tape | None = None) -> Var:
    x = _wrap(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = Var(s)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x, tape: Tape | None = None) -> Var:
    x = _wrap(x)
    t = np.tanh(x.value)
    out = Var(t)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * (1.0 - t * t),))


def total(x, tape: Tape | None = None) -> Var:
    x = _wrap(x)
    out = Var(np.asarray(x.value.sum()))
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (np.broadcast_to(g, x.value.shape).copy(),))


# --------------------------------------------------------------------------- layers


def glorot(rng, fan_out, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


@dataclass
class DenseLayer:
    weight: Var
    bias: Var
    activation: str = "identity"

    @classmethod
    def create(cls, rng, n_in, n_out, activation="identity", dtype=np.float32, zero=False, prefix="dense"):
        w = np.zeros((n_out, n_in), dtype) if zero else glorot(rng, n_out, n_in, dtype)
        return cls(Var(w, True, f"{prefix}.weight"), Var(np.zeros(n_out, dtype), True, f"{prefix}.bias"),
                   activation)

    def __call__(self, x, tape: Tape | None = None) -> Var:
        y = linear(x, self.weight, self.bias, tape)
        if self.activation == "tanh":
            return tanh(y, tape)
        return y

    def parameters(self) -> list[Var]:
        return [self.weight, self.bias]


@dataclass
class GruCell:
    """Gated recurrent unit.

    z = sigmoid(W_z u + U_z h + b_z), r = sigmoid(W_r u + U_r h + b_r),
    h~ = tanh(W_h u + U_h (r * h) + b_h), h' = (1 - z) * h + z * h~.
    """

    W_z: Var
    W_r: Var
    W_h: Var
    U_z: Var
    U_r: Var
    U_h: Var
    b_z: Var
    b_r: Var
    b_h: Var

    @property
    def hidden_size(self) -> int:
        return self.U_z.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.value.shape[1]

    @classmethod
    def create(cls, rng, input_size, hidden_size=256, dtype=np.float32, prefix="gru", zero=False):
        def mat(name, n_in):
            v = np.zeros((hidden_size, n_in), dtype) if zero else glorot(rng, hidden_size, n_in, dtype)
            return Var(v, True, f"{prefix}.{name}")

        def vec(name):
            return Var(np.zeros(hidden_size, dtype), True, f"{prefix}.{name}")

        return cls(mat("W_z", input_size), mat("W_r", input_size), mat("W_h", input_size),
                   mat("U_z", hidden_size), mat("U_r", hidden_size), mat("U_h", hidden_size),
                   vec("b_z"), vec("b_r"), vec("b_h"))

    def parameters(self) -> list[Var]:
        return [self.W_z, self.W_r, self.W_h, self.U_z, self.U_r, self.U_h, self.b_z, self.b_r, self.b_h]

    def __call__(self, u, h, tape: Tape | None = None) -> Var:
        return gru_forward(self, u, h, tape)


def gru_forward(cell: GruCell, u, h_prev, tape: Tape | None = None) -> Var:
    u, h_prev = _wrap(u), _wrap(h_prev)
    if u.value.shape[-1] != cell.input_size or h_prev.value.shape[-1] != cell.hidden_size:
        raise DimMismatch(
            f"GRU expects input {cell.input_size} / hidden {cell.hidden_size}, "
            f"got {u.value.shape[-1]} / {h_prev.value.shape[-1]}"
        )
    z = sigmoid(add(linear(u, cell.W_z, cell.b_z, tape), linear(h_prev, cell.U_z, None, tape), tape), tape)
    r = sigmoid(add(linear(u, cell.W_r, cell.b_r, tape), linear(h_prev, cell.U_r, None, tape), tape), tape)
    rh = mul(r, h_prev, tape)
    cand = tanh(add(linear(u, cell.W_h, cell.b_h, tape), linear(rh, cell.U_h, None, tape), tape), tape)
    # (1 - z) * h + z * h~  ==  h + z * (h~ - h)
    return add(h_prev, mul(z, sub(cand, h_prev, tape), tape), tape)


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam step on ``params`` (name -> array) with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype, copy=False)
    return state


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"SNUGCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_blob(buf, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    code = _CODES[arr.dtype]
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype(_DTYPES[code]).tobytes(order="C"))


def _read_blob(buf):
    (ln,) = struct.unpack("<H", buf.read(2))
    name = buf.read(ln).decode()
    code, ndim = struct.unpack("<BB", buf.read(2))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf.read(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, params: dict, adam: AdamState | None = None, meta: dict | None = None) -> None:
    """Write parameters, Adam moments and a JSON meta block; the file is replaced atomically.

    Layout: magic, u32 version, u32 meta length, meta JSON, u32 blob count, blobs.
    Each blob: u16 name length, name, u8 dtype code (0 f32, 1 f64), u8 ndim, u32 dims,
    row-major data.
    """
    blobs = [(k, v) for k, v in params.items()]
    if adam is not None:
        blobs += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        blobs += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    meta = dict(meta or {})
    meta["adam_t"] = adam.t if adam is not None else 0
    buf = io.BytesIO()
    buf.write(MAGIC)
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(buf, name, np.asarray(arr))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, adam_state, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(mlen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        params, adam = {}, AdamState(t=int(meta.get("adam_t", 0)))
        for _ in range(count):
            name, arr = _read_blob(fh)
            if name.startswith("adam.m."):
                adam.m[name[7:]] = arr
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = arr
            else:
                params[name] = arr
    return params, adam, meta
