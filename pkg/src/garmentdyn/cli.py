"""Command-line driver: simulate, train, infer, evaluate, gradcheck, postprocess, make-motions, make-body.

Exit codes: 0 success, 1 validation or gradient-check failure, 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

log = logging.getLogger("garmentdyn")


class UsageError(Exception):
    """I/O or configuration problem; maps to exit code 2."""


# --------------------------------------------------------------------------- helpers


def _threads(args) -> int:
    n = args.threads if getattr(args, "threads", None) else os.environ.get("SNUG_THREADS")
    try:
        n = int(n) if n else 1
    except ValueError as exc:
        raise UsageError(f"invalid thread count {n!r}") from exc
    if n < 1:
        raise UsageError("thread count must be positive")
    try:
        import numba

        with warnings.catch_warnings():
            # numba complains about an outdated TBB while picking a threading layer
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass
    return n


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _config(args):
    from .config import load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else load_config()
    return cfg


def _path(args, cfg, key, what):
    value = getattr(args, key, None) or cfg.paths.get(key)
    return _require(value, what)


def _out_dir(args, cfg) -> Path:
    out = getattr(args, "out", None) or cfg.paths.get("out")
    if out is None:
        raise UsageError("missing --out directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _shape(text, n_shape: int) -> np.ndarray:
    if not text:
        return np.zeros(n_shape)
    vals = np.array([float(t) for t in str(text).replace(",", " ").split()])
    if len(vals) != n_shape:
        raise UsageError(f"--shape needs {n_shape} values, got {len(vals)}")
    return vals


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _load_motions(path):
    from .motion import load_motion, load_motion_dir

    p = Path(path)
    seqs = load_motion_dir(p) if p.is_dir() else [load_motion(p)]
    if not seqs:
        raise UsageError(f"no motion files in {p}")
    return seqs


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    from .body import load_body, pose_body
    from .dynamics import SimState, SolverConfig, simulate
    from .mesh import load_obj, precompute_rest_state, save_obj
    from .motion import resample
    from .body import transfer_skin_weights
    from .regressor import RegressorModel, skin_garment

    cfg = _config(args)
    garment = load_obj(_path(args, cfg, "garment", "garment file"))
    body_model = load_body(_path(args, cfg, "body", "body file"))
    motion = _load_motions(_path(args, cfg, "motions", "motion file"))[0]
    out = _out_dir(args, cfg)
    dt = cfg.solver.dt
    motion = resample(motion, 1.0 / dt)
    if args.frames:
        motion = motion.slice(0, args.frames)
    shape = _shape(args.shape or ",".join(map(str, cfg.run.shape)), body_model.n_shape)
    mat = cfg.material
    rest = precompute_rest_state(garment, mat)
    weights = transfer_skin_weights(body_model, garment)
    holder = RegressorModel.create(garment, weights, body_model.n_shape, body_model.n_joints, hidden_size=1,
                                   n_layers=1, zero=True)
    x0 = skin_garment(holder, np.zeros((garment.n_vertices, 3)), body_model, shape, motion.frames[0])
    initial = SimState.at_rest(x0, dt)
    bodies = [pose_body(body_model, shape, p) for p in motion.frames]
    solver = SolverConfig(**{**cfg.solver.__dict__, "dt": dt})
    rows = []

    def record(k, state, report, body):
        save_obj(garment, out / f"frame_{k:04d}.obj", vertices=state.positions)
        e = report.energies
        rows.append([k, e["strain"], e["bending"], e["gravity"], e["collision"], e["inertia"],
                     report.grad_norm, report.iterations])

    simulate(initial, bodies, rest, mat, solver, callback=record)
    _write_csv(out / "energies.csv",
               ["frame", "strain", "bending", "gravity", "collision", "inertia", "residual", "iterations"], rows)
    (out / "config.ini").write_text(cfg.to_ini())
    print(f"simulated {len(rows)} frames into {out}")
    return 0


def cmd_train(args) -> int:
    from .body import load_body, transfer_skin_weights
    from .mesh import load_obj
    from .motion import default_corpus, resample, save_split, split_train_val
    from .regressor import RegressorModel, save_model
    from .trainer import TrainConfig, train

    cfg = _config(args)
    garment_path = getattr(args, "garment", None) or cfg.paths.get("garment")
    body_path = getattr(args, "body", None) or cfg.paths.get("body")
    garment = load_obj(_require(garment_path, "garment file"))
    body_model = load_body(_require(body_path, "body file"))
    tcfg = cfg.training
    overrides = {"seed": args.seed if args.seed is not None else tcfg.seed, "threads": _threads(args)}
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.time_budget is not None:
        overrides["time_budget"] = args.time_budget
    tcfg = TrainConfig(**{**tcfg.__dict__, **overrides})
    motions_path = getattr(args, "motions", None) or cfg.paths.get("motions")
    if motions_path:
        motions = [resample(m, 1.0 / tcfg.dt) for m in _load_motions(_require(motions_path, "motion directory"))]
    else:
        motions = default_corpus(tcfg.seed, cfg.run.frames_per_motion, cfg.run.motion_repeats, 1.0 / tcfg.dt)
    out = _out_dir(args, cfg)
    train_set, val_set = split_train_val(motions, min(cfg.run.n_val, max(len(motions) - 1, 0)), tcfg.seed)
    save_split(train_set, val_set, out / "split.json")
    weights = transfer_skin_weights(body_model, garment)
    model = RegressorModel.create(garment, weights, body_model.n_shape, body_model.n_joints,
                                  np.random.default_rng(tcfg.seed), hidden_noise_sigma=tcfg.hidden_noise_sigma)
    (out / "config.ini").write_text(cfg.to_ini())
    res = train(model, train_set, val_set, body_model, cfg.material, tcfg, out_dir=out,
                resume=args.resume, callback=_progress if args.verbose else None)
    save_model(res.model, out / "model", res.adam,
               {"epoch": res.epochs_run, "step": len(res.records), "stopped_by": res.stopped_by},
               body_path=body_path, run_config={"training": tcfg.__dict__, "material": cfg.material.__dict__})
    print(f"trained {len(res.records)} steps ({res.stopped_by}); model written to {out / 'model'}")
    return 0


def _progress(rec):
    print(f"epoch {rec.epoch} step {rec.step} total {rec.total:.6g} grad {rec.grad_norm:.3g}", flush=True)


def _load_package(args):
    from .body import load_body
    from .regressor import load_model

    model_dir = _require(args.model, "model directory")
    try:
        model, _, _ = load_model(model_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    body_path = args.body or (model_dir / "body.json")
    body_model = load_body(_require(body_path, "body file"))
    return model, body_model


def cmd_infer(args) -> int:
    from .body import pose_body
    from .mesh import precompute_rest_state, save_obj
    from .motion import resample
    from .postprocess import push_out
    from .regressor import init_hidden, rollout
    from .trainer import PhysicsContext, frame_losses, TERMS

    cfg = _config(args)
    model, body_model = _load_package(args)
    motion = _load_motions(_require(args.motion, "motion file"))[0]
    dt = cfg.training.dt
    motion = resample(motion, 1.0 / dt)
    out = _out_dir(args, cfg)
    mat = cfg.material
    shape = _shape(args.shape, model.n_shape)
    seed = args.seed if args.seed is not None else cfg.run.seed
    zero = args.zero_hidden or cfg.run.zero_hidden
    h = init_hidden(model, np.random.default_rng(seed), sigma=0.0 if zero else None)
    pos, _ = rollout(model, body_model, shape, motion.frames, dt, hidden=h)
    ctx = PhysicsContext(body_model, precompute_rest_state(model.garment, mat), mat, model.garment_weights,
                         model.garment.vertices)
    losses = frame_losses(pos, shape, motion.frames, ctx, dt)
    residual = [0] * len(pos)
    if args.postprocess or cfg.run.postprocess:
        for t, p in enumerate(motion.frames):
            pos[t], rep = push_out(pos[t], pose_body(body_model, shape, p), mat.collision_margin_eps)
            residual[t] = rep.residual
    for t in range(len(pos)):
        save_obj(model.garment, out / f"frame_{t:04d}.obj", vertices=pos[t])
    rows = [[t, *(float(losses[k][t]) for k in TERMS), float(sum(losses[k][t] for k in TERMS)), residual[t]]
            for t in range(len(pos))]
    _write_csv(out / "losses.csv", ["frame", *TERMS, "total", "residual_penetrations"], rows)
    print(f"wrote {len(pos)} frames to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .mesh import load_obj, precompute_rest_state
    from .motion import resample
    from .trainer import PhysicsContext, evaluate

    cfg = _config(args)
    model, body_model = _load_package(args)
    dt = cfg.training.dt
    motions = [resample(m, 1.0 / dt) for m in _load_motions(_require(args.motions, "motions"))]
    mat = cfg.material
    ctx = PhysicsContext(body_model, precompute_rest_state(model.garment, mat), mat, model.garment_weights,
                         model.garment.vertices)
    refs = None
    if args.reference:
        ref_dir = _require(args.reference, "reference directory")
        files = sorted(ref_dir.glob("*.obj"))
        if not files:
            raise UsageError(f"no OBJ files in {ref_dir}")
        refs = {0: np.stack([load_obj(f).vertices for f in files])}
        if len(refs[0]) != len(motions[0]):
            raise UsageError("reference frame count does not match the first motion")
    seed = args.seed if args.seed is not None else cfg.run.seed
    shapes = [[_shape(args.shape, model.n_shape)] for _ in motions]
    means, _ = evaluate(model, motions, ctx, dt, shapes, seed=seed, references=refs)
    text = json.dumps(means, indent=1, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_gradcheck

    results = run_gradcheck(args.configs, args.seed if args.seed is not None else 0, args.step)
    print(format_report(results, args.tol))
    bad = [r.term for r in results if not r.passed(args.tol)]
    if bad:
        print("gradient check failed for: " + ", ".join(bad))
        return 1
    return 0


def cmd_postprocess(args) -> int:
    from .body import load_body, pose_body
    from .mesh import load_obj, save_obj
    from .postprocess import push_out

    cfg = _config(args)
    frame_dir = _require(args.frames, "frame directory")
    files = sorted(frame_dir.glob("*.obj"))
    if not files:
        raise UsageError(f"no OBJ files in {frame_dir}")
    body_model = load_body(_require(args.body, "body file"))
    motion = _load_motions(_require(args.motion, "motion file"))[0]
    if len(motion) != len(files):
        raise UsageError(f"{len(files)} garment frames but {len(motion)} motion frames")
    shape = _shape(args.shape, body_model.n_shape)
    out = _out_dir(args, cfg)
    eps = cfg.material.collision_margin_eps
    total_res = 0
    rows = []
    for f, pose in zip(files, motion.frames):
        mesh = load_obj(f)
        x, rep = push_out(mesh.vertices, pose_body(body_model, shape, pose), eps, args.passes)
        save_obj(mesh, out / f.name, vertices=x)
        rows.append([f.name, rep.moved, rep.residual, rep.min_distance])
        total_res += rep.residual
    _write_csv(out / "postprocess.csv", ["frame", "moved", "residual", "min_distance"], rows)
    print(f"processed {len(files)} frames; residual penetrations: {total_res}")
    return 0


def cmd_make_motions(args) -> int:
    from .motion import KINDS, generate_procedural, save_motion

    if not args.out:
        raise UsageError("missing --out directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = args.kinds.split(",") if args.kinds else list(KINDS)
    seed = args.seed if args.seed is not None else 0
    n = 0
    for r in range(args.count):
        for k, kind in enumerate(kinds):
            if kind not in KINDS:
                raise UsageError(f"unknown motion kind {kind!r}")
            seq = generate_procedural(kind, args.frames, seed * 1000 + r * len(KINDS) + k, args.fps,
                                      name=f"{kind}_{r:02d}")
            save_motion(seq, out / f"{seq.name}.json")
            n += 1
    print(f"wrote {n} motions to {out}")
    return 0


def cmd_make_body(args) -> int:
    from .assets import cape, toy_humanoid
    from .body import save_body
    from .mesh import save_obj

    if not args.out:
        raise UsageError("missing --out path for the body JSON")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_body(toy_humanoid(), out)
    msg = f"wrote body to {out}"
    if args.garment:
        g = Path(args.garment)
        g.parent.mkdir(parents=True, exist_ok=True)
        save_obj(cape(), g)
        msg += f" and garment to {g}"
    print(msg)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmentdyn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker cap (default: $SNUG_THREADS or 1)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("simulate", help="run the implicit solver over a motion"))
    s.add_argument("--garment")
    s.add_argument("--body")
    s.add_argument("--motion", dest="motions")
    s.add_argument("--shape")
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("train", help="train the regressor on physics losses"))
    s.add_argument("--garment")
    s.add_argument("--body")
    s.add_argument("--motions", help="directory of motion JSON files (default: procedural corpus)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--time-budget", type=float, help="seconds")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("infer", help="roll a trained model over a motion"))
    s.add_argument("--model", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--body")
    s.add_argument("--shape")
    s.add_argument("--postprocess", action="store_true")
    s.add_argument("--zero-hidden", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = common(sub.add_parser("evaluate", help="mean physics losses on held-out motions"))
    s.add_argument("--model", required=True)
    s.add_argument("--motions", required=True)
    s.add_argument("--body")
    s.add_argument("--shape")
    s.add_argument("--reference", help="directory of reference OBJ frames for the first motion")
    s.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("gradcheck", help="finite-difference check of all energy gradients"))
    s.add_argument("--configs", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--step", type=float, default=1e-6)
    s.set_defaults(func=cmd_gradcheck)

    s = common(sub.add_parser("postprocess", help="push garment vertices out of the body"))
    s.add_argument("--frames", required=True, help="directory of garment OBJ frames")
    s.add_argument("--body", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--shape")
    s.add_argument("--passes", type=int, default=3)
    s.set_defaults(func=cmd_postprocess)

    s = common(sub.add_parser("make-motions", help="write procedural motion files"))
    s.add_argument("--kinds", help="comma-separated subset of idle,walk,squat,arm_wave,random_smooth")
    s.add_argument("--frames", type=int, default=150)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--fps", type=float, default=30.0)
    s.set_defaults(func=cmd_make_motions)

    s = common(sub.add_parser("make-body", help="write the toy humanoid body (and optionally the cape)"))
    s.add_argument("--garment", help="also write the cape garment OBJ here")
    s.set_defaults(func=cmd_make_body)
    return p


def main(argv=None) -> int:
    from .body import BodyFormatError
    from .config import ConfigError
    from .mesh import MeshError
    from .motion import SchemaError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command not in ("train",):
            _threads(args)
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, BodyFormatError, MeshError, FileNotFoundError,
            KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
