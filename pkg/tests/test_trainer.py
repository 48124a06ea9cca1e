import csv

import numpy as np
import pytest

from garmentdyn import trainer as tr
from garmentdyn.assets import icosphere
from garmentdyn.body import transfer_skin_weights
from garmentdyn.dynamics import SimState, simulate
from garmentdyn.energy import MaterialParams
from garmentdyn.mesh import TriMesh, grid_mesh, precompute_rest_state
from garmentdyn.motion import generate_procedural
from garmentdyn.neural import AdamState
from garmentdyn.regressor import RegressorModel
from garmentdyn.trainer import (PhysicsContext, SequenceTooShort, TrainConfig, TrainingSet, batch_gradient,
                                curvature_error, frame_losses, lr_schedule, make_subsequences, mean_curvature,
                                should_stop, train, train_step)


def hanging_patch():
    """A 4 x 4 vertex patch hanging 5 cm in front of the toy humanoid's chest."""
    flat = grid_mesh(4, 4, 0.15, 0.15)
    v = np.column_stack([flat.vertices[:, 0] - 0.075, np.full(16, 0.19), flat.vertices[:, 1] + 1.15])
    return TriMesh(v, flat.faces, flat.rest_uv)


def toy_setup(humanoid, mat, seed=0, hidden=16, body=True, **cfg_kw):
    garment = hanging_patch()
    w = transfer_skin_weights(humanoid, garment)
    model = RegressorModel.create(garment, w, 4, 16, np.random.default_rng(seed), hidden_size=hidden, n_layers=2,
                                  dtype=np.float64)
    rest = precompute_rest_state(garment, mat)
    ctx = PhysicsContext(humanoid if body else None, rest, mat, w, garment.vertices)
    cfg = TrainConfig(**{"batch_size": 4, "seed": seed, **cfg_kw})
    return model, ctx, cfg


def toy_motions():
    return [generate_procedural("walk", 12, 1), generate_procedural("arm_wave", 12, 2)]


class TestWindows:
    def test_counts(self):
        seqs = [generate_procedural("idle", 6, 0), generate_procedural("idle", 3, 1)]
        wins = make_subsequences(seqs, 3)
        assert len(wins) == 5
        assert [(w.source, w.start) for w in wins][-2:] == [(0, 3), (1, 0)]
        assert [w.window_id for w in wins] == list(range(5))

    def test_too_short(self):
        two = generate_procedural("idle", 3, 0).slice(0, 2)
        with pytest.raises(SequenceTooShort):
            make_subsequences([two], 3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(subseq_len=2)
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (9, 1e-3), (10, 1e-4), (500, 1e-4)])
    def test_boundaries(self, epoch, lr):
        assert lr_schedule(epoch, TrainConfig()) == lr

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())

    def test_plateau_rule(self):
        assert not should_stop([10, 9, 8], 5, 0.005)
        assert should_stop([10, 9.99, 9.99, 9.98, 9.97, 9.96], 5, 0.005)
        assert not should_stop([10, 9, 8, 7, 6, 5], 5, 0.005)


class TestStep:
    def test_zero_lr_freezes_model(self, humanoid, mat):
        model, ctx, cfg = toy_setup(humanoid, mat)
        data = TrainingSet.build(toy_motions(), cfg.dt)
        before = {k: v.copy() for k, v in model.param_dict().items()}
        rec = train_step(model, data.windows[:4], data, ctx, cfg, AdamState(), 0, 0, 0.0)
        assert all(np.array_equal(before[k], v) for k, v in model.param_dict().items())
        assert np.isfinite(rec.total) and rec.total > 0 and rec.skipped == 0

    def test_batch_order_does_not_matter(self, humanoid, mat):
        model, ctx, cfg = toy_setup(humanoid, mat)
        data = TrainingSet.build(toy_motions(), cfg.dt)
        batch = data.windows[:6]
        a = batch_gradient(model, batch, data, ctx, cfg, 0)
        b = batch_gradient(model, batch[::-1], data, ctx, cfg, 0)
        for k in a.grads:
            scale = max(np.abs(a.grads[k]).max(), 1e-300)
            assert np.abs(a.grads[k] - b.grads[k]).max() <= 1e-12 * scale
        assert a.total == pytest.approx(b.total, rel=1e-12)

    def test_non_finite_window_is_skipped(self, humanoid, mat, monkeypatch, caplog):
        model, ctx, cfg = toy_setup(humanoid, mat)
        data = TrainingSet.build(toy_motions(), cfg.dt)
        real = tr._window_physics
        bad_id = data.windows[1].window_id

        def flaky(ctx_, data_, win, shape, disps, dt):
            terms, gd = real(ctx_, data_, win, shape, disps, dt)
            if win.window_id == bad_id:
                terms["strain"] = float("nan")
            return terms, gd

        monkeypatch.setattr(tr, "_window_physics", flaky)
        rec = train_step(model, data.windows[:4], data, ctx, cfg, AdamState(), 0, 0, 1e-3)
        assert rec.skipped == 1 and np.isfinite(rec.total)
        assert all(np.all(np.isfinite(v)) for v in model.param_dict().values())
        assert "window skipped" in caplog.text

    def test_all_windows_bad_leaves_model(self, humanoid, mat, monkeypatch):
        model, ctx, cfg = toy_setup(humanoid, mat)
        data = TrainingSet.build(toy_motions(), cfg.dt)
        real = tr._window_physics

        def broken(*args):
            terms, gd = real(*args)
            return {k: float("inf") for k in terms}, gd

        monkeypatch.setattr(tr, "_window_physics", broken)
        before = {k: v.copy() for k, v in model.param_dict().items()}
        rec = train_step(model, data.windows[:2], data, ctx, cfg, AdamState(), 0, 0, 1e-3)
        assert rec.skipped == 2
        assert all(np.array_equal(before[k], v) for k, v in model.param_dict().items())


class TestTraining:
    def test_smoke_run_lowers_loss(self, humanoid, mat):
        model, ctx, cfg = toy_setup(humanoid, mat, max_steps=200)
        motions = toy_motions()
        data = TrainingSet.build(motions, cfg.dt)
        untrained = np.mean([batch_gradient(model, [w], data, ctx, cfg, 0).total for w in data.windows])
        result = train(model, motions, [], humanoid, mat, cfg)
        assert result.stopped_by == "max_steps" and len(result.records) == 200
        trained = np.mean([batch_gradient(model, [w], data, ctx, cfg, 0).total for w in data.windows])
        assert trained < untrained

    def test_trivial_equilibrium_is_found(self, humanoid):
        mat = MaterialParams(gravity=(0.0, 0.0, 0.0))
        model, ctx, cfg = toy_setup(humanoid, mat, body=False, max_steps=400, lr_phase1=3e-3,
                                    phase1_epochs=10**4, max_epochs=10**4)
        motions = toy_motions()
        result = train(model, motions, [], None, mat, cfg)
        first = result.records[0].strain + result.records[0].bending
        last = np.mean([r.strain + r.bending for r in result.records[-10:]])
        assert last < 0.01 * first

    def test_resume_reproduces_uninterrupted_run(self, humanoid, mat, tmp_path):
        motions = toy_motions()
        model, _, cfg = toy_setup(humanoid, mat, max_steps=9)
        train(model, motions, [], humanoid, mat, cfg, out_dir=tmp_path / "full")
        model2, _, cfg2 = toy_setup(humanoid, mat, max_steps=4)
        train(model2, motions, [], humanoid, mat, cfg2, out_dir=tmp_path / "part")
        model3, _, _ = toy_setup(humanoid, mat, seed=99)  # different init, overwritten by the checkpoint
        train(model3, motions, [], humanoid, mat, cfg, out_dir=tmp_path / "part",
              resume=tmp_path / "part" / "checkpoint.snugckpt")

        def rows(path):
            with open(path) as fh:
                return [r[:-1] for r in csv.reader(fh)]  # drop wall_time

        assert rows(tmp_path / "full" / "train_log.csv") == rows(tmp_path / "part" / "train_log.csv")
        assert all(np.array_equal(a, b) for a, b in zip(model.param_dict().values(), model3.param_dict().values()))

    def test_validation_history_and_plateau(self, humanoid, mat):
        model, ctx, cfg = toy_setup(humanoid, mat, max_epochs=3, lr_phase1=0.0, patience=1, val_shapes=1)
        motions = toy_motions()
        result = train(model, motions[:1], motions[1:], humanoid, mat, cfg)
        assert len(result.val_history) == 2 and result.stopped_by == "plateau"
        assert result.val_history[0] == result.val_history[1]


class TestCurvature:
    def test_unit_sphere(self):
        v, f = icosphere(4, 1.0)
        h = mean_curvature(v, f)
        assert len(v) == 2562
        assert h.mean() == pytest.approx(1.0, abs=0.05)

    def test_radius_scaling(self):
        v, f = icosphere(3, 1.0)
        assert np.allclose(mean_curvature(2 * v, f), 0.5 * mean_curvature(v, f), rtol=1e-9)

    def test_flat_and_boundary(self):
        m = grid_mesh(5, 5, 1.0, 1.0)
        assert np.abs(mean_curvature(m.vertices, m.faces)).max() < 1e-12

    def test_self_error_is_zero(self, cape_mesh):
        assert curvature_error(cape_mesh.vertices, cape_mesh.vertices, cape_mesh.faces) == 0.0


def test_oracle_trajectory_losses_match_solver(mat):
    mesh = grid_mesh(5, 5, 0.2, 0.2)
    rest = precompute_rest_state(mesh, mat)
    s0 = SimState.at_rest(mesh.vertices)
    states, reports = simulate(s0, [None] * 6, rest, mat, pinned=[0, 4])
    ctx = PhysicsContext(None, rest, mat, np.ones((25, 1)), mesh.vertices)
    pos = np.stack([s.positions for s in states])
    losses = frame_losses(pos, None, [None] * len(pos), ctx, s0.dt)
    for t in range(2, len(pos)):
        per_frame = sum(losses[k][t] for k in tr.TERMS)
        assert per_frame == pytest.approx(reports[t - 1].final_objective, rel=1e-8, abs=1e-12)
