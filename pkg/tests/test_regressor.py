import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from garmentdyn.body import BodyModel, BodyPose, joint_transforms, transfer_skin_weights
from garmentdyn.energy import MaterialParams
from garmentdyn.mesh import TriMesh, grid_mesh, precompute_rest_state
from garmentdyn.motion import generate_procedural
from garmentdyn.neural import DimMismatch
from garmentdyn.regressor import (MotionDescriptor, RegressorModel, backprop_entry, describe, init_hidden,
                                  load_model, motion_features, regress_displacements, rollout, root_velocities,
                                  save_model, skin_garment, skinning_jacobians)
from garmentdyn.trainer import PhysicsContext, TrainConfig, TrainingSet, batch_gradient


def chest_patch():
    """A 2 x 5 vertex strip hanging just in front of the toy humanoid's chest."""
    flat = grid_mesh(2, 5, 0.1, 0.2)
    v = np.column_stack([flat.vertices[:, 0] - 0.05, np.full(10, 0.132), flat.vertices[:, 1] + 1.15])
    return TriMesh(v, flat.faces, flat.rest_uv)


def small_model(humanoid, garment=None, dtype=np.float64, seed=0, **kw):
    garment = garment or chest_patch()
    w = transfer_skin_weights(humanoid, garment)
    return RegressorModel.create(garment, w, humanoid.n_shape, humanoid.n_joints, np.random.default_rng(seed),
                                 hidden_size=kw.pop("hidden_size", 8), n_layers=kw.pop("n_layers", 2),
                                 dtype=dtype, **kw)


class TestHidden:
    def test_moments(self, humanoid):
        model = small_model(humanoid, dtype=np.float64)
        h = init_hidden(model, np.random.default_rng(0), batch=100_000 // model.hidden_size + 1)
        draws = np.concatenate([a.ravel() for a in h])[:100_000 * len(h)]
        assert abs(draws.mean()) < 0.002
        assert abs(draws.std() - 0.1) < 0.002

    def test_seeded_and_degenerate(self, humanoid):
        model = small_model(humanoid)
        a = init_hidden(model, np.random.default_rng(5))
        b = init_hidden(model, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not any(z.any() for z in init_hidden(model, np.random.default_rng(5), sigma=0.0))

    def test_default_architecture(self, humanoid, cape_mesh):
        w = transfer_skin_weights(humanoid, cape_mesh)
        model = RegressorModel.create(cape_mesh, w, 4, 16)
        assert len(model.grus) == 4 and model.hidden_size == 256
        assert model.output_layer.weight.value.shape == (3 * cape_mesh.n_vertices, 256)
        assert model.hidden_noise_sigma == 0.1


class TestDisplacements:
    def test_zero_model(self, humanoid, rng):
        model = small_model(humanoid, zero=True)
        desc = MotionDescriptor(rng.normal(size=4), rng.normal(size=48), rng.normal(size=3))
        d, h = regress_displacements(model, desc, init_hidden(model, rng))
        assert d.shape == (10, 3) and not d.any()

    def test_pure_function(self, humanoid, rng):
        model = small_model(humanoid)
        desc = MotionDescriptor(rng.normal(size=4), rng.normal(size=48), rng.normal(size=3))
        h = init_hidden(model, rng)
        d1, h1 = regress_displacements(model, desc, h)
        d2, h2 = regress_displacements(model, desc, h)
        assert np.array_equal(d1, d2) and all(np.array_equal(a, b) for a, b in zip(h1, h2))
        assert d1.shape == (10, 3)

    def test_dimension_mismatch(self, humanoid, rng):
        model = small_model(humanoid)
        with pytest.raises(DimMismatch):
            regress_displacements(model, MotionDescriptor(np.zeros(3), np.zeros(48), np.zeros(3)),
                                  init_hidden(model, rng))
        with pytest.raises(DimMismatch):
            MotionDescriptor(np.zeros(4), np.zeros(48), np.zeros(2))


class TestFeatures:
    def test_root_velocity_in_root_frame(self):
        yaw = np.pi / 2
        poses = [BodyPose(np.array([[0, 0, yaw]] + [[0, 0, 0]] * 15), np.array([0.1 * t, 0, 0])) for t in range(3)]
        v = root_velocities(poses, 0.5)
        assert np.array_equal(v[0], np.zeros(3))
        # world +x seen from a frame turned 90 degrees about z is local -y
        assert np.allclose(v[1], [0, -0.2, 0], atol=1e-15)

    def test_feature_layout(self, humanoid):
        seq = generate_procedural("walk", 4, 0)
        f = motion_features(seq.frames, seq.dt)
        assert f.shape == (4, 48 + 3)
        descs = describe(np.ones(4), seq.frames, seq.dt)
        assert np.array_equal(descs[2].features()[4:], f[2])

    def test_translation_invariant_inputs(self):
        seq = generate_procedural("walk", 5, 0)
        shifted = [BodyPose(p.joint_rotations, p.root_translation + [3.0, -2.0, 0.5]) for p in seq.frames]
        assert np.allclose(motion_features(seq.frames, seq.dt), motion_features(shifted, seq.dt), atol=1e-12)


class TestSkinning:
    def test_identity_pose(self, humanoid, rng):
        model = small_model(humanoid)
        d = np.zeros((10, 3))
        x = skin_garment(model, d, humanoid, np.zeros(4), BodyPose.identity(16))
        assert np.allclose(x, model.garment.vertices, atol=1e-15)
        d[3] = [0.01, -0.02, 0.03]
        x2 = skin_garment(model, d, humanoid, np.zeros(4), BodyPose.identity(16))
        assert np.allclose(x2 - x, d, atol=1e-15)

    def test_jacobian_matches_fd(self, humanoid, rng):
        model = small_model(humanoid)
        shape, pose = rng.uniform(-2, 2, 4), BodyPose(rng.uniform(-0.5, 0.5, (16, 3)), rng.normal(size=3))
        A, _ = joint_transforms(humanoid, shape, pose)
        J = skinning_jacobians(model.garment_weights, A)
        d0 = rng.normal(0, 0.01, (10, 3))
        h = 1e-6
        for i in (0, 7):
            for k in range(3):
                dp, dm = d0.copy(), d0.copy()
                dp[i, k] += h
                dm[i, k] -= h
                col = (skin_garment(model, dp, humanoid, shape, pose, A)[i]
                       - skin_garment(model, dm, humanoid, shape, pose, A)[i]) / (2 * h)
                assert np.abs(col - J[i][:, k]).max() < 1e-6

    def test_identity_entry_is_passthrough(self, rng):
        g = rng.normal(size=(5, 3))
        J = np.broadcast_to(np.eye(3), (5, 3, 3))
        assert np.array_equal(backprop_entry(g, J), g)

    def test_rigid_rotation_entry(self, rng):
        v = np.array([[1.0, 0, 0], [0, 2, 0], [0, 0, 3]])
        model = BodyModel(v, [[0, 1, 2]], np.zeros((3, 3, 0)), np.zeros((1, 3)), [-1], np.ones((3, 1)))
        A, _ = joint_transforms(model, [], BodyPose([[0, 0, np.pi / 2]]))
        J = skinning_jacobians(np.ones((4, 1)), A)
        g = rng.normal(size=(4, 3))
        expected = g @ Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()  # R^T g per row
        assert np.abs(backprop_entry(g, J) - expected).max() < 1e-7

    def test_global_translation_is_affine(self, humanoid, rng):
        model = small_model(humanoid)
        shape, pose = rng.uniform(-2, 2, 4), BodyPose(rng.uniform(-0.5, 0.5, (16, 3)))
        A, _ = joint_transforms(humanoid, shape, pose)
        t = np.array([0.3, -1.2, 2.0])
        A2 = A.copy()
        A2[:, :3, 3] += t
        d = rng.normal(0, 0.01, (10, 3))
        x1 = skin_garment(model, d, humanoid, shape, pose, A)
        x2 = skin_garment(model, d, humanoid, shape, pose, A2)
        assert np.abs(x2 - x1 - t).max() < 1e-9


def test_end_to_end_parameter_gradient(humanoid):
    """Physics loss of a training batch differentiated down to the network weights."""
    model = small_model(humanoid, hidden_size=6, output_scale=0.01)
    mat = MaterialParams()
    rest = precompute_rest_state(model.garment, mat)
    ctx = PhysicsContext(humanoid, rest, mat, model.garment_weights, model.garment.vertices)
    cfg = TrainConfig(shape_range=0.3, seed=3)
    data = TrainingSet.build([generate_procedural("arm_wave", 6, 1)], cfg.dt)
    batch = data.windows[:2]
    bg = batch_gradient(model, batch, data, ctx, cfg, epoch=0)
    assert bg.used == 2 and bg.means["collision"] > 0

    def loss():
        return batch_gradient(model, batch, data, ctx, cfg, epoch=0).total

    rng = np.random.default_rng(0)
    h = 1e-6
    analytic, numeric = [], []
    for p in model.parameters():
        for _ in range(3):
            idx = tuple(rng.integers(0, n) for n in p.value.shape)
            old = p.value[idx]
            p.value[idx] = old + h
            fp = loss()
            p.value[idx] = old - h
            fm = loss()
            p.value[idx] = old
            analytic.append(bg.grads[p.name][idx])
            numeric.append((fp - fm) / (2 * h))
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 2e-3
    # and along one random direction in the full parameter space
    direction = {p.name: rng.normal(size=p.value.shape) for p in model.parameters()}

    def shifted(eps):
        for p in model.parameters():
            p.value += eps * direction[p.name]
        try:
            return loss()
        finally:
            for p in model.parameters():
                p.value -= eps * direction[p.name]

    fd = (shifted(h) - shifted(-h)) / (2 * h)
    an = sum(float(np.sum(bg.grads[k] * direction[k])) for k in direction)
    assert abs(an - fd) / abs(fd) < 2e-3


def test_rollout_and_package_round_trip(tmp_path, humanoid):
    model = small_model(humanoid, dtype=np.float32)
    seq = generate_procedural("squat", 5, 2)
    x1, As = rollout(model, humanoid, np.zeros(4), seq.frames, seq.dt, rng=np.random.default_rng(1))
    assert x1.shape == (5, 10, 3) and len(As) == 5
    save_model(model, tmp_path / "m")
    back, _, _ = load_model(tmp_path / "m")
    x2, _ = rollout(back, humanoid, np.zeros(4), seq.frames, seq.dt, rng=np.random.default_rng(1))
    assert np.array_equal(x1, x2)
    assert back.output_scale == model.output_scale and back.hidden_size == 8


def test_incomplete_package(tmp_path, humanoid):
    save_model(small_model(humanoid), tmp_path / "m")
    (tmp_path / "m" / "garment_weights.npy").unlink()
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "m")
