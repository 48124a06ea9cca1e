import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from garmentdyn import GarmentRegressor
from garmentdyn.mesh import TriMesh, grid_mesh
from garmentdyn.motion import generate_procedural


def patch():
    flat = grid_mesh(3, 3, 0.1, 0.1)
    v = np.column_stack([flat.vertices[:, 0] - 0.05, np.full(9, 0.19), flat.vertices[:, 1] + 1.2])
    return TriMesh(v, flat.faces, flat.rest_uv)


@pytest.fixture
def estimator(humanoid):
    return GarmentRegressor(humanoid, patch(), hidden_size=8, n_layers=1, batch_size=4, max_steps=6,
                            dtype="float64", seed=2)


def test_params_round_trip(estimator):
    params = estimator.get_params()
    assert params["hidden_size"] == 8 and params["max_steps"] == 6
    twin = clone(estimator)
    assert twin.get_params()["seed"] == 2 and not hasattr(twin, "model_")
    twin.set_params(lr_phase1=5e-4)
    assert twin.lr_phase1 == 5e-4


def test_predict_before_fit(estimator):
    with pytest.raises(NotFittedError):
        estimator.predict([generate_procedural("idle", 4, 0)])


def test_fit_predict_score(estimator):
    motions = [generate_procedural("walk", 8, 1)]
    assert estimator.fit(motions) is estimator
    assert len(estimator.train_result_.records) == 6
    (pos,) = estimator.predict(motions)
    assert pos.shape == (8, 9, 3) and np.all(np.isfinite(pos))
    assert np.array_equal(pos, estimator.predict(motions[0])[0])
    assert estimator.score(motions) == pytest.approx(-estimator.physics_losses(motions)["total"])


def test_refit_is_deterministic(estimator):
    motions = [generate_procedural("arm_wave", 6, 3)]
    a = estimator.fit(motions).predict(motions)[0]
    b = clone(estimator).fit(motions).predict(motions)[0]
    assert np.array_equal(a, b)


def test_missing_assets():
    with pytest.raises(ValueError):
        GarmentRegressor().fit([generate_procedural("idle", 4, 0)])
