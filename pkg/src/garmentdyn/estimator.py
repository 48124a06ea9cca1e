"""scikit-learn style wrapper around the regressor and its self-supervised training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .body import BodyModel, transfer_skin_weights
from .energy import MaterialParams
from .mesh import TriMesh, precompute_rest_state
from .motion import MotionSequence
from .regressor import RegressorModel, init_hidden, rollout
from .trainer import PhysicsContext, TrainConfig, evaluate, train


def _as_list(X) -> list:
    return [X] if isinstance(X, MotionSequence) else list(X)


class GarmentRegressor(BaseEstimator):
    """Learns garment dynamics from motions alone; ``X`` is a list of :class:`MotionSequence`.

    ``fit`` needs no targets: the loss is the physics of the predicted garment.
    ``predict`` returns one (T, V, 3) array of world positions per motion.
    """

    def __init__(self, body_model: BodyModel | None = None, garment: TriMesh | None = None,
                 material: MaterialParams | None = None, hidden_size: int = 256, n_layers: int = 4,
                 hidden_noise_sigma: float = 0.1, output_scale: float = 1.0, batch_size: int = 16,
                 lr_phase1: float = 1e-3, phase1_epochs: int = 10, lr_phase2: float = 1e-4,
                 max_epochs: int = 100, max_steps: int | None = None, time_budget: float | None = None,
                 shape_range: float = 3.0, dt: float = 1.0 / 30.0, seed: int = 0, threads: int = 1,
                 dtype: str = "float32"):
        self.body_model = body_model
        self.garment = garment
        self.material = material
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.hidden_noise_sigma = hidden_noise_sigma
        self.output_scale = output_scale
        self.batch_size = batch_size
        self.lr_phase1 = lr_phase1
        self.phase1_epochs = phase1_epochs
        self.lr_phase2 = lr_phase2
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.time_budget = time_budget
        self.shape_range = shape_range
        self.dt = dt
        self.seed = seed
        self.threads = threads
        self.dtype = dtype

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr_phase1=self.lr_phase1, phase1_epochs=self.phase1_epochs,
                           lr_phase2=self.lr_phase2, shape_range=self.shape_range, dt=self.dt, seed=self.seed,
                           max_epochs=self.max_epochs, max_steps=self.max_steps, time_budget=self.time_budget,
                           threads=self.threads, hidden_noise_sigma=self.hidden_noise_sigma)

    def _material(self) -> MaterialParams:
        return self.material if self.material is not None else MaterialParams()

    def fit(self, X, y=None, X_val=None, out_dir=None, callback=None) -> "GarmentRegressor":
        if self.body_model is None or self.garment is None:
            raise ValueError("body_model and garment must be set before fit")
        weights = transfer_skin_weights(self.body_model, self.garment)
        model = RegressorModel.create(self.garment, weights, self.body_model.n_shape, self.body_model.n_joints,
                                      np.random.default_rng(self.seed), hidden_size=self.hidden_size,
                                      n_layers=self.n_layers, hidden_noise_sigma=self.hidden_noise_sigma,
                                      output_scale=self.output_scale, dtype=np.dtype(self.dtype))
        res = train(model, _as_list(X), _as_list(X_val) if X_val is not None else [], self.body_model,
                    self._material(), self._train_config(), out_dir=out_dir, callback=callback)
        self.model_ = res.model
        self.train_result_ = res
        return self

    def predict(self, X, shape=None, zero_hidden: bool = False) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        shape = np.zeros(self.model_.n_shape) if shape is None else np.asarray(shape, dtype=np.float64)
        out = []
        for i, m in enumerate(_as_list(X)):
            h = init_hidden(self.model_, np.random.default_rng([self.seed, i]), sigma=0.0 if zero_hidden else None)
            pos, _ = rollout(self.model_, self.body_model, shape, m.frames, self.dt, hidden=h)
            out.append(pos)
        return out

    def physics_losses(self, X, shapes=None) -> dict:
        """Mean per-frame physics terms (and their total) of the predictions on ``X``."""
        check_is_fitted(self, "model_")
        mat = self._material()
        ctx = PhysicsContext(self.body_model, precompute_rest_state(self.model_.garment, mat), mat,
                             self.model_.garment_weights, self.model_.garment.vertices)
        means, _ = evaluate(self.model_, _as_list(X), ctx, self.dt, shapes, seed=self.seed)
        return means

    def score(self, X, y=None) -> float:
        """Negative mean total physics loss, so that larger is better."""
        return -self.physics_losses(X)["total"]
