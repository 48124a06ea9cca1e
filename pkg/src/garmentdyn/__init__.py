"""Self-supervised learning of garment dynamics from physics losses alone."""
from .body import BodyModel, BodyPose, load_body, save_body
from .dynamics import SimState, SolverConfig, implicit_step, simulate
from .energy import MaterialParams
from .mesh import TriMesh, load_obj, save_obj
from .motion import MotionSequence, load_motion, save_motion
from .regressor import RegressorModel, load_model, save_model
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"


def __getattr__(name):
    # scikit-learn is only imported when the estimator wrapper is used
    if name == "GarmentRegressor":
        from .estimator import GarmentRegressor

        return GarmentRegressor
    raise AttributeError(name)


__all__ = ["BodyModel", "BodyPose", "GarmentRegressor", "MaterialParams", "MotionSequence", "RegressorModel",
           "SimState", "SolverConfig", "TrainConfig", "TriMesh", "evaluate", "implicit_step", "load_body",
           "load_model", "load_motion", "load_obj", "save_body", "save_model", "save_motion", "save_obj",
           "simulate", "train"]
