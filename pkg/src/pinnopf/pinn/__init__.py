"""Physics-informed dispatch networks: model, loss, training and metrics."""
from .gradcheck import GradCheck, finite_difference_check, jitter
from .loss import Batch, LossOptions, LossValue, loss_and_grad, physics_loss, physics_residuals, total_loss
from .metrics import EvalMetrics, dispatch_metrics, evaluate
from .model import (HEADS, Head, LossWeights, PinnModel, Prediction, Scaling, default_widths, forward,
                    head_forward, init_model, load_model, model_from_dict, model_to_json, predict_g,
                    save_model)
from .train import History, TrainConfig, TrainingDiverged, train

__all__ = [
    "Batch", "EvalMetrics", "GradCheck", "HEADS", "Head", "History", "LossOptions", "LossValue",
    "LossWeights", "PinnModel", "Prediction", "Scaling", "TrainConfig", "TrainingDiverged",
    "default_widths", "dispatch_metrics", "evaluate", "finite_difference_check", "forward",
    "head_forward", "init_model", "jitter", "load_model", "loss_and_grad", "model_from_dict", "model_to_json",
    "physics_loss", "physics_residuals", "predict_g", "save_model", "total_loss", "train",
]
