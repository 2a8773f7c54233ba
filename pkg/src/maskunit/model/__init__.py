from maskunit.model.checkpoint import load_checkpoint, save_checkpoint
from maskunit.model.config import LossConfig, ModelConfig, TrainConfig, conv_layers
from maskunit.model.estimator import MaskedUnitPredictor
from maskunit.model.network import (
    MaskedPredictionNet,
    NonFiniteActivation,
    conv_output_length,
    cosine_logits,
    receptive_field,
)
from maskunit.model.objective import LossOutput, masked_prediction_loss
from maskunit.model.training import (
    NonFiniteGradient,
    TrainingDiverged,
    TrainResult,
    Utterance,
    evaluate,
    extract_features,
    lr_at,
    make_optimizer,
    train,
)

__all__ = [
    "LossConfig",
    "LossOutput",
    "MaskedPredictionNet",
    "MaskedUnitPredictor",
    "ModelConfig",
    "NonFiniteActivation",
    "NonFiniteGradient",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "Utterance",
    "conv_layers",
    "conv_output_length",
    "cosine_logits",
    "evaluate",
    "extract_features",
    "load_checkpoint",
    "lr_at",
    "make_optimizer",
    "masked_prediction_loss",
    "receptive_field",
    "save_checkpoint",
    "train",
]
