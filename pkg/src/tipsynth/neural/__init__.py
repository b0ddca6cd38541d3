from .blocks import (
    FiLMGenerator, GraphConv, MultiHeadSelfAttention, NetConfigError, ShapeError,
    TemporalGraphConv, TemporalResNet, TransformerEncoder, film, sinusoidal_encoding,
)
from .gradcheck import GradCheckFailure, gradient_check
from .params import ParamFileError, ParamStore
from .train import TrainResult, TrainingDiverged, seed_everything, train

__all__ = [
    "FiLMGenerator", "GraphConv", "MultiHeadSelfAttention", "NetConfigError", "ShapeError",
    "TemporalGraphConv", "TemporalResNet", "TransformerEncoder", "film", "sinusoidal_encoding",
    "GradCheckFailure", "gradient_check", "ParamFileError", "ParamStore",
    "TrainResult", "TrainingDiverged", "seed_everything", "train",
]
