from switchcit.tinylm.generate import generate_batch, generate_greedy
from switchcit.tinylm.io import CorruptFileError, load_model, save_model
from switchcit.tinylm.model import (
    EmptyTargetError,
    ModelConfig,
    ModelParams,
    SequenceTooLongError,
    collate,
    forward,
    init_params,
    lm_loss,
    loss_and_grads,
    zero_params,
)
from switchcit.tinylm.tokenizer import Tokenizer, build_tokenizer
from switchcit.tinylm.train import TrainConfig, TrainingDivergedError, fit, train_lm

__all__ = [
    "CorruptFileError", "EmptyTargetError", "ModelConfig", "ModelParams",
    "SequenceTooLongError", "Tokenizer", "TrainConfig", "TrainingDivergedError",
    "build_tokenizer", "collate", "fit", "forward", "generate_batch", "generate_greedy",
    "init_params", "lm_loss", "load_model", "loss_and_grads", "save_model", "train_lm",
    "zero_params",
]
