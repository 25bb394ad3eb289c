from .config import AttentionMode, ToyDiTConfig, load_config
from .data import synth_dataset
from .model import ToyDiT
from .train import (
    RunRecord,
    distill,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train,
    write_records_csv,
)

__all__ = [
    "AttentionMode",
    "RunRecord",
    "ToyDiT",
    "ToyDiTConfig",
    "distill",
    "load_checkpoint",
    "load_config",
    "run_training",
    "save_checkpoint",
    "synth_dataset",
    "train",
    "write_records_csv",
]
