"""Training orchestration, experiment matrix and command-line entry point."""

from ctcd.harness.config import RunConfig, build_config, dump_config, load_config, parse_lines
from ctcd.harness.optim import Adam, AdamConfig
from ctcd.harness.train import (
    METHODS,
    EvalReport,
    RunReport,
    TrainResult,
    evaluate,
    train,
    train_baseline,
    train_baseline_kd,
    train_two_stage,
)

__all__ = [
    "METHODS", "Adam", "AdamConfig", "EvalReport", "RunConfig", "RunReport", "TrainResult",
    "build_config", "dump_config", "evaluate", "load_config", "parse_lines", "train",
    "train_baseline", "train_baseline_kd", "train_two_stage",
]
