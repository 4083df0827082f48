"""Experiment orchestration: configs, runs, checkpoints and the command line."""

from .checkpoint import Checkpoint, RunLock, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .runs import (execute, format_table, run_check_grad, run_ho, run_meta_eval,
                   run_meta_train, run_pretrain_baseline, run_report, run_sweep_T, select_horizon)

__all__ = [
    "Checkpoint", "RunLock", "load_checkpoint", "save_checkpoint", "RunConfig", "load_config",
    "execute", "format_table", "run_check_grad", "run_ho", "run_meta_eval",
    "run_meta_train", "run_pretrain_baseline", "run_report", "run_sweep_T", "select_horizon",
]
