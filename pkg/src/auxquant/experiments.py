"""Document-level experiment orchestration shared by the CLI and tests."""

from __future__ import annotations

from .config import ExperimentConfig
from .data import Pipeline, load_dataset
from .training import finetune, pretrain, run_comparison

__all__ = ["build_pipeline", "run_experiment"]


def build_pipeline(cfg: ExperimentConfig) -> Pipeline:
    train_ds, test_ds = load_dataset(cfg.dataset, seed=cfg.seed)
    return Pipeline(train_ds, test_ds, cfg.dataset)


def run_experiment(cfg: ExperimentConfig):
    """Run both stages of a config document: pretrain, then fine-tune.

    Returns {"pretrain": (checkpoint, rows), "finetune": (checkpoint, rows)}.
    """
    pipeline = build_pipeline(cfg)
    pre_ck, pre_rows = pretrain(cfg.network, pipeline, cfg.pretrain_config())
    fin_ck, fin_rows = finetune(pre_ck, cfg.train.method, pipeline,
                                cfg.finetune_config(), aux_spec=cfg.auxiliary,
                                spec=cfg.network)
    return {"pretrain": (pre_ck, pre_rows), "finetune": (fin_ck, fin_rows)}


def run_config_comparison(cfg: ExperimentConfig, methods, seeds):
    pipeline = build_pipeline(cfg)
    return run_comparison(cfg.network, pipeline, methods, seeds,
                          cfg.pretrain_config(), cfg.finetune_config(),
                          aux_spec=cfg.auxiliary)
