"""Desk-scale smoke and ablation runs shared by the acceptance tests and demos."""
from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass

from .config import GenSpec, ModelConfig, TrainConfig, apply_ablation
from .data import SamplePair, gen_synthetic
from .train import Trainer, build_model, evaluate_mdice

__all__ = [
    "DESK_MODEL",
    "DESK_TRAIN",
    "ABLATION_ROWS",
    "RunResult",
    "two_stage_run",
    "desk_data",
    "count_violations",
    "median",
]

# Smaller widths than the defaults so 18 two-stage runs fit on one core.
DESK_MODEL = ModelConfig(c0=8, dim=32, depth=2, heads=2, adapter_rank=8)
DESK_TRAIN = TrainConfig(lr=1e-3, epochs_stage1=10, epochs_stage2=20, batch=4)

# Prior-component rows (adapter, msd, full) and single-kernel rows (uni3/5/7).
# The "multi" name is an alias of msd, so it is not trained twice.
ABLATION_ROWS = ("adapter", "msd", "full", "uni3", "uni5", "uni7")


@dataclass
class RunResult:
    ablation: str
    seed: int
    stage1_epoch_loss: list[float]
    stage2_epoch_loss: list[float]
    mdice_stage1: float  # pseudo mask after stage 1
    mdice_stage2: float  # decoder after stage 2
    mdice_unseen: float  # decoder after stage 2, unseen split
    seconds: float
    loss_tsv: str
    decoder_frozen_stage1: bool  # decoder bit-identical to init after stage 1
    backbone_frozen: bool  # backbone bit-identical to init after both stages


def desk_data(seed: int, n_train: int = 200, n_test: int = 50) -> tuple[list[SamplePair], list[SamplePair], list[SamplePair]]:
    return (
        gen_synthetic(GenSpec(n=n_train), seed),
        gen_synthetic(GenSpec(n=n_test, split="test-seen"), seed),
        gen_synthetic(GenSpec(n=n_test, split="test-unseen"), seed),
    )


def two_stage_run(
    ablation: str = "full",
    seed: int = 0,
    model_cfg: ModelConfig = DESK_MODEL,
    train_cfg: TrainConfig = DESK_TRAIN,
    data=None,
) -> RunResult:
    """Train both stages, scoring the held-out split between them and at the end."""
    train, seen, unseen = data or desk_data(seed)
    mc = apply_ablation(model_cfg, ablation)
    tc = dataclasses.replace(train_cfg, seed=seed)
    start = time.perf_counter()
    model = build_model(mc, tc)
    init = _snapshot(model, ("backbone.", "decoder."))
    trainer = Trainer(model, train, tc)
    trainer.run(max_steps=tc.epochs_stage1 * trainer.steps_per_epoch)
    mdice1 = evaluate_mdice(model, seen, "pseudo")
    decoder_frozen = _unchanged(model, init, "decoder.")
    trainer.run()
    return RunResult(
        ablation,
        seed,
        trainer.epoch_means(1),
        trainer.epoch_means(2),
        mdice1,
        evaluate_mdice(model, seen, "decoder"),
        evaluate_mdice(model, unseen, "decoder"),
        time.perf_counter() - start,
        trainer.loss_tsv(),
        decoder_frozen,
        _unchanged(model, init, "backbone."),
    )


def _snapshot(model, prefixes) -> dict:
    return {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith(prefixes)}


def _unchanged(model, snapshot: dict, prefix: str) -> bool:
    now = _snapshot(model, (prefix,))
    return bool(now) and all(snapshot[n] == b for n, b in now.items())


def count_violations(values: list[float]) -> int:
    """Number of epochs whose mean did not go down."""
    return sum(b >= a for a, b in zip(values, values[1:]))


def median(values) -> float:
    return float(statistics.median(values))
