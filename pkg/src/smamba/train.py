"""Two-stage training: Adam, stage-wise freeze rules, deterministic epoch loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SamplePair, check_scales, resize_pair
from .losses import LossConfig, stage1_loss, stage2_loss
from .metrics import mdice_miou
from .model import SamMamba, model_forward, param_group
from .tensor import NonFiniteError, Parameter, backward, default_dtype, no_grad, precision, sigmoid

__all__ = [
    "NonFiniteLossError",
    "AdamState",
    "adam_step",
    "stage_groups",
    "trainable_names",
    "freeze_ledger",
    "Trainer",
    "LossRecord",
    "build_model",
    "predict",
    "evaluate_mdice",
]


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of ``params`` in place.

    Only names present in ``grads`` are touched. A non-finite gradient aborts
    before any parameter changes.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if params[name].shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def stage_groups(stage: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[str, ...]:
    """Parameter groups updated in each stage; the backbone never is."""
    if stage == 1:
        return ("prior", "adapter", "head")
    if stage == 2:
        head = train_cfg.stage2_aux_sup or not model_cfg.stop_grad_prompt
        return ("prior", "adapter", "decoder") + (("head",) if head else ())
    raise ValueError(f"unknown stage {stage}")


def trainable_names(model: SamMamba, stage: int, train_cfg: TrainConfig) -> list[str]:
    groups = stage_groups(stage, model.cfg, train_cfg)
    return [n for n, p in model.named_parameters() if p.requires_grad and param_group(n) in groups]


def freeze_ledger(model: SamMamba, train_cfg: TrainConfig) -> list[tuple[str, str, bool, bool]]:
    """``(name, group, trained in stage 1, trained in stage 2)`` for every parameter."""
    s1 = set(trainable_names(model, 1, train_cfg))
    s2 = set(trainable_names(model, 2, train_cfg))
    return [(n, param_group(n), n in s1, n in s2) for n, _ in model.named_parameters()]


def build_model(model_cfg: ModelConfig, train_cfg: TrainConfig) -> SamMamba:
    with precision(train_cfg.precision):
        return SamMamba(model_cfg, seed=train_cfg.seed)


def _stack(pairs: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in pairs]), np.stack([p.mask for p in pairs])


@dataclass
class LossRecord:
    stage: int
    epoch: int
    step: int
    loss: float


class Trainer:
    """Runs the stages epoch by epoch; all randomness comes from one PCG64 stream.

    Each epoch draws a permutation of the training set and a shuffled,
    balanced scale plan: every step's scale is uniform over the scale set,
    while each epoch sees the scales in equal proportion (up to one step), so
    epoch-mean losses are not skewed by the augmentation mix. Position and RNG state are exposed through :meth:`state_dict` so a
    run can stop after any step and resume exactly.
    """

    def __init__(self, model: SamMamba, data: list[SamplePair], cfg: TrainConfig, stages: Iterable[int] = (1, 2)):
        if not data:
            raise ValueError("training needs at least one sample")
        self.model = model
        self.data = list(data)
        self.cfg = cfg
        self.stages = tuple(stages)
        self.loss_cfg = LossConfig(cfg.loss_kernel, cfg.loss_gain, cfg.loss_smooth)
        self.scales = check_scales(cfg.scales)
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.stage_idx = 0
        self.epoch = 0
        self.step = 0
        self.perm: np.ndarray | None = None
        self.scale_plan: np.ndarray | None = None
        self.adam = AdamState()
        self.history: list[LossRecord] = []
        self.params = dict(model.named_parameters())
        self.min_size = max(model.prior.max_kernel, model.cfg.patch)

    # -- bookkeeping -------------------------------------------------------------------

    @property
    def stage(self) -> int | None:
        return self.stages[self.stage_idx] if self.stage_idx < len(self.stages) else None

    def epochs_for(self, stage: int) -> int:
        return self.cfg.epochs_stage1 if stage == 1 else self.cfg.epochs_stage2

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.data) // self.cfg.batch)

    @property
    def done(self) -> bool:
        return self.stage is None

    def state_dict(self) -> dict:
        return {
            "stage_idx": self.stage_idx,
            "stages": list(self.stages),
            "epoch": self.epoch,
            "step": self.step,
            "perm": None if self.perm is None else [int(i) for i in self.perm],
            "scale_plan": None if self.scale_plan is None else [int(i) for i in self.scale_plan],
            "rng": self.rng.bit_generator.state,
            "history": [[r.stage, r.epoch, r.step, r.loss] for r in self.history],
        }

    def load_state_dict(self, state: dict, adam: AdamState) -> None:
        self.stages = tuple(state["stages"])
        self.stage_idx = state["stage_idx"]
        self.epoch = state["epoch"]
        self.step = state["step"]
        self.perm = None if state["perm"] is None else np.asarray(state["perm"], dtype=np.int64)
        plan = state.get("scale_plan")
        self.scale_plan = None if plan is None else np.asarray(plan, dtype=np.int64)
        self.rng.bit_generator.state = json.loads(json.dumps(state["rng"]))
        self.history = [LossRecord(int(s), int(e), int(k), float(v)) for s, e, k, v in state["history"]]
        self.adam = adam

    # -- training ----------------------------------------------------------------------

    def _loss(self, stage: int, images: np.ndarray, masks: np.ndarray):
        out = model_forward(images, self.model, run_decoder=stage == 2)
        if stage == 1:
            return stage1_loss(masks, out.pseudo_mask_logits, self.loss_cfg)
        return stage2_loss(masks, out.decoder_logits, out.pseudo_mask_logits, self.cfg.stage2_aux_sup, self.loss_cfg)

    def train_step(self) -> float:
        stage = self.stage
        if self.perm is None:
            self.perm = self.rng.permutation(len(self.data))
            self.scale_plan = self._draw_scale_plan()
        idx = self.perm[self.step * self.cfg.batch : (self.step + 1) * self.cfg.batch]
        scale = self.scales[int(self.scale_plan[self.step])]
        batch = [resize_pair(self.data[i], scale, self.model.cfg.patch, self.min_size) for i in idx]
        images, masks = _stack(batch)
        names = trainable_names(self.model, stage, self.cfg)
        with precision(self.cfg.precision):
            try:
                loss = self._loss(stage, images, masks)
            except NonFiniteError as exc:
                raise NonFiniteLossError(f"stage {stage} epoch {self.epoch} step {self.step}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(f"stage {stage} epoch {self.epoch} step {self.step}: loss is {value}")
            grads = backward(loss, [self.params[n] for n in names])
        adam_step(self.params, dict(zip(names, grads)), self.adam, self.cfg)
        self.history.append(LossRecord(stage, self.epoch, self.step, value))
        self._advance()
        return value

    def _draw_scale_plan(self) -> np.ndarray:
        k = len(self.scales)
        n = self.steps_per_epoch
        # a random offset spreads the leftover steps evenly over the scales
        base = (np.arange(n) + int(self.rng.integers(k))) % k
        return self.rng.permutation(base)

    def _advance(self) -> None:
        self.step += 1
        if self.step < self.steps_per_epoch:
            return
        self.step = 0
        self.perm = None
        self.scale_plan = None
        self.epoch += 1
        self._skip_finished_stages()

    def _skip_finished_stages(self) -> None:
        while self.stage is not None and self.epoch >= self.epochs_for(self.stage):
            self.stage_idx += 1
            self.epoch = 0
            self.adam = AdamState()  # each stage starts with fresh moments

    def run(self, max_steps: int | None = None, on_epoch: Callable[["Trainer"], None] | None = None) -> list[LossRecord]:
        """Train until all stages finish (or ``max_steps`` more steps have run)."""
        self._skip_finished_stages()
        taken = 0
        while not self.done and (max_steps is None or taken < max_steps):
            epoch_before = (self.stage_idx, self.epoch)
            self.train_step()
            taken += 1
            if on_epoch is not None and (self.stage_idx, self.epoch) != epoch_before:
                on_epoch(self)
        return self.history

    def epoch_means(self, stage: int) -> list[float]:
        rows: dict[int, list[float]] = {}
        for r in self.history:
            if r.stage == stage:
                rows.setdefault(r.epoch, []).append(r.loss)
        return [float(np.mean(rows[e])) for e in sorted(rows)]

    def loss_tsv(self) -> str:
        lines = ["stage\tepoch\tstep\tloss"]
        lines += [f"{r.stage}\t{r.epoch}\t{r.step}\t{r.loss!r}" for r in self.history]
        return "\n".join(lines) + "\n"


# --- inference helpers -------------------------------------------------------------------


def predict(model: SamMamba, images: np.ndarray, which: str = "decoder", batch: int = 8, dtype=None) -> np.ndarray:
    """Sigmoid probabilities ``(N, H, W)`` from the decoder or the pseudo-mask head."""
    if which not in ("decoder", "pseudo"):
        raise ValueError("which must be 'decoder' or 'pseudo'")
    dtype = dtype or model.head.weight.dtype
    outs = []
    with no_grad(), default_dtype(dtype):
        for start in range(0, len(images), batch):
            out = model_forward(images[start : start + batch], model, run_decoder=which == "decoder")
            logits = out.decoder_logits if which == "decoder" else out.pseudo_mask_logits
            outs.append(sigmoid(logits).data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def evaluate_mdice(model: SamMamba, pairs: list[SamplePair], which: str = "decoder") -> float:
    images, masks = _stack(pairs)
    probs = predict(model, images, which)
    return float(np.mean([mdice_miou(p, g)[0] for p, g in zip(probs, masks)]))
