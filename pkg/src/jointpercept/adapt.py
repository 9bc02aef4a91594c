"""Downstream adaptation: zero-shot inference, prompt tuning, fine-tuning, trainable-parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .head import CLASSIFICATION_KINDS, TaskInstance, feature_head_logits, predict, smoothed_nll, task_loss
from .model import Model, ModelConfig, param_group, param_shapes
from .pretrain import OptimizerState, TrainConfig, adamw_step, clip_gradients, lr_at
from .tasks import SMOOTHING, SyntheticDataset, TaskContext, sample_batch

MODES = ("pretrain", "prompt_tune", "finetune")
PROMPT_TUNE_GROUPS = frozenset({"spe", "tokenizer_ln", "encoder_ln", "prompts", "adapt_head"})
FINETUNE_MODES = ("joint_prob", "feature_head")


def is_classification(kind: str) -> bool:
    return kind in CLASSIFICATION_KINDS or kind == "position_classification"


def trainability_mask(names, mode: str) -> dict[str, bool]:
    """Which parameters are optimised in ``mode``.

    ``prompt_tune`` trains exactly the SPE embedding, every layer norm,
    the prompts and the adaptation head; ``pretrain`` trains the shared
    backbone only; ``finetune`` trains everything present.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    out = {}
    for n in names:
        g = param_group(n)
        if mode == "prompt_tune":
            out[n] = g in PROMPT_TUNE_GROUPS
        elif mode == "pretrain":
            out[n] = g not in ("prompts", "adapt_head", "feature_head")
        else:
            out[n] = True
    return out


def count_trainable(config: ModelConfig, mode: str = "prompt_tune", n_classes: int | None = None) -> int:
    """Exact number of trainable scalars, derived from shapes alone."""
    shapes = param_shapes(config, prompts=mode == "prompt_tune", n_classes=n_classes)
    mask = trainability_mask(shapes, mode)
    return int(sum(int(np.prod(s)) for n, s in shapes.items() if mask[n]))


def census(model_or_shapes) -> dict[str, int]:
    """Parameter count per group plus ``total``."""
    if isinstance(model_or_shapes, Model):
        sizes = {n: t.size for n, t in model_or_shapes.params.items()}
    else:
        sizes = {n: int(np.prod(s)) for n, s in model_or_shapes.items()}
    out: dict[str, int] = {}
    for n, s in sizes.items():
        g = param_group(n)
        out[g] = out.get(g, 0) + s
    out = dict(sorted(out.items()))
    out["total"] = sum(out.values())
    return out


@dataclass
class AdaptConfig:
    steps: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup: int = 0
    clip: float = 5.0
    batch_size: int = 8
    seed: int = 0

    def schedule(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, warmup=self.warmup, steps=self.steps,
                           clip=self.clip, drop_path=0.0, workers=1, seed=self.seed)


def zero_shot(model: Model, inst: TaskInstance) -> tuple[np.ndarray, np.ndarray]:
    """Predictions from the pre-trained joint probability alone; parameters are untouched."""
    return predict(inst, model, use_head=False)


def leak_audit(model: Model, loss: nc.Tensor) -> list[str]:
    """Backpropagate ``loss`` and list every frozen parameter that received a non-zero gradient."""
    for t in model.params.values():
        t.grad = np.zeros_like(t.data)
    nc.backward(loss)
    return [n for n, t in model.params.items() if not t.requires_grad and np.any(t.grad != 0)]


def _optimise(model: Model, cfg: AdaptConfig, loss_fn, mask: dict[str, bool]) -> list[dict]:
    sched = cfg.schedule()
    state = OptimizerState()
    trainable = [n for n, on in mask.items() if on]
    log = []
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        model.zero_grad()
        with nc.fresh_tape():
            loss = loss_fn(rng)
            nc.backward(loss)
        grads = {n: model.params[n].grad for n in trainable}
        for n, t in model.params.items():
            if not mask[n] and np.any(t.grad != 0):
                raise AssertionError(f"frozen parameter {n} received a gradient")
        grads, norm = clip_gradients(grads, cfg.clip)
        lr = lr_at(step, sched)
        adamw_step(model.params, grads, state, lr, cfg.weight_decay)
        log.append({"step": step, "loss": loss.item(), "lr": lr, "grad_norm": norm})
    model.zero_grad()
    return log


def _subset_sampler(kind: str, ds: SyntheticDataset, ctx: TaskContext, indices, batch: int):
    indices = np.arange(len(ds)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise ValueError("no training examples")

    def draw(rng):
        pick = rng.choice(indices, size=min(batch, len(indices)), replace=False)
        return sample_batch(kind, ds, ctx, rng, batch, indices=pick)

    return draw


def prompt_tune(model: Model, kind: str, ds: SyntheticDataset, ctx: TaskContext, cfg: AdaptConfig,
                indices=None, n_classes: int | None = None, prompt_seed: int = 0) -> tuple[Model, list[dict]]:
    """Return a prompt-tuned copy of ``model``; the backbone stays bit-identical.

    Classification kinds get an adaptation head (``w = 0, b = 0, alpha = 1``),
    so zero steps reproduce the zero-shot predictions exactly.
    """
    m = model.copy()
    m.add_prompts(prompt_seed)
    use_head = is_classification(kind)
    draw = _subset_sampler(kind, ds, ctx, indices, cfg.batch_size)
    if use_head:
        m.add_adapt_head(n_classes or len(draw(np.random.default_rng(0)).targets))
    mask = trainability_mask(m.params, "prompt_tune")
    m.set_trainable(mask)
    log = _optimise(m, cfg, lambda rng: task_loss(draw(rng), m, training=False, rng=rng, use_head=use_head), mask)
    return m, log


def finetune(model: Model, kind: str, ds: SyntheticDataset, ctx: TaskContext, cfg: AdaptConfig,
             mode: str = "joint_prob", indices=None, n_classes: int | None = None,
             head_seed: int = 0) -> tuple[Model, list[dict]]:
    """Return a fully fine-tuned copy of ``model``.

    ``joint_prob`` keeps the shared task loss; ``feature_head`` trains a fresh
    linear classifier on ``f(x)`` with label-smoothed cross-entropy.
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown fine-tune mode {mode!r}")
    if mode == "feature_head" and not is_classification(kind):
        raise nc.UsageError(f"feature_head fine-tuning needs a classification task, not {kind!r}")
    m = model.copy()
    draw = _subset_sampler(kind, ds, ctx, indices, cfg.batch_size)
    if mode == "feature_head":
        probe = draw(np.random.default_rng(0))
        m.add_feature_head(n_classes or len(probe.targets), head_seed)

        def loss_fn(rng):
            inst = draw(rng)
            return smoothed_nll(feature_head_logits(m, inst), inst.truth, SMOOTHING)
    else:
        def loss_fn(rng):
            return task_loss(draw(rng), m, training=False, rng=rng)
    mask = trainability_mask(m.params, "finetune")
    m.set_trainable(mask)
    return m, _optimise(m, cfg, loss_fn, mask)
