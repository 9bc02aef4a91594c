"""Multi-task pre-training: task sampling, AdamW, cosine schedule, clipping, worker sync."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .head import task_loss
from .model import Model, no_decay
from .tasks import SAMPLER_SOURCES, SyntheticDataset, TaskContext, sample_batch


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """A non-finite value stopped training; the model holds the last good parameters."""

    def __init__(self, step: int, cause: Exception, log: list):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.log = log


@dataclass
class TaskSpec:
    name: str
    kind: str
    weight: float = 1.0
    loss_weight: float | None = None
    batch_size: int = 8
    dataset: str | None = None

    def __post_init__(self):
        if self.kind not in SAMPLER_SOURCES:
            raise ConfigError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.dataset is None:
            self.dataset = SAMPLER_SOURCES[self.kind]


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.05
    warmup: int = 50_000
    steps: int = 500_000
    clip: float = 5.0
    drop_path: float = 0.1
    workers: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.warmup < 0 or self.warmup > max(self.steps, 0):
            raise ConfigError("need 0 <= warmup <= steps")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def reference(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        base = dict(lr=2e-3, weight_decay=0.05, warmup=100, steps=2000, clip=5.0, drop_path=0.1, workers=2)
        base.update(kw)
        return cls(**base)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sample_task(rng: np.random.Generator, weights: Sequence[float]) -> int:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
        raise ConfigError("sampling weights must be non-negative, finite and not all zero")
    return int(rng.choice(len(w), p=w / w.sum()))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` then half-cosine decay to zero at ``cfg.steps``."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = cfg.steps - cfg.warmup
    if span == 0:
        return cfg.lr
    progress = (step - cfg.warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise nc.NumericError(f"non-finite gradient for {name}")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        return {k: (g * s).astype(g.dtype) for k, g in grads.items()}, norm
    return grads, norm


def adamw_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               wd: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update of the parameters named in ``grads``.

    Weight decay is decoupled (``p -= lr * wd * p``) and skipped for
    :func:`~jointpercept.model.no_decay` parameters.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    updates = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise nc.ShapeError(f"optimizer state for {name} does not match the parameter")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.data * (1.0 - lr * wd) if wd and not no_decay(name) else p.data
        new = (new - lr * step).astype(p.dtype)
        if not np.isfinite(new).all():
            raise nc.NumericError(f"update of {name} is not finite")
        updates[name] = (new, m.astype(p.dtype), v.astype(p.dtype))
    for name, (new, m, v) in updates.items():
        params[name].data = new
        state.m[name] = m
        state.v[name] = v


def simulate_workers(model: Model, n_workers: int, step_fn: Callable[[int], nc.Tensor]
                     ) -> tuple[dict[str, np.ndarray], list[float]]:
    """Mean gradient over ``n_workers`` virtual workers.

    ``step_fn(k)`` builds worker k's loss; each worker backpropagates on its
    own tape and gradients are averaged in worker order.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    names = model.trainable()
    total = {n: np.zeros_like(model.params[n].data, dtype=np.float64) for n in names}
    losses = []
    for k in range(n_workers):
        model.zero_grad()
        with nc.fresh_tape():
            loss = step_fn(k)
            nc.backward(loss)
        losses.append(loss.item())
        for n in names:
            total[n] += model.params[n].grad
    model.zero_grad()
    return {n: (g / n_workers).astype(model.params[n].dtype) for n, g in total.items()}, losses


def worker_rng(seed: int, step: int, worker: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, worker])


@dataclass
class StepRecord:
    step: int
    tasks: list[str]
    loss: float
    lr: float
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def make_step_fn(model: Model, specs: Sequence[TaskSpec], datasets: dict[str, SyntheticDataset], ctx: TaskContext,
                 seed: int, step: int, chosen: list[str], training: bool = True):
    weights = [s.weight for s in specs]

    def step_fn(k: int) -> nc.Tensor:
        rng = worker_rng(seed, step, k)
        spec = specs[sample_task(rng, weights)]
        chosen.append(spec.name)
        inst = sample_batch(spec.kind, datasets[spec.dataset], ctx, rng, spec.batch_size)
        if spec.loss_weight is not None:
            inst.loss_weight = spec.loss_weight
        return task_loss(inst, model, training=training, rng=rng)

    return step_fn


def train(cfg: TrainConfig, model: Model, specs: Sequence[TaskSpec], datasets: dict[str, SyntheticDataset],
          ctx: TaskContext, state: OptimizerState | None = None, log_fn: Callable[[StepRecord], None] | None = None,
          start_step: int = 0) -> tuple[list[StepRecord], OptimizerState]:
    """Run ``cfg.steps`` synchronised multi-task updates in place on ``model``.

    Each step, every virtual worker draws one task by sampling weight, builds
    a batch and computes its gradient; the mean gradient is clipped and applied
    with AdamW at the scheduled learning rate. Deterministic given ``cfg.seed``.
    """
    if not specs:
        raise ConfigError("no tasks configured")
    for s in specs:
        if s.dataset not in datasets:
            raise ConfigError(f"task {s.name!r} needs dataset {s.dataset!r}")
    sample_task(np.random.default_rng(0), [s.weight for s in specs])
    # a fresh config object, so models sharing the old one are unaffected
    model.config = replace(model.config, encoder=replace(model.config.encoder, drop_path=cfg.drop_path))
    state = state or OptimizerState()
    log: list[StepRecord] = []
    for step in range(start_step + 1, cfg.steps + 1):
        chosen: list[str] = []
        try:
            fn = make_step_fn(model, specs, datasets, ctx, cfg.seed, step, chosen)
            grads, losses = simulate_workers(model, cfg.workers, fn)
            grads, norm = clip_gradients(grads, cfg.clip)
            lr = lr_at(step, cfg)
            adamw_step(model.params, grads, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        except nc.NumericError as exc:
            model.zero_grad()
            raise TrainingAborted(step, exc, log) from exc
        rec = StepRecord(step, chosen, float(np.mean(losses)), lr, norm)
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return log, state
