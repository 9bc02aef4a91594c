"""Task metrics: classification accuracy, in-batch retrieval R@1, per-token prediction accuracy."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .head import CLASSIFICATION_KINDS, feature_head_predict, predict
from .tasks import SyntheticDataset, TaskContext, sample_batch


@dataclass
class Metric:
    kind: str
    metric: str
    value: float
    chance: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metric_name(kind: str) -> str:
    if kind.endswith("retrieval"):
        return "r@1"
    if kind in ("masked_lm", "masked_lm_image", "autoregressive_lm", "captioning"):
        return "token_accuracy"
    return "accuracy"


def _is_classification(kind: str) -> bool:
    return kind in CLASSIFICATION_KINDS or kind in ("position_classification", "vqa")


def evaluate(model, kind: str, ds: SyntheticDataset, ctx: TaskContext, n_batches: int = 20, batch: int = 8,
             seed: int = 0, use_head: bool = False, indices: np.ndarray | None = None,
             feature_head: bool = False) -> Metric:
    """Score ``model`` on ``kind`` without touching its parameters.

    Classification-style kinds sweep ``indices`` (all items by default) in
    order; retrieval and language-modelling kinds draw ``n_batches`` random
    batches from a generator seeded with ``seed``; retrieval is scored in
    both directions. ``use_head`` scores with the adaptation head and
    ``feature_head`` with the fine-tuned linear classifier.
    """
    if feature_head and not _is_classification(kind):
        raise ValueError(f"feature-head evaluation needs a classification kind, not {kind!r}")
    rng = np.random.default_rng(seed)
    correct = 0
    total = 0
    chance = []
    if _is_classification(kind):
        idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
        batches = [idx[i:i + batch] for i in range(0, len(idx), batch)]
    else:
        batches = [None] * n_batches
    for b in batches:
        if kind.endswith("retrieval"):
            for direction in ("a2b", "b2a"):
                inst = sample_batch(kind, ds, ctx, rng, batch, indices=b, direction=direction)
                pred, _ = predict(inst, model, use_head)
                correct += int((pred == inst.truth).sum())
                total += inst.n_queries
                chance.extend([1.0 / len(inst.targets)] * inst.n_queries)
            continue
        inst = sample_batch(kind, ds, ctx, rng, batch, indices=b)
        if inst.n_queries == 0:
            continue
        pred = feature_head_predict(model, inst) if feature_head else predict(inst, model, use_head)[0]
        correct += int((pred == inst.truth).sum())
        total += inst.n_queries
        chance.extend([1.0 / len(inst.targets)] * inst.n_queries)
    value = correct / total if total else float("nan")
    return Metric(kind, metric_name(kind), value, float(np.mean(chance)) if chance else float("nan"), total)
