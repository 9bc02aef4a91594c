"""Joint-probability task formulation.

Every task scores an input representation against a set of candidate target
representations with ``cos(f(x), f(y)) / tau``; inference picks the most
likely candidate and training minimises the (optionally label-smoothed)
negative log-likelihood of the true candidate. ``tau = exp(log_tau)`` keeps
the temperature positive without clipping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .tokenizers import KIND_SPE, TokenSequence

CLASSIFICATION_KINDS = ("image_classification", "video_classification", "nlu", "classification")


@dataclass
class TaskInstance:
    """One batch of a task: input sequences, candidate targets and the truth links.

    Each *query* is one matching SPE row of one input sequence (a plain
    classification input has a single query at row 0; a language-modelling
    input has one per prediction slot). ``truth[q]`` is the index of the
    correct target for query q.
    """

    kind: str
    inputs: list[TokenSequence]
    targets: list[TokenSequence]
    truth: np.ndarray
    query_input: np.ndarray
    query_row: np.ndarray
    target_row: np.ndarray | None = None
    loss_weight: float = 1.0
    smoothing: float = 0.0
    labels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.int64)
        self.query_input = np.asarray(self.query_input, dtype=np.int64)
        self.query_row = np.asarray(self.query_row, dtype=np.int64)
        if self.target_row is None:
            self.target_row = np.zeros(len(self.targets), dtype=np.int64)
        self.target_row = np.asarray(self.target_row, dtype=np.int64)

    @property
    def n_queries(self) -> int:
        return len(self.truth)

    def validate(self) -> None:
        if not (len(self.truth) == len(self.query_input) == len(self.query_row)):
            raise ValueError("truth/query arrays differ in length")
        if len(self.targets) == 0:
            raise ValueError("empty target set")
        if len(self.truth) and (self.truth.min() < 0 or self.truth.max() >= len(self.targets)):
            raise ValueError("truth index outside the target set")
        if len(self.query_input) and (self.query_input.min() < 0 or self.query_input.max() >= len(self.inputs)):
            raise ValueError("query refers to a missing input")
        for seqs, name in ((self.inputs, "input"), (self.targets, "target")):
            for s in seqs:
                if s.kinds[0] != KIND_SPE:
                    raise ValueError(f"{name} sequence does not start with SPE")
        for q, (i, r) in enumerate(zip(self.query_input, self.query_row)):
            if self.inputs[i].kinds[r] != KIND_SPE:
                raise ValueError(f"query {q} does not point at an SPE token")
        for s, r in zip(self.targets, self.target_row):
            if s.kinds[r] != KIND_SPE:
                raise ValueError("target row is not an SPE token")


def joint_logit(fx: nc.Tensor, fy: nc.Tensor, log_tau: nc.Tensor) -> nc.Tensor:
    """``cos(fx, fy) / tau`` for two feature vectors: the log of the unnormalised P(x, y)."""
    inv_tau = nc.exp(nc.scale(nc.reshape(log_tau, ()), -1.0))
    return nc.mul(nc.cosine_sim(fx, fy), inv_tau)


def similarity_logits(fx: nc.Tensor, fy: nc.Tensor, log_tau: nc.Tensor) -> nc.Tensor:
    """``[Q, D] x [K, D] -> [Q, K]`` matrix of cosine / tau, as one product of unit rows."""
    cos = nc.matmul(nc.l2_normalize(fx), nc.transpose(nc.l2_normalize(fy)))
    inv_tau = nc.exp(nc.scale(log_tau, -1.0))
    return nc.mul(cos, nc.broadcast_to(nc.reshape(inv_tau, (1, 1)), cos.shape))


def adapted_scores(fx: nc.Tensor, fy: nc.Tensor, log_tau: nc.Tensor, alpha: nc.Tensor, w: nc.Tensor,
                   b: nc.Tensor) -> nc.Tensor:
    """``alpha * exp(cos/tau) + w_k . fx + b_k`` for every query and class, ``[Q, C]``."""
    q, c = fx.shape[0], fy.shape[0]
    if w.shape != (c, fx.shape[1]) or b.shape != (c,):
        raise nc.ShapeError(f"head shapes {w.shape}/{b.shape} do not match {c} classes of dim {fx.shape[1]}")
    sim = nc.exp(similarity_logits(fx, fy, log_tau))
    mixed = nc.mul(nc.broadcast_to(nc.reshape(alpha, (1, 1)), (q, c)), sim)
    lin = nc.add(nc.matmul(fx, nc.transpose(w)), nc.broadcast_to(nc.reshape(b, (1, c)), (q, c)))
    return nc.add(mixed, lin)


def adapted_score(fx: nc.Tensor, fy_k: nc.Tensor, log_tau: nc.Tensor, alpha: nc.Tensor, w: nc.Tensor,
                  b: nc.Tensor, k: int) -> nc.Tensor:
    """Single-class version of :func:`adapted_scores` (scalar)."""
    if not 0 <= k < w.shape[0]:
        raise IndexError(f"class {k} out of range for {w.shape[0]} classes")
    sim = nc.exp(joint_logit(fx, fy_k, log_tau))
    lin = nc.sum(nc.mul(nc.getitem(w, k), fx))
    return nc.add_n([nc.mul(nc.reshape(alpha, ()), sim), lin, nc.getitem(b, k)])


def smoothed_nll(logits: nc.Tensor, truth: np.ndarray, eps: float) -> nc.Tensor:
    """Mean over rows of ``-sum_k t_k log softmax(logits)_k`` with ``t = (1-eps) onehot + eps/K``."""
    q, k = logits.shape
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != q:
        raise ValueError("one truth index per row required")
    if q and (truth.min() < 0 or truth.max() >= k):
        raise ValueError("truth index out of range")
    t = np.full((q, k), eps / k)
    t[np.arange(q), truth] += 1.0 - eps
    lp = nc.log_softmax(logits, axis=-1)
    return nc.scale(nc.sum(nc.mul(lp, nc.Tensor(t, dtype=logits.dtype))), -1.0 / max(q, 1))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def infer(fx: nc.Tensor, fy: nc.Tensor, log_tau: nc.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood target per query: ``(argmax [Q], probabilities [Q, K])``.

    Ties resolve to the lowest index.
    """
    if fy.shape[0] < 1:
        raise ValueError("empty candidate set")
    with nc.no_grad():
        logits = similarity_logits(fx, fy, log_tau).data
    probs = softmax_np(logits)
    return probs.argmax(axis=-1), probs


# ---------------------------------------------------------------------------
# Model-level helpers
# ---------------------------------------------------------------------------

def instance_features(inst: TaskInstance, model, training: bool = False, rng=None) -> tuple[nc.Tensor, nc.Tensor]:
    """Encode the instance: query features ``[Q, D]`` and target features ``[K, D]``."""
    fx = model.features(inst.inputs, inst.query_row, "input", training, rng, seq_index=inst.query_input)
    fy = model.features(inst.targets, inst.target_row, "target", training, rng)
    return fx, fy


def instance_logits(inst: TaskInstance, model, training: bool = False, rng=None, use_head: bool = False
                    ) -> nc.Tensor:
    fx, fy = instance_features(inst, model, training, rng)
    p = model.params
    if use_head and "head.w" in p:
        return adapted_scores(fx, fy, p["log_tau"], p["head.alpha"], p["head.w"], p["head.b"])
    return similarity_logits(fx, fy, p["log_tau"])


def task_loss(inst: TaskInstance, model, training: bool = False, rng=None, use_head: bool = False) -> nc.Tensor:
    """Weighted, label-smoothed NLL of the true targets, averaged over the instance's queries."""
    inst.validate()
    if inst.n_queries == 0:
        return nc.Tensor(0.0, dtype=model.dtype)
    logits = instance_logits(inst, model, training, rng, use_head)
    loss = smoothed_nll(logits, inst.truth, inst.smoothing)
    return nc.scale(loss, inst.loss_weight) if inst.loss_weight != 1.0 else loss


def feature_head_logits(model, inst: TaskInstance) -> nc.Tensor:
    """Linear classifier on the leading-SPE feature of each input, ``[B, C]``."""
    fx = model.features(inst.inputs, inst.query_row, "input", seq_index=inst.query_input)
    return nc.linear(fx, model.params["fthead.w"], model.params["fthead.b"])


def feature_head_predict(model, inst: TaskInstance) -> np.ndarray:
    with nc.no_grad():
        return feature_head_logits(model, inst).data.argmax(axis=-1)


def predict(inst: TaskInstance, model, use_head: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Argmax prediction and probability vector for every query (no tape)."""
    with nc.no_grad():
        logits = instance_logits(inst, model, use_head=use_head).data
    probs = softmax_np(logits)
    return probs.argmax(axis=-1), probs


def accuracy(inst: TaskInstance, model, use_head: bool = False) -> float:
    pred, _ = predict(inst, model, use_head)
    return float((pred == inst.truth).mean()) if inst.n_queries else float("nan")
