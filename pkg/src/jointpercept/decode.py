"""Auto-regressive decoding with SPE prediction slots."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .head import similarity_logits
from .tasks import TaskContext, ar_sequence
from .tokenizers import N_SPECIAL


def vocab_features(model, ctx: TaskContext) -> nc.Tensor:
    """Target-stream features of every vocabulary word, ``[V - 3, D]``."""
    targets = ctx.vocab_targets
    return model.features(targets, np.zeros(len(targets), np.int64), "target")


def slot_logits(model, ctx: TaskContext, seq, fy: nc.Tensor | None = None) -> np.ndarray:
    """``[n_slots, V - 3]`` logits of every prediction slot of ``seq``."""
    with nc.no_grad():
        fy = vocab_features(model, ctx) if fy is None else fy
        fx = model.features([seq], seq.slot_rows, "input")
        return similarity_logits(fx, fy, model.params["log_tau"]).data


def teacher_forced(model, ctx: TaskContext, ids: Sequence[int], visual=None, fy=None) -> np.ndarray:
    """Argmax word id at every slot of one pass over the full word sequence ``ids``."""
    seq = ar_sequence(ctx, ids, visual)
    return slot_logits(model, ctx, seq, fy).argmax(axis=-1) + N_SPECIAL


def greedy_decode(model, ctx: TaskContext, n_words: int, visual=None, fy=None) -> list[int]:
    """Generate ``n_words`` word ids one at a time, each from a single slot after the words so far."""
    with nc.no_grad():
        fy = vocab_features(model, ctx) if fy is None else fy
    out: list[int] = []
    for t in range(1, n_words + 1):
        seq = ar_sequence(ctx, out, visual, n_slots=1, first=t)
        out.append(int(slot_logits(model, ctx, seq, fy)[0].argmax()) + N_SPECIAL)
    return out
