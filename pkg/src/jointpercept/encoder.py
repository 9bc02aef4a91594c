"""Weight-shared post-norm Transformer encoder and attention-mask construction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .tokenizers import TokenSequence


@dataclass
class EncoderConfig:
    n_layers: int = 2
    dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 64
    drop_path: float = 0.0
    max_len: int = 64

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.drop_path <= 1.0:
            raise ValueError("drop_path must lie in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @classmethod
    def bert_base(cls) -> "EncoderConfig":
        return cls(n_layers=12, dim=768, n_heads=12, ffn_dim=3072, drop_path=0.1, max_len=512)

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls()


LAYER_SHAPES = {
    "attn.wq": ("d", "d"), "attn.bq": ("d",),
    "attn.wk": ("d", "d"), "attn.bk": ("d",),
    "attn.wv": ("d", "d"), "attn.bv": ("d",),
    "attn.wo": ("d", "d"), "attn.bo": ("d",),
    "ln1.g": ("d",), "ln1.b": ("d",),
    "ffn.w1": ("d", "f"), "ffn.b1": ("f",),
    "ffn.w2": ("f", "d"), "ffn.b2": ("d",),
    "ln2.g": ("d",), "ln2.b": ("d",),
}


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    sizes = {"d": cfg.dim, "f": cfg.ffn_dim}
    return {f"enc.{i}.{k}": tuple(sizes[s] for s in v)
            for i in range(cfg.n_layers) for k, v in LAYER_SHAPES.items()}


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

@dataclass
class MaskLayout:
    """Row roles for mask construction; rows in neither set are conditioning context."""

    length: int
    word_rows: np.ndarray
    slot_rows: np.ndarray
    slot_predicts: np.ndarray

    @classmethod
    def of(cls, seq: TokenSequence) -> "MaskLayout":
        return cls(len(seq), seq.word_rows, seq.slot_rows, seq.slot_predicts)


def build_mask(regime: str, layout: MaskLayout | TokenSequence | int) -> np.ndarray:
    """``L x L`` boolean mask, ``mask[q, k]`` true when query row q may attend key row k.

    ``ar_spe``: context rows (leading SPE, visual prefix) attend to context
    only; word j attends to context and words 1..j; the slot predicting word t
    attends to context, itself and words 1..t-1. No word ever sees a slot.
    """
    if isinstance(layout, int):
        layout = MaskLayout(layout, np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    elif isinstance(layout, TokenSequence):
        layout = MaskLayout.of(layout)
    n = layout.length
    if regime == "bidirectional":
        return np.ones((n, n), dtype=bool)
    if regime != "ar_spe":
        raise ValueError(f"unknown regime {regime!r}")
    words = np.asarray(layout.word_rows, dtype=np.int64)
    slots = np.asarray(layout.slot_rows, dtype=np.int64)
    preds = np.asarray(layout.slot_predicts, dtype=np.int64)
    if len(slots) != len(preds):
        raise nc.ShapeError("each slot needs exactly one predicted position")
    rows = np.concatenate([words, slots])
    if len(rows) and (rows.min() < 0 or rows.max() >= n or len(np.unique(rows)) != len(rows)):
        raise nc.ShapeError(f"layout rows inconsistent with sequence length {n}")
    if len(preds) and (preds.min() < 1 or preds.max() > len(words) + 1):
        raise nc.ShapeError("slot predicts a position outside the word span")
    context = np.ones(n, dtype=bool)
    context[rows] = False
    mask = np.zeros((n, n), dtype=bool)
    mask[:, context] = True
    mask[np.ix_(context, ~context)] = False
    for j, r in enumerate(words):
        mask[r, words[: j + 1]] = True
    for s, t in zip(slots, preds):
        mask[s, s] = True
        mask[s, words[: t - 1]] = True
    return mask


def batch_masks(seqs, lmax: int | None = None) -> np.ndarray:
    """Stack per-sequence masks into ``[B, Lmax, Lmax]``; padding rows and columns are closed."""
    lmax = lmax or max(len(s) for s in seqs)
    out = np.zeros((len(seqs), lmax, lmax), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        out[i, :n, :n] = build_mask(s.regime, s)
    return out


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _drop_path(branch: nc.Tensor, p: float, rng: np.random.Generator) -> nc.Tensor:
    b = branch.shape[0]
    if p >= 1.0:
        keep = np.zeros(b)
    else:
        keep = (rng.random(b) >= p) / (1.0 - p)
    factor = np.broadcast_to(keep.reshape((b,) + (1,) * (branch.ndim - 1)), branch.shape)
    return nc.mul(branch, nc.Tensor(factor, dtype=branch.dtype))


def _attention(x: nc.Tensor, mask: np.ndarray, p: dict, pre: str, cfg: EncoderConfig, n_prompts: int = 0,
               gate: nc.Tensor | None = None) -> nc.Tensor:
    b, n, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim

    def heads(w, bias):
        y = nc.reshape(nc.linear(x, p[pre + w], p[pre + bias]), (b, n, h, dh))
        return nc.transpose(y, (0, 2, 1, 3))

    q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask4 = np.broadcast_to(mask[:, None], (b, h, n, n))
    if n_prompts == 0 or gate is None:
        ctx = nc.matmul(nc.masked_softmax(scores, mask4), v)
    else:
        # tokens and prompts get separate softmaxes; the prompt branch is scaled by the layer gate
        lo, hi = 1, 1 + n_prompts
        al = slice(None)
        s_tok = nc.concat([nc.getitem(scores, (al, al, al, slice(0, lo))),
                           nc.getitem(scores, (al, al, al, slice(hi, None)))], axis=3)
        v_tok = nc.concat([nc.getitem(v, (al, al, slice(0, lo))), nc.getitem(v, (al, al, slice(hi, None)))], axis=2)
        m_tok = np.concatenate([mask4[..., :lo], mask4[..., hi:]], axis=-1)
        ctx_tok = nc.matmul(nc.masked_softmax(s_tok, m_tok), v_tok)
        a_pr = nc.masked_softmax(nc.getitem(scores, (al, al, al, slice(lo, hi))), mask4[..., lo:hi])
        ctx_pr = nc.matmul(a_pr, nc.getitem(v, (al, al, slice(lo, hi))))
        g = nc.broadcast_to(nc.reshape(gate, (1, 1, 1, 1)), ctx_pr.shape)
        ctx = nc.add(ctx_tok, nc.mul(g, ctx_pr))
    ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return nc.linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])


def encoder_layer(x: nc.Tensor, mask: np.ndarray, params: dict, i: int, cfg: EncoderConfig,
                  training: bool = False, rng: np.random.Generator | None = None, n_prompts: int = 0,
                  gate: nc.Tensor | None = None) -> nc.Tensor:
    """One post-norm block. With ``n_prompts`` rows injected after the leading SPE and a
    ``gate``, attention to prompts is a separate softmax branch scaled by the gate."""
    pre = f"enc.{i}."
    dp = training and cfg.drop_path > 0.0
    a = _attention(x, mask, params, pre, cfg, n_prompts, gate)
    if dp:
        a = _drop_path(a, cfg.drop_path, rng)
    x = nc.layer_norm(nc.add(x, a), params[pre + "ln1.g"], params[pre + "ln1.b"])
    f = nc.linear(nc.gelu(nc.linear(x, params[pre + "ffn.w1"], params[pre + "ffn.b1"])),
                  params[pre + "ffn.w2"], params[pre + "ffn.b2"])
    if dp:
        f = _drop_path(f, cfg.drop_path, rng)
    return nc.layer_norm(nc.add(x, f), params[pre + "ln2.g"], params[pre + "ln2.b"])


def inject_prompts(x: nc.Tensor, mask: np.ndarray, layer_prompts: nc.Tensor, valid: np.ndarray | None = None
                   ) -> tuple[nc.Tensor, np.ndarray]:
    """Insert ``n`` prompt rows right after the leading SPE of every sequence.

    ``x`` is ``[B, L, D]``, ``layer_prompts`` ``[n, D]``. Every valid token may
    attend to the prompts; prompt rows attend only to prompts (their outputs
    are discarded by :func:`strip_prompts`).
    """
    b, n_tok, d = x.shape
    n = layer_prompts.shape[0]
    if n == 0:
        return x, mask
    if valid is None:
        valid = np.ones((b, n_tok), dtype=bool)
    pr = nc.broadcast_to(nc.reshape(layer_prompts, (1, n, d)), (b, n, d))
    ext = nc.concat([nc.getitem(x, (slice(None), slice(0, 1))), pr, nc.getitem(x, (slice(None), slice(1, None)))],
                    axis=1)
    m = np.zeros((b, n_tok + n, n_tok + n), dtype=bool)
    keep = np.r_[0, np.arange(1 + n, n_tok + n)]
    m[np.ix_(np.arange(b), keep, keep)] = mask
    m[:, keep, 1:1 + n] = valid[:, :, None]
    m[:, 1:1 + n, 1:1 + n] = True
    return ext, m


def strip_prompts(x: nc.Tensor, n: int) -> nc.Tensor:
    if n == 0:
        return x
    return nc.concat([nc.getitem(x, (slice(None), slice(0, 1))), nc.getitem(x, (slice(None), slice(1 + n, None)))],
                     axis=1)


def encode(x: nc.Tensor, mask: np.ndarray, params: dict, cfg: EncoderConfig, training: bool = False,
           rng: np.random.Generator | None = None, prompts: nc.Tensor | None = None,
           valid: np.ndarray | None = None, gates: nc.Tensor | None = None) -> nc.Tensor:
    """Run the encoder stack over ``[L, D]`` or ``[B, L, D]`` embeddings.

    ``prompts`` (``[n_layers, n, D]``) are injected fresh at every layer.
    ``gates`` (``[n_layers]``) scale each layer's prompt branch; at zero the
    prompted encoder is exactly the plain one. Without gates prompts share
    one softmax with the tokens. Drop path is active only when ``training``
    is true and needs ``rng``.
    """
    single = x.ndim == 2
    if single:
        x = nc.reshape(x, (1,) + x.shape)
        mask = mask[None]
        valid = None if valid is None else valid[None]
    b, n_tok, _ = x.shape
    if mask.shape != (b, n_tok, n_tok):
        raise nc.ShapeError(f"mask shape {mask.shape} does not match {n_tok} tokens")
    if n_tok > cfg.max_len:
        raise nc.ShapeError(f"sequence length {n_tok} exceeds max_len {cfg.max_len}")
    if training and cfg.drop_path > 0.0 and rng is None:
        raise ValueError("training-mode drop path needs an rng")
    n_prompts = 0 if prompts is None else prompts.shape[1]
    for i in range(cfg.n_layers):
        if n_prompts:
            h, m = inject_prompts(x, mask, nc.getitem(prompts, i), valid)
            g = None if gates is None else nc.getitem(gates, i)
            x = strip_prompts(encoder_layer(h, m, params, i, cfg, training, rng, n_prompts, g), n_prompts)
        else:
            x = encoder_layer(x, mask, params, i, cfg, training, rng)
    return nc.reshape(x, x.shape[1:]) if single else x


def representation(features: nc.Tensor, spe_index: int = 0) -> nc.Tensor:
    """The encoder output row at ``spe_index`` (``features`` is ``[L, D]``)."""
    if not 0 <= spe_index < features.shape[0]:
        raise IndexError(f"spe_index {spe_index} out of range for {features.shape[0]} tokens")
    return nc.getitem(features, spe_index)
