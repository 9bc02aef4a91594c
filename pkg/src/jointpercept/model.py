"""Model container: configuration, named parameters, parameter groups, forward helpers."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .encoder import EncoderConfig, batch_masks, encode, encoder_param_shapes
from .tokenizers import TokenizerConfig, TokenSequence, Vocabulary, embed_sequences, tokenizer_param_shapes

INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_prompts: int = 10
    tau_init: float = 0.07

    def __post_init__(self):
        if self.tokenizer.dim != self.encoder.dim:
            raise ValueError("tokenizer and encoder dims differ")

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @classmethod
    def toy(cls, vocab_size: int, **encoder_overrides) -> "ModelConfig":
        enc = EncoderConfig(**encoder_overrides)
        return cls(vocab_size, TokenizerConfig(dim=enc.dim), enc)

    @classmethod
    def bert_base(cls, vocab_size: int = 30522) -> "ModelConfig":
        return cls(vocab_size, TokenizerConfig.reference(), EncoderConfig.bert_base())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(d["vocab_size"], TokenizerConfig(**d["tokenizer"]), EncoderConfig(**d["encoder"]),
                   d.get("n_prompts", 10), d.get("tau_init", 0.07))


def param_shapes(cfg: ModelConfig, prompts: bool = False, n_classes: int | None = None,
                 feature_head: int | None = None) -> dict[str, tuple[int, ...]]:
    """Shapes of every named parameter, without allocating anything."""
    d = cfg.dim
    shapes = {"spe": (d,), "log_tau": (1,)}
    shapes.update(tokenizer_param_shapes(cfg.tokenizer, cfg.vocab_size))
    shapes.update(encoder_param_shapes(cfg.encoder))
    if prompts:
        for stream in ("input", "target"):
            shapes[f"prompt.{stream}"] = (cfg.encoder.n_layers, cfg.n_prompts, d)
            shapes[f"prompt.{stream}_gate"] = (cfg.encoder.n_layers,)
    if n_classes:
        shapes.update({"head.alpha": (1,), "head.w": (n_classes, d), "head.b": (n_classes,)})
    if feature_head:
        shapes.update({"fthead.w": (d, feature_head), "fthead.b": (feature_head,)})
    return shapes


def param_group(name: str) -> str:
    """Coarse group of a parameter name, used by trainability masks and census reports."""
    if name == "spe":
        return "spe"
    if name == "log_tau":
        return "temperature"
    if name.startswith("prompt."):
        return "prompts"
    if name.startswith("head."):
        return "adapt_head"
    if name.startswith("fthead."):
        return "feature_head"
    if name.startswith("tok.ln_"):
        return "tokenizer_ln"
    if name.startswith("tok."):
        return "tokenizer"
    if ".ln1." in name or ".ln2." in name:
        return "encoder_ln"
    return "encoder"


_BIAS_LEAVES = {"bq", "bk", "bv", "bo", "b1", "b2", "b", "patch_b"}


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _BIAS_LEAVES and param_group(name) not in ("tokenizer_ln", "encoder_ln")


def no_decay(name: str) -> bool:
    """Parameters exempt from weight decay: layer norms, biases, temperature, scalars."""
    if param_group(name) in ("tokenizer_ln", "encoder_ln", "temperature"):
        return True
    return is_bias(name) or name == "head.alpha" or name.endswith("_gate")


def _init_value(name: str, shape, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    if name == "log_tau":
        return np.full(shape, math.log(cfg.tau_init))
    if name == "head.alpha":
        return np.ones(shape)
    if name.endswith("_gate"):
        return np.zeros(shape)
    if name.startswith("head.") or name.startswith("fthead.b"):
        return np.zeros(shape)
    leaf = name.rsplit(".", 1)[-1]
    if ".ln" in name or name.startswith("tok.ln_"):
        return np.ones(shape) if leaf == "g" else np.zeros(shape)
    if is_bias(name):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


class Model:
    """Named parameters plus the vocabulary they were built for."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0,
                 dtype=np.float32, params: dict[str, nc.Tensor] | None = None):
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {n: nc.Tensor(_init_value(n, s, rng, config), requires_grad=True, dtype=self.dtype, name=n)
                      for n, s in param_shapes(config).items()}
        self.params = params

    # -- parameter management ------------------------------------------------
    def add_prompts(self, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        for n, s in param_shapes(self.config, prompts=True).items():
            if n.startswith("prompt.") and n not in self.params:
                self.params[n] = nc.Tensor(_init_value(n, s, rng, self.config), True, self.dtype, n)

    def add_adapt_head(self, n_classes: int) -> None:
        for n, s in param_shapes(self.config, n_classes=n_classes).items():
            if n.startswith("head."):
                self.params[n] = nc.Tensor(_init_value(n, s, None, self.config), True, self.dtype, n)

    def add_feature_head(self, n_classes: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        d = self.config.dim
        self.params["fthead.w"] = nc.Tensor(rng.normal(0.0, INIT_STD, (d, n_classes)), True, self.dtype, "fthead.w")
        self.params["fthead.b"] = nc.Tensor(np.zeros(n_classes), True, self.dtype, "fthead.b")

    def set_trainable(self, mask: dict[str, bool]) -> None:
        for n, t in self.params.items():
            t.requires_grad = bool(mask.get(n, False))
            t.grad = np.zeros_like(t.data)

    def trainable(self) -> list[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def copy(self) -> "Model":
        params = {n: nc.Tensor(t.data, t.requires_grad, t.dtype, n) for n, t in self.params.items()}
        return Model(copy.deepcopy(self.config), self.vocab, dtype=self.dtype, params=params)

    def astype(self, dtype) -> "Model":
        params = {n: nc.Tensor(t.data, t.requires_grad, dtype, n) for n, t in self.params.items()}
        return Model(copy.deepcopy(self.config), self.vocab, dtype=dtype, params=params)

    def n_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------
    def encode_sequences(self, seqs: list[TokenSequence], stream: str = "input", training: bool = False,
                         rng: np.random.Generator | None = None) -> nc.Tensor:
        """Encoder features ``[B, Lmax, D]`` for a batch of layouts.

        ``stream`` selects the prompt set (``input`` or ``target``) when prompts exist.
        """
        x, valid = embed_sequences(seqs, self.params)
        mask = batch_masks(seqs, x.shape[1])
        prompts = self.params.get(f"prompt.{stream}")
        gates = self.params.get(f"prompt.{stream}_gate")
        return encode(x, mask, self.params, self.config.encoder, training, rng, prompts, valid, gates)

    def features(self, seqs: list[TokenSequence], rows, stream: str = "input", training: bool = False,
                 rng: np.random.Generator | None = None, seq_index=None) -> nc.Tensor:
        """Gather encoder outputs ``[Q, D]`` at (sequence, row) pairs.

        ``seq_index[q]`` names the sequence of query q (defaults to one query per sequence).
        """
        h = self.encode_sequences(seqs, stream, training, rng)
        b, lmax, d = h.shape
        seq_index = np.arange(len(seqs)) if seq_index is None else np.asarray(seq_index)
        flat = seq_index * lmax + np.asarray(rows)
        return nc.take(nc.reshape(h, (b * lmax, d)), flat)
