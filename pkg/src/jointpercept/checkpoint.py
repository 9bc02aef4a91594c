"""Binary checkpoints: full model snapshots and prompt-tuning deltas.

Layout (all integers little-endian)::

    magic        8 bytes   b"JPCKPT\\r\\n"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    blob         tensors back to back, float32 little-endian, C order
    digest       32 bytes  SHA-256 of everything above

The header lists every tensor as ``{"name", "shape", "offset", "nbytes"}``
with offsets relative to the start of the blob. Optimizer moments are stored
as tensors named ``opt.m/<param>`` and ``opt.v/<param>``. The hex digest is
the checkpoint's content hash; deltas name their base by that hash.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .model import Model, ModelConfig
from .pretrain import OptimizerState
from .tokenizers import Vocabulary

MAGIC = b"JPCKPT\r\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")
_PREFIX = struct.Struct("<8sIQ")


class IntegrityError(ValueError):
    """The file is truncated, corrupt or tampered with."""


class CompatibilityError(ValueError):
    """A checkpoint does not fit the base model, configuration or task it is used with."""


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary | None
    tensors: dict[str, np.ndarray]
    step: int = 0
    kind: str = "full"
    base_hash: str | None = None
    optimizer_step: int | None = None
    meta: dict = field(default_factory=dict)
    hash: str = ""

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if not n.startswith("opt.")}

    def optimizer_state(self) -> OptimizerState | None:
        if self.optimizer_step is None:
            return None
        st = OptimizerState(step=self.optimizer_step)
        for n, t in self.tensors.items():
            if n.startswith("opt.m/"):
                st.m[n[6:]] = t.copy()
            elif n.startswith("opt.v/"):
                st.v[n[6:]] = t.copy()
        return st


def encode_checkpoint(ck: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ck.tensors.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "jointpercept-checkpoint",
        "kind": ck.kind,
        "config": ck.config.to_dict(),
        "vocab": None if ck.vocab is None else ck.vocab.dumps(),
        "step": ck.step,
        "base_hash": ck.base_hash,
        "optimizer_step": ck.optimizer_step,
        "meta": ck.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + 32:
        raise IntegrityError("file too short to be a checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("content hash mismatch (file corrupt or modified)")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise IntegrityError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable header: {exc}") from None
    blob = memoryview(body)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise IntegrityError(f"tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=_DTYPE).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    vocab = None if header["vocab"] is None else Vocabulary.loads(header["vocab"])
    return Checkpoint(ModelConfig.from_dict(header["config"]), vocab, tensors, header["step"], header["kind"],
                      header["base_hash"], header["optimizer_step"], header["meta"], digest.hex())


def content_hash(path) -> str:
    return decode_checkpoint(Path(path).read_bytes()).hash


def _write(path, ck: Checkpoint) -> str:
    data = encode_checkpoint(ck)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data[-32:].hex()


def save_checkpoint(path, model: Model, state: OptimizerState | None = None, step: int = 0,
                    meta: dict | None = None) -> str:
    """Write every parameter (and optional optimizer moments); return the content hash."""
    tensors = {n: t.data for n, t in model.params.items()}
    if state is not None:
        for n in state.m:
            tensors[f"opt.m/{n}"] = state.m[n]
            tensors[f"opt.v/{n}"] = state.v[n]
    ck = Checkpoint(model.config, model.vocab, tensors, step, "full", None,
                    None if state is None else state.step, meta or {})
    return _write(path, ck)


def save_delta(path, model: Model, names, base_hash: str, meta: dict | None = None) -> str:
    """Write only ``names`` (the adapted groups), bound to the base checkpoint by hash."""
    tensors = {n: model.params[n].data for n in names}
    return _write(path, Checkpoint(model.config, model.vocab, tensors, 0, "delta", base_hash, None, meta or {}))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read {path}: {exc}") from None
    return decode_checkpoint(data)


def model_from_checkpoint(ck: Checkpoint, base: Checkpoint | None = None) -> Model:
    """Rebuild a float32 model; a delta needs its ``base`` (verified by hash)."""
    if ck.kind == "delta":
        if base is None:
            raise CompatibilityError("a delta checkpoint needs its base checkpoint")
        if base.hash != ck.base_hash:
            raise CompatibilityError(f"delta expects base {ck.base_hash[:12]}, got {base.hash[:12]}")
        if base.config.to_dict() != ck.config.to_dict():
            raise CompatibilityError("delta and base model configurations differ")
        params = dict(base.params)
        for n, t in ck.params.items():
            if n in params and params[n].shape != t.shape:
                raise CompatibilityError(f"{n}: delta shape {t.shape} vs base {params[n].shape}")
            params[n] = t
        vocab = base.vocab
    else:
        params, vocab = ck.params, ck.vocab
    tensors = {n: nc.Tensor(a, requires_grad=True, dtype=np.float32, name=n) for n, a in params.items()}
    return Model(ck.config, vocab, dtype=np.float32, params=tensors)


def load_model(path, base_path=None) -> tuple[Model, Checkpoint]:
    ck = read_checkpoint(path)
    base = None
    if ck.kind == "delta":
        hint = base_path or ck.meta.get("base_path")
        if hint is None:
            raise CompatibilityError("delta checkpoint names no base file")
        hint = Path(hint)
        if not hint.is_absolute() and base_path is None:
            hint = Path(path).parent / hint
        base = read_checkpoint(hint)
    return model_from_checkpoint(ck, base), ck
