"""Modality tokenizers: BPE text, image patches, temporal frame patches.

Raw inputs first become *layouts* (a :class:`TokenSequence` without
embeddings): per-token ids, position indices and raw patch pixels. Layouts are
cheap, picklable, and carry everything needed to build attention masks.
:func:`embed_sequences` turns a batch of layouts into a padded embedding
tensor with a handful of gather/scatter ops.

Embedding rules per token kind:

* text word:   LN_text(word_emb[id] + text_pos[i] + <T>)
* text slot:   LN_text(spe + text_pos[i])      (SPE standing inside a text span)
* visual:      LN_vis(patch @ W + b + spatial_pos[j] (+ temporal_pos[t]) + <V>)
* leading SPE: spe                              (no position, no modality)

Patches are flattened row-major within the patch with channels innermost.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc

SPE, MASK, PAD = "<SPE>", "<MASK>", "<PAD>"
SPECIALS = (SPE, MASK, PAD)
SPE_ID, MASK_ID, PAD_ID = 0, 1, 2
N_SPECIAL = len(SPECIALS)
EOW = "</w>"

KIND_SPE, KIND_TEXT, KIND_VISUAL = 0, 1, 2


class TokenizerError(ValueError):
    pass


class CapacityError(ValueError):
    """Too many tokens/frames for the configured tables."""


# ---------------------------------------------------------------------------
# BPE vocabulary
# ---------------------------------------------------------------------------

def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


_BYTE_RE = re.compile(r"^<0x([0-9A-F]{2})>$")


@dataclass
class Vocabulary:
    """Subword vocabulary with merge rules in priority order.

    Ids ``0..2`` are the reserved ``<SPE>``, ``<MASK>`` and ``<PAD>``; the
    base alphabet follows in sorted order, then byte-fallback tokens (if
    enabled), then one token per merge.
    """

    alphabet: list[str]
    merges: list[tuple[str, str]]
    byte_fallback: bool = False
    tokens: list[str] = field(init=False)

    def __post_init__(self):
        toks = list(SPECIALS) + list(self.alphabet)
        if self.byte_fallback:
            toks += [_byte_token(b) for b in range(256)] + [EOW]
        toks += [a + b for a, b in self.merges]
        self.tokens = toks
        self._index = {t: i for i, t in enumerate(toks)}
        if len(self._index) != len(toks):
            raise TokenizerError("duplicate token strings in vocabulary")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, i: int) -> str:
        return self.tokens[i]

    @property
    def word_ids(self) -> np.ndarray:
        """All non-special ids (the candidate set for language modelling)."""
        return np.arange(N_SPECIAL, len(self.tokens))

    def _symbols(self, word: str) -> list[str]:
        syms: list[str] = []
        for k, ch in enumerate(word):
            last = k == len(word) - 1
            sym = ch + EOW if last else ch
            if sym in self._index:
                syms.append(sym)
            elif self.byte_fallback:
                syms += [_byte_token(b) for b in ch.encode("utf-8")]
                if last:
                    syms.append(EOW)
            else:
                raise TokenizerError(f"character {ch!r} is not in the vocabulary")
        return syms

    def encode_word(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        syms = self._symbols(word)
        while len(syms) > 1:
            ranked = [(self._ranks.get(p, len(self._ranks)), k)
                      for k, p in enumerate(zip(syms, syms[1:]))]
            best, _ = min(ranked)
            if best == len(self._ranks):
                break
            a, b = self.merges[best]
            out, k = [], 0
            while k < len(syms):
                if k + 1 < len(syms) and syms[k] == a and syms[k + 1] == b:
                    out.append(a + b)
                    k += 2
                else:
                    out.append(syms[k])
                    k += 1
            syms = out
        self._cache[word] = syms
        return syms

    def tokenize(self, text: str) -> list[str]:
        return [s for w in text.split() for s in self.encode_word(w)]

    def encode(self, text: str) -> list[int]:
        return [self._index[s] for s in self.tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in SPECIALS:
                continue
            m = _BYTE_RE.match(tok)
            buf += bytes([int(m.group(1), 16)]) if m else tok.replace(EOW, " ").encode("utf-8")
        return buf.decode("utf-8", errors="replace").rstrip(" ")

    # serialisation: one merge per line, then a footer
    def dumps(self) -> str:
        lines = ["#bpe-merges v1"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("#alphabet " + " ".join(_escape(c) for c in self.alphabet))
        lines.append(f"#byte_fallback {int(self.byte_fallback)}")
        lines.append("#specials " + " ".join(SPECIALS))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if not lines or lines[0] != "#bpe-merges v1":
            raise TokenizerError("not a merge file (bad header)")
        merges, alphabet, byte_fallback, specials = [], None, False, None
        for n, line in enumerate(lines[1:], start=2):
            if line.startswith("#alphabet"):
                alphabet = [_unescape(c) for c in line.split(" ")[1:] if c]
            elif line.startswith("#byte_fallback"):
                byte_fallback = line.split()[1] == "1"
            elif line.startswith("#specials"):
                specials = tuple(line.split()[1:])
            else:
                parts = line.split(" ")
                if len(parts) != 2:
                    raise TokenizerError(f"line {n}: expected 'left right', got {line!r}")
                merges.append((parts[0], parts[1]))
        if alphabet is None or specials != SPECIALS:
            raise TokenizerError("merge file footer missing or specials mismatch")
        return cls(alphabet, merges, byte_fallback)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _escape(sym: str) -> str:
    return sym.replace("\\", "\\\\").replace(" ", "\\s")


def _unescape(sym: str) -> str:
    return sym.replace("\\s", " ").replace("\\\\", "\\")


def bpe_train(corpus: Sequence[str], n_merges: int, byte_fallback: bool = False) -> Vocabulary:
    """Learn ``n_merges`` merge rules from ``corpus``.

    Words are whitespace-delimited; the last character of each word carries
    the end-of-word marker, so merges never cross word boundaries. Ties in
    pair frequency go to the pair seen first when scanning the corpus.
    """
    if not corpus or not any(s.split() for s in corpus):
        raise TokenizerError("bpe_train needs a non-empty corpus")
    if n_merges < 0:
        raise TokenizerError("n_merges must be >= 0")
    freq: Counter[str] = Counter()
    for s in corpus:
        freq.update(s.split())
    words = [[*w[:-1], w[-1] + EOW] for w in freq]
    counts = list(freq.values())
    alphabet = sorted({c for w in words for c in w})
    merges: list[tuple[str, str]] = []
    taken = set(SPECIALS) | set(alphabet)
    for _ in range(n_merges):
        pairs: dict[tuple[str, str], int] = {}
        for syms, c in zip(words, counts):
            for p in zip(syms, syms[1:]):
                pairs[p] = pairs.get(p, 0) + c
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: kv[1])[0]
        a, b = best
        merges.append(best)
        taken.add(a + b)
        for k, syms in enumerate(words):
            out, j = [], 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == a and syms[j + 1] == b:
                    out.append(a + b)
                    j += 2
                else:
                    out.append(syms[j])
                    j += 1
            words[k] = out
    # a merge can reproduce an existing string (e.g. via different splits); keep the first
    uniq, seen = [], set(SPECIALS) | set(alphabet)
    for a, b in merges:
        if a + b not in seen:
            uniq.append((a, b))
            seen.add(a + b)
    return Vocabulary(alphabet, uniq, byte_fallback)


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------

@dataclass
class TokenizerConfig:
    dim: int = 32
    patch: int = 8
    image_size: int = 16
    channels: int = 3
    max_frames: int = 2
    text_max_len: int = 32

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @classmethod
    def reference(cls) -> "TokenizerConfig":
        return cls(dim=768, patch=16, image_size=224, channels=3, max_frames=8, text_max_len=256)


def tokenizer_param_shapes(cfg: TokenizerConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    return {
        "tok.word_emb": (vocab_size, d),
        "tok.text_pos": (cfg.text_max_len, d),
        "tok.spatial_pos": (cfg.grid * cfg.grid, d),
        "tok.temporal_pos": (cfg.max_frames, d),
        "tok.mod_T": (d,),
        "tok.mod_V": (d,),
        "tok.patch_w": (cfg.patch_dim, d),
        "tok.patch_b": (d,),
        "tok.ln_text.g": (d,),
        "tok.ln_text.b": (d,),
        "tok.ln_vis.g": (d,),
        "tok.ln_vis.b": (d,),
    }


@dataclass
class TokenSequence:
    """An ordered token sequence; ``embeddings`` is ``None`` for a bare layout.

    Per-token arrays all have length L. ``word_rows``/``slot_rows`` describe
    the auto-regressive layout (rows of the generated words and of the
    appended prediction slots, slot k predicting word ``slot_predicts[k]``,
    1-based); they are empty for other sequences.
    """

    kinds: np.ndarray
    token_ids: np.ndarray
    text_pos: np.ndarray
    spatial_pos: np.ndarray
    temporal_pos: np.ndarray
    segments: np.ndarray
    patches: np.ndarray
    regime: str = "bidirectional"
    word_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    slot_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    slot_predicts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    embeddings: nc.Tensor | None = None

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def spe_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_SPE)

    @property
    def modality_tags(self) -> list[str]:
        """'T' for text, 'V' for visual, '' for SPE tokens (no modality embedding)."""
        return [("", "T", "V")[k] for k in self.kinds]


def _empty_i(n=0):
    return np.full(n, -1, dtype=np.int64)


def _layout(kinds, token_ids, text_pos, spatial_pos, temporal_pos, segments, patches, patch_dim):
    return TokenSequence(
        kinds=np.asarray(kinds, dtype=np.int8),
        token_ids=np.asarray(token_ids, dtype=np.int64),
        text_pos=np.asarray(text_pos, dtype=np.int64),
        spatial_pos=np.asarray(spatial_pos, dtype=np.int64),
        temporal_pos=np.asarray(temporal_pos, dtype=np.int64),
        segments=np.asarray(segments, dtype=np.int64),
        patches=np.asarray(patches, dtype=np.float64).reshape(-1, patch_dim),
    )


def text_layout(ids: Sequence[int], cfg: TokenizerConfig, slot_mask: Sequence[bool] | None = None,
                offset: int = 0) -> TokenSequence:
    """Layout for a run of subword ids; ``slot_mask`` marks positions replaced by SPE slots."""
    n = len(ids)
    if offset + n > cfg.text_max_len:
        raise CapacityError(f"text of {offset + n} tokens exceeds max length {cfg.text_max_len}")
    slot = np.zeros(n, bool) if slot_mask is None else np.asarray(slot_mask, bool)
    kinds = np.where(slot, KIND_SPE, KIND_TEXT)
    tids = np.where(slot, -1, np.asarray(ids, dtype=np.int64).reshape(-1)) if n else _empty_i()
    return _layout(kinds, tids, np.arange(offset, offset + n), _empty_i(n), _empty_i(n),
                   np.zeros(n), np.zeros((0, cfg.patch_dim)), cfg.patch_dim)


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``[H, W, C]`` -> ``[(H/p)(W/p), p*p*C]``, grid row-major, pixels row-major, channels innermost."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise nc.ShapeError(f"image must be H x W x C, got shape {img.shape}")
    h, w, c = img.shape
    if h % patch or w % patch:
        raise nc.ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def image_layout(img: np.ndarray, cfg: TokenizerConfig) -> TokenSequence:
    p = patchify(img, cfg.patch)
    n = len(p)
    if n > cfg.grid * cfg.grid:
        raise CapacityError(f"{n} patches exceed the spatial table of {cfg.grid ** 2}")
    return _layout(np.full(n, KIND_VISUAL), _empty_i(n), _empty_i(n), np.arange(n), _empty_i(n),
                   np.zeros(n), p, cfg.patch_dim)


def video_layout(frames: np.ndarray, cfg: TokenizerConfig) -> TokenSequence:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise nc.ShapeError(f"video must be N x H x W x C, got shape {frames.shape}")
    n_frames = frames.shape[0]
    if n_frames > cfg.max_frames:
        raise CapacityError(f"{n_frames} frames exceed max_frames={cfg.max_frames}")
    per = [patchify(f, cfg.patch) for f in frames]
    k = len(per[0]) if per else 0
    if k > cfg.grid * cfg.grid:
        raise CapacityError(f"{k} patches per frame exceed the spatial table of {cfg.grid ** 2}")
    n = n_frames * k
    return _layout(np.full(n, KIND_VISUAL), _empty_i(n), _empty_i(n), np.tile(np.arange(k), n_frames),
                   np.repeat(np.arange(n_frames), k), np.zeros(n),
                   np.concatenate(per) if per else np.zeros((0, cfg.patch_dim)), cfg.patch_dim)


@dataclass(frozen=True)
class SpeSlots:
    """SPE tokens appended after the last part.

    ``positions`` are their 1-D text positions; ``predicts`` (auto-regressive
    only) the 1-based ordinal of the word in the final text part each slot
    predicts.
    """

    positions: tuple[int, ...]
    predicts: tuple[int, ...] | None = None


def assemble(parts: Sequence[TokenSequence], slots: SpeSlots | None = None,
             regime: str = "bidirectional", max_len: int | None = None) -> TokenSequence:
    """``[SPE, *parts, *slots]`` with segment labels 0..len(parts)-1 (leading SPE is -1)."""
    if regime not in ("bidirectional", "ar_spe"):
        raise ValueError(f"unknown regime {regime!r}")
    if any(p.embeddings is not None for p in parts):
        raise ValueError("assemble works on layouts; embed the result with embed_sequences")
    patch_dim = parts[0].patches.shape[1] if parts else 0
    seg = [np.array([-1])] + [np.full(len(p), i) for i, p in enumerate(parts)]
    cat = lambda attr, lead: np.concatenate([np.array([lead])] + [getattr(p, attr) for p in parts])  # noqa: E731
    kinds, tids = cat("kinds", KIND_SPE), cat("token_ids", -1)
    tpos, spos, tmp = cat("text_pos", -1), cat("spatial_pos", -1), cat("temporal_pos", -1)
    segments = np.concatenate(seg)
    patches = np.concatenate([p.patches for p in parts]) if parts else np.zeros((0, patch_dim))
    n_slots = 0 if slots is None else len(slots.positions)
    if n_slots:
        last_seg = len(parts) - 1
        kinds = np.concatenate([kinds, np.full(n_slots, KIND_SPE)])
        tids = np.concatenate([tids, _empty_i(n_slots)])
        tpos = np.concatenate([tpos, np.asarray(slots.positions, dtype=np.int64)])
        spos = np.concatenate([spos, _empty_i(n_slots)])
        tmp = np.concatenate([tmp, _empty_i(n_slots)])
        segments = np.concatenate([segments, np.full(n_slots, last_seg)])
    seq = _layout(kinds, tids, tpos, spos, tmp, segments, patches, patch_dim)
    seq.regime = regime
    if max_len is not None and len(seq) > max_len:
        raise CapacityError(f"sequence of {len(seq)} tokens exceeds model capacity {max_len}")
    if regime == "ar_spe":
        if not parts or slots is None or slots.predicts is None:
            raise ValueError("ar_spe assembly needs a final text part and predicting slots")
        start = 1 + sum(len(p) for p in parts[:-1])
        seq.word_rows = np.arange(start, start + len(parts[-1]))
        seq.slot_rows = np.arange(len(seq) - n_slots, len(seq))
        seq.slot_predicts = np.asarray(slots.predicts, dtype=np.int64)
        if (seq.slot_predicts < 1).any() or (seq.slot_predicts > len(seq.word_rows) + 1).any():
            raise ValueError("slot predicts an ordinal outside the word span")
    return seq




# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def embed_sequences(seqs: Sequence[TokenSequence], params: dict[str, nc.Tensor], normalize: bool = True
                    ) -> tuple[nc.Tensor, np.ndarray]:
    """Embed a batch of layouts into ``[B, Lmax, D]`` plus a ``[B, Lmax]`` validity mask.

    Padding rows are zero. With ``normalize=False`` the tokenizer layer norms
    are skipped (useful for inspecting the raw embedding sums).
    """
    spe = params["spe"]
    d = spe.shape[0]
    dtype = spe.dtype
    b = len(seqs)
    lmax = max(len(s) for s in seqs)
    n_rows = b * lmax
    valid = np.zeros((b, lmax), dtype=bool)
    kinds = np.full((b, lmax), -1, dtype=np.int64)
    ids = np.full((b, lmax), -1, dtype=np.int64)
    tpos = np.full((b, lmax), -1, dtype=np.int64)
    spos = np.full((b, lmax), -1, dtype=np.int64)
    tmp = np.full((b, lmax), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        valid[i, :n] = True
        kinds[i, :n] = s.kinds
        ids[i, :n] = s.token_ids
        tpos[i, :n] = s.text_pos
        spos[i, :n] = s.spatial_pos
        tmp[i, :n] = s.temporal_pos
    kinds, ids, tpos, spos, tmp = (a.reshape(-1) for a in (kinds, ids, tpos, spos, tmp))

    parts = []
    text_rows = np.flatnonzero(kinds == KIND_TEXT)
    slot_rows = np.flatnonzero((kinds == KIND_SPE) & (tpos >= 0))
    lead_rows = np.flatnonzero((kinds == KIND_SPE) & (tpos < 0))
    vis_rows = np.flatnonzero(kinds == KIND_VISUAL)
    if (tpos[text_rows] >= params["tok.text_pos"].shape[0]).any():
        raise CapacityError("text position beyond the positional table")

    text_blocks = []
    if len(text_rows):
        nt = len(text_rows)
        e = nc.add_n([nc.take(params["tok.word_emb"], ids[text_rows]),
                      nc.take(params["tok.text_pos"], tpos[text_rows]),
                      nc.broadcast_to(params["tok.mod_T"], (nt, d))])
        text_blocks.append(e)
    if len(slot_rows):
        ns = len(slot_rows)
        text_blocks.append(nc.add(nc.broadcast_to(spe, (ns, d)), nc.take(params["tok.text_pos"], tpos[slot_rows])))
    if text_blocks:
        e = text_blocks[0] if len(text_blocks) == 1 else nc.concat(text_blocks, axis=0)
        if normalize:
            e = nc.layer_norm(e, params["tok.ln_text.g"], params["tok.ln_text.b"])
        parts.append((np.concatenate([text_rows, slot_rows]), e))

    if len(vis_rows):
        pix = np.concatenate([s.patches for s in seqs]).astype(dtype)
        nv = len(vis_rows)
        if pix.shape[0] != nv:
            raise nc.ShapeError("patch pixel count does not match visual token count")
        terms = [nc.linear(nc.Tensor(pix, dtype=dtype), params["tok.patch_w"], params["tok.patch_b"]),
                 nc.take(params["tok.spatial_pos"], spos[vis_rows]),
                 nc.broadcast_to(params["tok.mod_V"], (nv, d))]
        vid = np.flatnonzero(tmp[vis_rows] >= 0)
        if len(vid):
            if tmp[vis_rows][vid].max() >= params["tok.temporal_pos"].shape[0]:
                raise CapacityError("frame index beyond the temporal table")
            terms.append(nc.place_rows(nv, [(vid, nc.take(params["tok.temporal_pos"], tmp[vis_rows][vid]))],
                                       width=d, dtype=dtype))
        e = nc.add_n(terms)
        if normalize:
            e = nc.layer_norm(e, params["tok.ln_vis.g"], params["tok.ln_vis.b"])
        parts.append((vis_rows, e))

    if len(lead_rows):
        parts.append((lead_rows, nc.broadcast_to(spe, (len(lead_rows), d))))
    out = nc.place_rows(n_rows, parts, width=d, dtype=dtype)
    return nc.reshape(out, (b, lmax, d)), valid


def embed(seq: TokenSequence, params: dict[str, nc.Tensor], normalize: bool = True) -> TokenSequence:
    x, _ = embed_sequences([seq], params, normalize=normalize)
    return replace(seq, embeddings=nc.reshape(x, (len(seq), x.shape[-1])))


def tokenize_text(s: str, vocab: Vocabulary, params: dict[str, nc.Tensor] | None, cfg: TokenizerConfig,
                  normalize: bool = True) -> TokenSequence:
    """Subword tokens of ``s`` (no SPE); embeddings attached when ``params`` is given."""
    ids = vocab.encode(s)
    if len(ids) > cfg.text_max_len:
        raise CapacityError(f"text encodes to {len(ids)} tokens, max {cfg.text_max_len}; truncate first")
    seq = text_layout(ids, cfg)
    return seq if params is None or len(seq) == 0 else embed(seq, params, normalize)


def tokenize_image(img: np.ndarray, params: dict[str, nc.Tensor] | None, cfg: TokenizerConfig,
                   normalize: bool = True) -> TokenSequence:
    seq = image_layout(img, cfg)
    return seq if params is None else embed(seq, params, normalize)


def tokenize_video(frames: np.ndarray, params: dict[str, nc.Tensor] | None, cfg: TokenizerConfig,
                   normalize: bool = True) -> TokenSequence:
    seq = video_layout(frames, cfg)
    return seq if params is None else embed(seq, params, normalize)
