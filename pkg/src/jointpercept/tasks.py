"""Task formulation: every task becomes a :class:`TaskInstance`.

Also holds the procedural "toy world" used in place of real datasets: small
RGB images containing one coloured shape in one quadrant, two-frame videos of
the same scenes with a shape-dependent drift, and a tiny grammar describing
them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .head import TaskInstance
from .tokenizers import (N_SPECIAL, CapacityError, SpeSlots, TokenizerConfig, TokenSequence, Vocabulary,
                         assemble, bpe_train, image_layout, text_layout, video_layout)

VIDEO_LOSS_WEIGHT = 0.05
SMOOTHING = 0.1
MASK_RATE = 0.15
PAIR_SEPARATOR = "|"


@dataclass
class TaskContext:
    """Vocabulary and tokenizer geometry shared by all formulators."""

    vocab: Vocabulary
    cfg: TokenizerConfig
    max_len: int = 64

    def part(self, item) -> TokenSequence:
        """Layout for a raw item: ``str`` -> text, ``H x W x C`` -> image, ``N x H x W x C`` -> video."""
        if isinstance(item, TokenSequence):
            return item
        if isinstance(item, str):
            ids = self.vocab.encode(item)
            return text_layout(ids, self.cfg)
        arr = np.asarray(item)
        if arr.ndim == 3:
            return image_layout(arr, self.cfg)
        if arr.ndim == 4:
            return video_layout(arr, self.cfg)
        raise ValueError(f"cannot tokenize item of shape {arr.shape}")

    def seq(self, *items, **kw) -> TokenSequence:
        return assemble([self.part(i) for i in items], max_len=self.max_len, **kw)

    @cached_property
    def vocab_targets(self) -> list[TokenSequence]:
        """``[SPE, word]`` for every non-special vocabulary entry; target index = id - N_SPECIAL."""
        return [assemble([text_layout([i], self.cfg)]) for i in self.vocab.word_ids]


def _plain(kind, inputs, targets, truth, **kw) -> TaskInstance:
    n = len(inputs)
    inst = TaskInstance(kind, inputs, targets, truth, np.arange(n), np.zeros(n, dtype=np.int64), **kw)
    inst.validate()
    return inst


def make_classification(ctx: TaskContext, samples: Sequence, labels: Sequence[int], class_names: Sequence[str],
                        modality: str = "image") -> TaskInstance:
    """Inputs ``[SPE, x^I]`` / ``[SPE, x^V]``; targets ``[SPE, class name]``."""
    if modality not in ("image", "video"):
        raise ValueError(f"unknown modality {modality!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ValueError("label outside the class list")
    inputs = [ctx.seq(s) for s in samples]
    targets = [ctx.seq(c) for c in class_names]
    video = modality == "video"
    return _plain(f"{modality}_classification", inputs, targets, labels, smoothing=SMOOTHING,
                  loss_weight=VIDEO_LOSS_WEIGHT if video else 1.0, labels=list(class_names))


def mask_count(n_tokens: int, rate: float) -> int:
    return int(math.ceil(rate * n_tokens - 1e-12)) if rate > 0 else 0


def make_masked_lm(ctx: TaskContext, texts: Sequence[str], images: Sequence | None = None,
                   mask_rate: float = MASK_RATE, rng: np.random.Generator | None = None) -> TaskInstance:
    """Replace ``ceil(rate * L)`` random subwords of each text by SPE slots and predict them.

    The slots keep the masked word's text position. Targets are the whole vocabulary.
    """
    rng = rng or np.random.default_rng(0)
    inputs, qi, qr, truth = [], [], [], []
    for b, text in enumerate(texts):
        if not text.split():
            raise ValueError("masked LM needs non-empty text")
        ids = np.asarray(ctx.vocab.encode(text))
        k = mask_count(len(ids), mask_rate)
        img = None if images is None else images[b]
        if k >= len(ids) and img is None:
            raise ValueError("every token would be masked and there is no image context")
        pos = np.sort(rng.choice(len(ids), size=k, replace=False)) if k else np.zeros(0, np.int64)
        slot = np.zeros(len(ids), bool)
        slot[pos] = True
        parts = ([] if img is None else [ctx.part(img)]) + [text_layout(ids, ctx.cfg, slot)]
        seq = assemble(parts, max_len=ctx.max_len)
        offset = len(seq) - len(ids)
        inputs.append(seq)
        qi += [b] * k
        qr += list(offset + pos)
        truth += list(ids[pos] - N_SPECIAL)
    kind = "masked_lm" if images is None else "masked_lm_image"
    inst = TaskInstance(kind, inputs, ctx.vocab_targets, truth, qi, qr, smoothing=0.0)
    inst.validate()
    return inst


def ar_sequence(ctx: TaskContext, ids: Sequence[int], visual=None, n_slots: int | None = None,
                first: int = 1) -> TokenSequence:
    """``[SPE, visual?, w_1..w_m, slot_first..slot_{first+n-1}]`` with the auto-regressive mask regime."""
    ids = list(ids)
    n = len(ids) - first + 1 if n_slots is None else n_slots
    preds = tuple(range(first, first + n))
    parts = ([] if visual is None else [ctx.part(visual)]) + [text_layout(ids, ctx.cfg)]
    return assemble(parts, SpeSlots(tuple(p - 1 for p in preds), preds), regime="ar_spe", max_len=ctx.max_len)


def make_autoregressive_lm(ctx: TaskContext, texts: Sequence[str], visuals: Sequence | None = None
                           ) -> TaskInstance:
    """One prediction slot per word; slot j predicts word j from the words before it (and the visual prefix)."""
    inputs, qi, qr, truth = [], [], [], []
    for b, text in enumerate(texts):
        ids = ctx.vocab.encode(text)
        if not ids:
            raise ValueError("autoregressive LM needs non-empty text")
        seq = ar_sequence(ctx, ids, None if visuals is None else visuals[b])
        inputs.append(seq)
        qi += [b] * len(ids)
        qr += list(seq.slot_rows)
        truth += [i - N_SPECIAL for i in ids]
    kind = "autoregressive_lm" if visuals is None else "captioning"
    inst = TaskInstance(kind, inputs, ctx.vocab_targets, truth, qi, qr, smoothing=0.0)
    inst.validate()
    return inst


def make_retrieval(ctx: TaskContext, pairs: Sequence[tuple], direction: str = "a2b", kind: str = "retrieval"
                   ) -> TaskInstance:
    """In-batch retrieval: every a-side scores all b-sides of the batch; truth is the diagonal."""
    if direction not in ("a2b", "b2a"):
        raise ValueError("direction must be 'a2b' or 'b2a'")
    a = [ctx.seq(p[0]) for p in pairs]
    b = [ctx.seq(p[1]) for p in pairs]
    if direction == "b2a":
        a, b = b, a
    return _plain(kind, a, b, np.arange(len(pairs)), smoothing=SMOOTHING, meta={"direction": direction})


def make_vqa(ctx: TaskContext, images: Sequence, questions: Sequence[str], answers: Sequence[str],
             truth: Sequence[int] | None = None) -> TaskInstance:
    """``[SPE, x^I, question, SPE]`` matched through the trailing SPE against ``[SPE, answer]`` candidates."""
    if not answers:
        raise ValueError("empty answer set")
    inputs, rows = [], []
    for img, q in zip(images, questions):
        if not q.rstrip().endswith("?"):
            raise ValueError(f"question must end with '?': {q!r}")
        qp = ctx.part(q)
        seq = assemble([ctx.part(img), qp], SpeSlots((len(qp),)), max_len=ctx.max_len)
        inputs.append(seq)
        rows.append(len(seq) - 1)
    truth = np.zeros(len(inputs), np.int64) if truth is None else truth
    inst = TaskInstance("vqa", inputs, [ctx.seq(a) for a in answers], truth, np.arange(len(inputs)), rows,
                        smoothing=SMOOTHING, labels=list(answers))
    inst.validate()
    return inst


def make_nlu(ctx: TaskContext, sentences: Sequence, label_names: Sequence[str],
             truth: Sequence[int] | None = None) -> TaskInstance:
    """Single sentences or pairs (joined by a plain separator token) classified against label texts."""
    if not label_names or not all(n.split() for n in label_names):
        raise ValueError("label names must be non-empty text")
    texts = [s if isinstance(s, str) else f" {PAIR_SEPARATOR} ".join(s) for s in sentences]
    truth = np.zeros(len(texts), np.int64) if truth is None else truth
    return _plain("nlu", [ctx.seq(t) for t in texts], [ctx.seq(n) for n in label_names], truth,
                  smoothing=SMOOTHING, labels=list(label_names))


# ---------------------------------------------------------------------------
# Synthetic toy world
# ---------------------------------------------------------------------------

COLORS = {"red": (1.0, 0.15, 0.1), "blue": (0.1, 0.2, 1.0)}
SHAPES = ("square", "cross", "ring", "stripe")
V_POS, H_POS = ("top", "bottom"), ("left", "right")
POSITIONS = [f"{v} {h}" for v in V_POS for h in H_POS]
CLASS_NAMES = [f"{c} {s}" for c in COLORS for s in SHAPES]
# per-frame drift (dy, dx) of each shape in videos
MOTION = {"square": (0, 1), "cross": (1, 0), "ring": (0, -1), "stripe": (-1, 0)}

TEMPLATES = (
    "the {c} {s} is in the {p}",
    "a {c} {s} sits at the {p}",
    "there is a {c} {s} in the {p}",
    "the {s} in the {p} is {c}",
    "the {p} holds a {c} {s}",
)
QUESTIONS = {
    "what color is the shape ?": "color",
    "what shape is it ?": "shape",
    "where is the shape ?": "position",
}
EXTRA_WORDS = "yes no Yes No great terrible good bad same different"

KINDS = ("image-class", "video-class", "text-corpus", "image-text-pairs", "video-text-pairs",
         "qa-triples", "sentence-pairs")


def _shape_mask(shape: str, cell: int) -> np.ndarray:
    m = np.zeros((cell, cell), bool)
    c = cell // 2
    q = max(cell // 4, 1)
    if shape == "square":
        m[c - q:c + q, c - q:c + q] = True
    elif shape == "cross":
        m[c - 1:c + 1, 1:cell - 1] = True
        m[1:cell - 1, c - 1:c + 1] = True
    elif shape == "ring":
        m[1:cell - 1, 1:cell - 1] = True
        m[2:cell - 2, 2:cell - 2] = False
    elif shape == "stripe":
        for k in range(cell):
            m[k, max(k - 1, 0):k + 1] = True
    else:
        raise ValueError(shape)
    return m


def caption(color: str, shape: str, pos: str) -> str:
    return f"a {color} {shape} in the {pos}"


def render(color: str, shape: str, pos: int, rng: np.random.Generator, size: int = 16, channels: int = 3,
           shift: tuple[int, int] = (0, 0), noise: float = 0.1) -> np.ndarray:
    """One frame: Gaussian background noise plus the shape drawn inside quadrant ``pos``."""
    cell = size // 2
    img = rng.normal(0.0, noise, size=(size, size, channels))
    m = np.roll(_shape_mask(shape, cell), shift, axis=(0, 1))
    r0, c0 = (pos // 2) * cell, (pos % 2) * cell
    col = np.asarray(COLORS[color][:channels]) * rng.uniform(0.8, 1.0)
    img[r0:r0 + cell, c0:c0 + cell][m] += col
    return img


def grammar_sentences() -> list[str]:
    return [t.format(c=c, s=s, p=p) for t in TEMPLATES for c in COLORS for s in SHAPES for p in POSITIONS]


def vocabulary_corpus() -> list[str]:
    corpus = grammar_sentences()
    corpus += [caption(c, s, p) for c in COLORS for s in SHAPES for p in POSITIONS]
    corpus += CLASS_NAMES + POSITIONS + list(QUESTIONS) + [EXTRA_WORDS, PAIR_SEPARATOR]
    return corpus


def build_vocabulary(n_merges: int = 100) -> Vocabulary:
    return bpe_train(vocabulary_corpus(), n_merges)


@dataclass
class SyntheticDataset:
    kind: str
    seed: int
    sizes: dict
    class_names: list[str]
    data: dict = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return int(self.sizes["n"])

    def manifest(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "sizes": dict(self.sizes)}

    @classmethod
    def from_manifest(cls, m: dict) -> "SyntheticDataset":
        return generate_synthetic(m["kind"], m["seed"], m["sizes"])


def generate_synthetic(kind: str, seed: int, sizes: dict | int, image_size: int = 16, channels: int = 3,
                       n_frames: int = 2) -> SyntheticDataset:
    """Deterministic procedural dataset of the given kind; ``sizes`` is ``{"n": count}`` or a count."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    sizes = {"n": sizes} if isinstance(sizes, int) else dict(sizes)
    n = int(sizes.get("n", 0))
    if n <= 0:
        raise ValueError("dataset size must be positive")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    colors, n_shapes = list(COLORS), len(SHAPES)
    cls = rng.integers(0, len(CLASS_NAMES), n)
    pos = rng.integers(0, 4, n)
    data: dict = {"labels": cls, "positions": pos}

    def attrs(i):
        return colors[cls[i] // n_shapes], SHAPES[cls[i] % n_shapes], POSITIONS[pos[i]]

    def jitter():
        return tuple(int(v) for v in rng.integers(-1, 2, 2))

    if kind in ("image-class", "image-text-pairs", "qa-triples"):
        data["images"] = np.stack([render(*attrs(i)[:2], pos[i], rng, image_size, channels, jitter())
                                   for i in range(n)])
    if kind in ("video-class", "video-text-pairs"):
        vids = []
        for i in range(n):
            c, s, _ = attrs(i)
            base = np.array(jitter())
            vids.append(np.stack([render(c, s, pos[i], rng, image_size, channels,
                                         tuple(base + t * np.array(MOTION[s]))) for t in range(n_frames)]))
        data["videos"] = np.stack(vids)
    if kind in ("image-text-pairs", "video-text-pairs"):
        data["captions"] = [caption(*attrs(i)) for i in range(n)]
    if kind == "text-corpus":
        data["texts"] = [TEMPLATES[rng.integers(len(TEMPLATES))].format(c=a[0], s=a[1], p=a[2])
                         for a in map(attrs, range(n))]
    if kind == "qa-triples":
        qs = list(QUESTIONS)
        picks = rng.integers(0, len(qs), n)
        data["questions"] = [qs[k] for k in picks]
        data["answers"] = [{"color": a[0], "shape": a[1], "position": a[2]}[QUESTIONS[qs[k]]]
                           for k, a in zip(picks, map(attrs, range(n)))]
        data["answer_set"] = list(COLORS) + list(SHAPES) + POSITIONS
    if kind == "sentence-pairs":
        same = rng.random(n) < 0.5
        other = (cls + rng.integers(1, len(CLASS_NAMES), n)) % len(CLASS_NAMES)
        t1 = rng.integers(0, len(TEMPLATES), n)
        t2 = rng.integers(0, len(TEMPLATES), n)
        pairs = []
        for i in range(n):
            c, s, p = attrs(i)
            j = cls[i] if same[i] else other[i]
            c2, s2 = colors[j // n_shapes], SHAPES[j % n_shapes]
            pairs.append((TEMPLATES[t1[i]].format(c=c, s=s, p=p), TEMPLATES[t2[i]].format(c=c2, s=s2, p=p)))
        data["pairs"] = pairs
        data["labels"] = np.where(same, 0, 1)
        return SyntheticDataset(kind, seed, sizes, ["Yes", "No"], data)
    return SyntheticDataset(kind, seed, sizes, list(CLASS_NAMES), data)


def distinct_caption_batch(captions: Sequence[str], batch: int, rng: np.random.Generator) -> np.ndarray:
    """Random indices whose captions are pairwise distinct (needed for clean in-batch retrieval)."""
    order = rng.permutation(len(captions))
    picked, seen = [], set()
    for i in order:
        if captions[i] not in seen:
            picked.append(i)
            seen.add(captions[i])
            if len(picked) == batch:
                break
    if len(picked) < batch:
        raise CapacityError("not enough distinct captions for the requested batch")
    return np.asarray(picked)


# ---------------------------------------------------------------------------
# Batch samplers used by pre-training and evaluation
# ---------------------------------------------------------------------------

SAMPLER_SOURCES = {
    "image_classification": "image-class",
    "video_classification": "video-class",
    "masked_lm": "text-corpus",
    "masked_lm_image": "image-text-pairs",
    "autoregressive_lm": "text-corpus",
    "captioning": "image-text-pairs",
    "image_text_retrieval": "image-text-pairs",
    "video_text_retrieval": "video-text-pairs",
    "text_retrieval": "sentence-pairs",
    "vqa": "qa-triples",
    "nlu": "sentence-pairs",
    "position_classification": "image-class",
}


def sample_batch(kind: str, ds: SyntheticDataset, ctx: TaskContext, rng: np.random.Generator, batch: int = 8,
                 indices: np.ndarray | None = None, direction: str | None = None) -> TaskInstance:
    """Draw one :class:`TaskInstance` of ``kind`` from ``ds``."""
    d = ds.data
    retrieval = kind.endswith("retrieval")
    if indices is None:
        if retrieval and "captions" in d:
            indices = distinct_caption_batch(d["captions"], batch, rng)
        else:
            indices = rng.choice(len(ds), size=min(batch, len(ds)), replace=False)
    idx = np.asarray(indices)
    if kind == "image_classification":
        return make_classification(ctx, d["images"][idx], d["labels"][idx], ds.class_names, "image")
    if kind == "video_classification":
        return make_classification(ctx, d["videos"][idx], d["labels"][idx], ds.class_names, "video")
    if kind == "position_classification":
        inst = make_classification(ctx, d["images"][idx], d["positions"][idx], POSITIONS, "image")
        inst.kind = "classification"
        return inst
    if kind == "masked_lm":
        return make_masked_lm(ctx, [d["texts"][i] for i in idx], rng=rng)
    if kind == "masked_lm_image":
        return make_masked_lm(ctx, [d["captions"][i] for i in idx], d["images"][idx], rng=rng)
    if kind == "autoregressive_lm":
        return make_autoregressive_lm(ctx, [d["texts"][i] for i in idx])
    if kind == "captioning":
        return make_autoregressive_lm(ctx, [d["captions"][i] for i in idx], d["images"][idx])
    if kind in ("image_text_retrieval", "video_text_retrieval"):
        vis = d["images"] if kind == "image_text_retrieval" else d["videos"]
        if direction is None:
            direction = "a2b" if rng.random() < 0.5 else "b2a"
        return make_retrieval(ctx, [(vis[i], d["captions"][i]) for i in idx], direction, kind)
    if kind == "text_retrieval":
        return make_retrieval(ctx, [d["pairs"][i] for i in idx], "a2b", kind)
    if kind == "vqa":
        answers = d["answer_set"]
        truth = [answers.index(d["answers"][i]) for i in idx]
        return make_vqa(ctx, d["images"][idx], [d["questions"][i] for i in idx], answers, truth)
    if kind == "nlu":
        return make_nlu(ctx, [d["pairs"][i] for i in idx], ds.class_names, d["labels"][idx])
    raise ValueError(f"unknown task kind {kind!r}")
