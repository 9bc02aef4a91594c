"""Run and task configuration files (YAML) with field-level diagnostics.

A run file::

    seed: 0
    model:            # all keys optional
      bpe_merges: 100
      dim: 32
      n_layers: 2
      n_heads: 4
      ffn_dim: 64
      max_len: 64
      n_prompts: 10
      tau_init: 0.07
      patch: 8
      image_size: 16
      channels: 3
      max_frames: 2
      text_max_len: 32
    train:            # steps required; warmup defaults to steps // 10
      steps: 2000
      lr: 0.002
      weight_decay: 0.05
      warmup: 100
      clip: 5.0
      drop_path: 0.1
      workers: 4
      checkpoint_every: 500
    datasets:         # name, kind, n required
      - {name: images, kind: image-class, seed: 0, n: 256}
    tasks:            # name, kind required
      - {name: cls, kind: image_classification, dataset: images, weight: 1.0, batch_size: 8}
    eval: {n_batches: 20, batch: 8}

A task file (for ``eval``, ``prompt-tune`` and ``finetune``)::

    kind: vqa
    eval:  {kind: qa-triples, seed: 12, n: 256}      # required
    train: {kind: qa-triples, seed: 11, n: 3200}     # required for tuning
    adapt: {steps: 200, lr: 0.003, batch_size: 8, seed: 0}
    metric: {n_batches: 20, batch: 8, seed: 0}
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .adapt import AdaptConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .pretrain import ConfigError, TaskSpec, TrainConfig, sample_task
from .tasks import KINDS, SAMPLER_SOURCES, SyntheticDataset, generate_synthetic
from .tokenizers import TokenizerConfig


class _Map(dict):
    """dict that remembers the source line of itself and of each key."""

    line: int = 0
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for k, v in node.value:
        key = loader.construct_object(k, deep=True)
        out[key] = loader.construct_object(v, deep=True)
        out.key_lines[key] = k.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


def _where(src: str, m, key=None) -> str:
    line = getattr(m, "key_lines", {}).get(key) if key is not None else None
    line = line or getattr(m, "line", 0)
    return f"{src}:{line}" if line else src


def parse_yaml(text: str, src: str = "<config>"):
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{src}:{mark.line + 1}" if mark else src
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None


def _section(doc, key: str, src: str, required: bool = True, kind=dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"{src}: expected a mapping at the top level")
    if key not in doc:
        if required:
            raise ConfigError(f"{_where(src, doc)}: missing required field '{key}'")
        return kind()
    val = doc[key]
    if not isinstance(val, kind):
        raise ConfigError(f"{_where(src, doc, key)}: field '{key}' must be a {kind.__name__}")
    return val


def _fill(cls, m: dict, path: str, src: str, required=(), rename=None, skip=()):
    """Build dataclass ``cls`` from mapping ``m``; unknown or missing keys are named errors."""
    rename = rename or {}
    names = {f.name for f in fields(cls)}
    kw = {}
    for k, v in m.items():
        if k in skip:
            continue
        target = rename.get(k, k)
        if target not in names:
            raise ConfigError(f"{_where(src, m, k)}: unknown field '{path}.{k}'")
        kw[target] = v
    for r in required:
        if r not in m:
            raise ConfigError(f"{_where(src, m)}: missing required field '{path}.{r}'")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(src, m)}: invalid '{path}': {exc}") from None


@dataclass
class DatasetSpec:
    name: str
    kind: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if int(self.n) <= 0:
            raise ValueError("n must be positive")

    def build(self, tok: TokenizerConfig) -> SyntheticDataset:
        return generate_synthetic(self.kind, self.seed, self.n, tok.image_size, tok.channels, tok.max_frames)


@dataclass
class ModelSection:
    bpe_merges: int = 100
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 64
    max_len: int = 64
    n_prompts: int = 10
    tau_init: float = 0.07
    patch: int = 8
    image_size: int = 16
    channels: int = 3
    max_frames: int = 2
    text_max_len: int = 32
    init_seed: int = 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        tok = TokenizerConfig(self.dim, self.patch, self.image_size, self.channels, self.max_frames,
                              self.text_max_len)
        enc = EncoderConfig(self.n_layers, self.dim, self.n_heads, self.ffn_dim, 0.0, self.max_len)
        return ModelConfig(vocab_size, tok, enc, self.n_prompts, self.tau_init)


@dataclass
class RunConfig:
    model: ModelSection
    train: TrainConfig
    datasets: list[DatasetSpec]
    tasks: list[TaskSpec]
    seed: int = 0
    mode: str = "pretrain"
    checkpoint_every: int = 0
    eval: dict = field(default_factory=lambda: {"n_batches": 20, "batch": 8})
    output_dir: str | None = None

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "mode": self.mode, "model": asdict(self.model),
             "train": {**asdict(self.train), "checkpoint_every": self.checkpoint_every},
             "datasets": [asdict(d) for d in self.datasets], "tasks": [asdict(t) for t in self.tasks],
             "eval": dict(self.eval)}
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        return d

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_run_config(text: str, src: str = "<config>") -> RunConfig:
    doc = parse_yaml(text, src)
    if not isinstance(doc, dict):
        raise ConfigError(f"{src}: expected a mapping at the top level")
    known = {"seed", "mode", "model", "train", "datasets", "tasks", "eval", "output_dir"}
    for k in doc:
        if k not in known:
            raise ConfigError(f"{_where(src, doc, k)}: unknown field '{k}'")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"{_where(src, doc, 'seed')}: field 'seed' must be an integer")
    mode = doc.get("mode", "pretrain")
    if mode != "pretrain":
        raise ConfigError(f"{_where(src, doc, 'mode')}: run files only support mode 'pretrain'")
    model = _fill(ModelSection, _section(doc, "model", src, required=False), "model", src)
    tsec = _section(doc, "train", src)
    tmap = _Map(tsec)
    tmap.line, tmap.key_lines = getattr(tsec, "line", 0), getattr(tsec, "key_lines", {})
    tmap.setdefault("seed", seed)
    if isinstance(tsec.get("steps"), int):
        tmap.setdefault("warmup", tsec["steps"] // 10)
    train = _fill(TrainConfig, tmap, "train", src, required=("steps",), skip=("checkpoint_every",))
    ds_list = _section(doc, "datasets", src, kind=list)
    if not ds_list:
        raise ConfigError(f"{_where(src, doc, 'datasets')}: 'datasets' is empty")
    datasets = []
    for i, d in enumerate(ds_list):
        if not isinstance(d, dict):
            raise ConfigError(f"{_where(src, doc, 'datasets')}: datasets[{i}] must be a mapping")
        datasets.append(_fill(DatasetSpec, d, f"datasets[{i}]", src, required=("name", "kind", "n")))
    by_name = {d.name: d for d in datasets}
    task_list = _section(doc, "tasks", src, kind=list)
    if not task_list:
        raise ConfigError(f"{_where(src, doc, 'tasks')}: 'tasks' is empty")
    tasks = []
    for i, t in enumerate(task_list):
        if not isinstance(t, dict):
            raise ConfigError(f"{_where(src, doc, 'tasks')}: tasks[{i}] must be a mapping")
        spec = _fill(TaskSpec, t, f"tasks[{i}]", src, required=("name", "kind"))
        if spec.dataset not in by_name:
            raise ConfigError(f"{_where(src, t, 'dataset')}: tasks[{i}].dataset '{spec.dataset}' is not declared")
        need = SAMPLER_SOURCES[spec.kind]
        if by_name[spec.dataset].kind != need:
            raise ConfigError(f"{_where(src, t)}: task kind '{spec.kind}' needs a '{need}' dataset")
        tasks.append(spec)
    try:
        sample_task(np.random.default_rng(0), [t.weight for t in tasks])
    except ConfigError as exc:
        raise ConfigError(f"{_where(src, doc, 'tasks')}: {exc}") from None
    ev = _section(doc, "eval", src, required=False) or {"n_batches": 20, "batch": 8}
    return RunConfig(model, train, datasets, tasks, seed, mode, int(tsec.get("checkpoint_every", 0)), dict(ev),
                     doc.get("output_dir"))


def read_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return load_run_config(text, str(p))


@dataclass
class MetricSpec:
    n_batches: int = 20
    batch: int = 8
    seed: int = 0


@dataclass
class TaskFile:
    kind: str
    eval: DatasetSpec
    train: DatasetSpec | None = None
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    metric: MetricSpec = field(default_factory=MetricSpec)


def load_task_file(text: str, src: str = "<task>") -> TaskFile:
    doc = parse_yaml(text, src)
    if not isinstance(doc, dict):
        raise ConfigError(f"{src}: expected a mapping at the top level")
    for k in doc:
        if k not in ("kind", "eval", "train", "adapt", "metric"):
            raise ConfigError(f"{_where(src, doc, k)}: unknown field '{k}'")
    if "kind" not in doc:
        raise ConfigError(f"{_where(src, doc)}: missing required field 'kind'")
    kind = doc["kind"]
    if kind not in SAMPLER_SOURCES:
        raise ConfigError(f"{_where(src, doc, 'kind')}: unknown task kind '{kind}'")

    def ds(key, required):
        m = _section(doc, key, src, required=required)
        if not m:
            return None
        spec = _fill(DatasetSpec, {"name": key, **m}, key, src, required=("kind", "n"))
        if spec.kind != SAMPLER_SOURCES[kind]:
            raise ConfigError(f"{_where(src, doc, key)}: task kind '{kind}' needs a '{SAMPLER_SOURCES[kind]}' dataset")
        return spec

    adapt = _fill(AdaptConfig, _section(doc, "adapt", src, required=False), "adapt", src)
    metric = _fill(MetricSpec, _section(doc, "metric", src, required=False), "metric", src)
    return TaskFile(kind, ds("eval", True), ds("train", False), adapt, metric)


def read_task_file(path) -> TaskFile:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return load_task_file(text, str(p))
