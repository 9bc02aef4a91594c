"""The toy multi-task setup used by the demos, the acceptance checks and the bundled configs."""
from __future__ import annotations

from dataclasses import dataclass

from .model import Model, ModelConfig
from .pretrain import OptimizerState, TaskSpec, TrainConfig, train
from .tasks import SyntheticDataset, TaskContext, build_vocabulary, generate_synthetic
from .tokenizers import Vocabulary

# four pre-training tasks; retrieval is sampled four times as often as each of the others
TOY_TASKS = (
    TaskSpec("cls", "image_classification"),
    TaskSpec("mlm", "masked_lm"),
    TaskSpec("cap", "captioning"),
    TaskSpec("itr", "image_text_retrieval", weight=4.0),
)
TOY_DATASET_SIZE = 256
TOY_MERGES = 100


@dataclass
class ToyWorld:
    vocab: Vocabulary
    config: ModelConfig
    ctx: TaskContext
    datasets: dict[str, SyntheticDataset]


def toy_world(seed: int = 0, n: int = TOY_DATASET_SIZE, merges: int = TOY_MERGES, **encoder_overrides) -> ToyWorld:
    vocab = build_vocabulary(merges)
    cfg = ModelConfig.toy(vocab.size, **encoder_overrides)
    ctx = TaskContext(vocab, cfg.tokenizer, cfg.encoder.max_len)
    kinds = sorted({t.dataset for t in TOY_TASKS})
    return ToyWorld(vocab, cfg, ctx, {k: generate_synthetic(k, seed, n) for k in kinds})


def toy_train_config(steps: int = 2000, seed: int = 0) -> TrainConfig:
    return TrainConfig.toy(steps=steps, seed=seed, workers=4, lr=2e-3, warmup=min(100, steps))


def toy_pretrain(seed: int = 0, steps: int = 2000, world: ToyWorld | None = None, log_fn=None):
    """Pre-train a fresh toy model; returns ``(model, log, optimizer_state, world)``."""
    world = world or toy_world(seed)
    model = Model(world.config, world.vocab, seed=seed)
    state = OptimizerState()
    log, state = train(toy_train_config(steps, seed), model, TOY_TASKS, world.datasets, world.ctx, state, log_fn)
    return model, log, state, world
