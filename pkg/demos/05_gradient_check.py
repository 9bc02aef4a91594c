"""Finite-difference audit of the hand-written autograd on the full toy model.

    python demos/05_gradient_check.py
"""
import numpy as np

from jointpercept import numcore as nc
from jointpercept.head import task_loss
from jointpercept.model import Model, ModelConfig, param_group
from jointpercept.tasks import TaskContext, build_vocabulary, generate_synthetic, sample_batch

vocab = build_vocabulary(100)
cfg = ModelConfig.toy(vocab.size)
ctx = TaskContext(vocab, cfg.tokenizer, cfg.encoder.max_len)
model = Model(cfg, vocab, seed=0, dtype=np.float64)
model.add_prompts(seed=1)
model.add_adapt_head(8)
model.params["prompt.input_gate"].data[:] = 0.5
model.params["prompt.target_gate"].data[:] = -0.3
model.set_trainable({n: True for n in model.params})

inst = sample_batch("image_classification", generate_synthetic("image-class", 0, 8), ctx, np.random.default_rng(0), 4)
rep = nc.grad_check(lambda: task_loss(inst, model, use_head=True), model.params, step=1e-4, tol=1e-3,
                    max_per_input=4)
worst: dict[str, float] = {}
for name, err in rep.per_input.items():
    worst[param_group(name)] = max(worst.get(param_group(name), 0.0), err)
for group, err in sorted(worst.items()):
    print(f"{group:14s} max relative error {err:.1e}")
print(f"{rep.n_checked} entries checked: {'pass' if rep.passed else 'FAIL'}")
