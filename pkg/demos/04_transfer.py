"""Transfer from the pre-trained toy model: zero-shot, prompt tuning, fine-tuning.

Run demos/03_pretrain_toy.py first (or this script pre-trains on the fly).

    python demos/04_transfer.py
"""
from pathlib import Path

import numpy as np

from jointpercept.adapt import AdaptConfig, count_trainable, finetune, prompt_tune
from jointpercept.checkpoint import load_model
from jointpercept.evaluate import evaluate
from jointpercept.recipes import toy_pretrain
from jointpercept.tasks import TaskContext, generate_synthetic

ckpt = Path("runs/demo/final.ckpt")
if ckpt.exists():
    model, _ = load_model(ckpt)
else:
    model = toy_pretrain()[0]
ctx = TaskContext(model.vocab, model.config.tokenizer, model.config.encoder.max_len)

# Video-text retrieval was never trained; videos reuse the image patch pathway plus a frame embedding.
for seed in (100, 101, 102):
    m = evaluate(model, "video_text_retrieval", generate_synthetic("video-text-pairs", seed, 256), ctx, seed=seed)
    print(f"zero-shot video-text R@1 (data seed {seed}): {m.value:.3f}  chance {m.chance:.3f}")

# Prompt tuning on 1% of a VQA set: the backbone stays frozen.
train_ds, test_ds = generate_synthetic("qa-triples", 11, 3200), generate_synthetic("qa-triples", 12, 256)
cfg = AdaptConfig(steps=200, lr=3e-3)
idx = np.random.default_rng(cfg.seed).permutation(len(train_ds))[:32]
tuned, log = prompt_tune(model, "vqa", train_ds, ctx, cfg, indices=idx)
print(f"\nVQA, {len(idx)} examples, {count_trainable(model.config, 'prompt_tune'):,} trainable parameters")
print(f"  zero-shot {evaluate(model, 'vqa', test_ds, ctx).value:.3f}"
      f" -> prompt-tuned {evaluate(tuned, 'vqa', test_ds, ctx, use_head=True).value:.3f}")

# Fine-tuning a new task two ways: through the shared matching rule, or with a linear head on the SPE feature.
train_ds, test_ds = generate_synthetic("image-class", 11, 3200), generate_synthetic("image-class", 12, 256)
cfg = AdaptConfig(steps=400, lr=1e-3)
joint, _ = finetune(model, "position_classification", train_ds, ctx, cfg, mode="joint_prob")
head, _ = finetune(model, "position_classification", train_ds, ctx, cfg, mode="feature_head")
print("\nposition classification after fine-tuning:")
print(f"  joint probability {evaluate(joint, 'position_classification', test_ds, ctx).value:.3f}")
print(f"  feature head      {evaluate(head, 'position_classification', test_ds, ctx, feature_head=True).value:.3f}")
