"""Joint pre-training of the toy model on four tasks, then a checkpoint.

Classification, masked LM, captioning and image-text retrieval share one
encoder and one loss. About a minute per 2000 steps on one core.

    python demos/03_pretrain_toy.py [steps]
"""
import sys
from pathlib import Path

import numpy as np

from jointpercept.checkpoint import save_checkpoint
from jointpercept.evaluate import evaluate
from jointpercept.recipes import toy_pretrain

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out = Path("runs/demo")


def report(rec):
    if rec.step % 250 == 0:
        print(f"step {rec.step:5d}  loss {rec.loss:.3f}  lr {rec.lr:.2e}  tasks {','.join(rec.tasks)}")


model, log, state, world = toy_pretrain(seed=0, steps=steps, log_fn=report)
print(f"\nmean loss: first 50 steps {np.mean([r.loss for r in log[:50]]):.3f}, "
      f"last 50 {np.mean([r.loss for r in log[-50:]]):.3f}")

ds = world.datasets
for kind, src in (("image_classification", "image-class"), ("image_text_retrieval", "image-text-pairs"),
                  ("masked_lm", "text-corpus"), ("captioning", "image-text-pairs")):
    m = evaluate(model, kind, ds[src], world.ctx)
    print(f"{kind:21s} {m.metric:14s} {m.value:.3f}  (chance {m.chance:.3f})")

h = save_checkpoint(out / "final.ckpt", model, state, steps)
print(f"\nsaved {out / 'final.ckpt'}  sha256 {h[:16]}...")
