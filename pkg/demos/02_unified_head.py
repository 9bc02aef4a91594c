"""One scoring rule for every task: cosine similarity of SPE features over a temperature.

Classification, VQA and captioning differ only in which sequences form the
inputs and which form the candidate targets.

    python demos/02_unified_head.py
"""
import numpy as np

from jointpercept.model import Model, ModelConfig
from jointpercept.head import predict, task_loss
from jointpercept.tasks import CLASS_NAMES, TaskContext, build_vocabulary, generate_synthetic, sample_batch

vocab = build_vocabulary(100)
cfg = ModelConfig.toy(vocab.size)
ctx = TaskContext(vocab, cfg.tokenizer, cfg.encoder.max_len)
model = Model(cfg, vocab, seed=0)
print(f"toy model: {model.n_params():,} parameters, tau = {np.exp(model.params['log_tau'].data[0]):.3f}")

rng = np.random.default_rng(0)
sources = {"image_classification": "image-class", "vqa": "qa-triples", "captioning": "image-text-pairs",
           "image_text_retrieval": "image-text-pairs", "masked_lm": "text-corpus"}
for kind, src in sources.items():
    inst = sample_batch(kind, generate_synthetic(src, 0, 32), ctx, rng, 4)
    pred, probs = predict(inst, model)
    print(f"{kind:21s} {inst.n_queries:3d} queries x {len(inst.targets):3d} candidates, "
          f"loss {task_loss(inst, model).item():.3f}, rows sum to {probs.sum(axis=1).min():.6f}")

# An untrained model is near chance; the class names are ordinary text targets.
inst = sample_batch("image_classification", generate_synthetic("image-class", 1, 8), ctx, rng, 8)
pred, _ = predict(inst, model)
print("\npredicted:", [CLASS_NAMES[p] for p in pred[:3]], "\ntrue:     ", [CLASS_NAMES[t] for t in inst.truth[:3]])
