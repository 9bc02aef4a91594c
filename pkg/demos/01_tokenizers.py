"""Tokenizers: BPE on the toy grammar, then text, image and video layouts.

    python demos/01_tokenizers.py
"""
from jointpercept.model import ModelConfig
from jointpercept.tasks import TaskContext, build_vocabulary, generate_synthetic
from jointpercept.tokenizers import TokenizerConfig, bpe_train

# A tiny corpus shows the merge mechanics: the most frequent pair wins, ties go to the earliest pair.
vocab = bpe_train(["aaab", "aaab", "ab"], n_merges=2)
print("'aaab' ->", vocab.tokenize("aaab"))

# The toy world uses 100 merges over every sentence the synthetic grammar can produce.
vocab = build_vocabulary(100)
print(f"\ntoy vocabulary: {vocab.size} entries (3 specials)")
for text in ("a red ring in the top left", "what color is the shape ?"):
    print(f"  {text!r} -> {vocab.tokenize(text)}")

cfg = ModelConfig.toy(vocab.size)
ctx = TaskContext(vocab, cfg.tokenizer, cfg.encoder.max_len)
img = generate_synthetic("image-class", 0, 1).data["images"][0]
video = generate_synthetic("video-text-pairs", 0, 1).data["videos"][0]
for name, item in (("text", "a red ring in the top left"), ("image", img), ("video", video)):
    seq = ctx.seq(item)
    print(f"{name:5s}: {len(seq):2d} tokens, kinds {seq.kinds.tolist()}")

# Reference-scale token counts: 224 x 224 images at patch 16, 8-frame clips.
big = TokenizerConfig.reference()
print(f"\nreference scale: a {big.image_size}px image gives {big.grid ** 2} patches, "
      f"an 8-frame clip {8 * big.grid ** 2}")
