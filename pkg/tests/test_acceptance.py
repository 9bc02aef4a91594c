"""The ten acceptance criteria, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. The pre-trained toy model is built once per
session (about a minute) and shared by criteria 3, 5, 6, 7 and 8.
"""
import numpy as np
import pytest

from jointpercept import numcore as nc
from jointpercept.adapt import AdaptConfig, count_trainable, finetune, leak_audit, prompt_tune, zero_shot
from jointpercept.checkpoint import load_model, save_checkpoint
from jointpercept.decode import greedy_decode, slot_logits, teacher_forced, vocab_features
from jointpercept.evaluate import evaluate
from jointpercept.head import feature_head_logits, infer, instance_features, predict, smoothed_nll, task_loss
from jointpercept.model import Model, ModelConfig, param_group
from jointpercept.pretrain import (TrainConfig, clip_gradients, global_norm, lr_at, make_step_fn, simulate_workers,
                                   train)
from jointpercept.recipes import TOY_TASKS, toy_pretrain
from jointpercept.tasks import ar_sequence, generate_synthetic, sample_batch
from jointpercept.tokenizers import N_SPECIAL
from test_numcore import OPS, leaf, weighted_sum

F64 = np.float64


# -- 1 -----------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_parameter_counts_at_bert_base_scale():
    cfg = ModelConfig.bert_base()
    without_head = count_trainable(cfg, "prompt_tune")
    with_head = count_trainable(cfg, "prompt_tune", n_classes=1000)
    print(f"BERT-Base prompt tuning: {without_head:,} without head, {with_head:,} with a 1000-class head")
    assert abs(without_head - 227_000) <= 5_000
    assert abs(with_head - 995_000) <= 10_000


# -- 2 -----------------------------------------------------------------------

@pytest.mark.criterion(2)
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes, kw = OPS[name]
    inputs = [leaf(s, seed=i, **kw) for i, s in enumerate(shapes)]
    rep = nc.grad_check(lambda: weighted_sum(fn(*inputs)), inputs, step=1e-6, tol=1e-4)
    assert rep.max_rel_err < 1e-4, (name, rep.per_input)


@pytest.mark.criterion(2)
def test_full_model_gradient(ctx, vocab, toy_config):
    m = Model(toy_config, vocab, seed=0, dtype=F64)
    m.add_prompts(seed=1)
    m.add_adapt_head(8)
    m.add_feature_head(4, seed=2)
    rng = np.random.default_rng(0)
    # open the prompt gates and randomise the head so no branch sits at a special point
    for n in ("prompt.input_gate", "prompt.target_gate", "head.alpha", "head.w", "head.b"):
        m.params[n].data[...] = rng.normal(0.0, 0.5, m.params[n].shape)
    m.set_trainable({n: True for n in m.params})

    src = {k: generate_synthetic(k, 5, 16)
           for k in ("image-class", "text-corpus", "image-text-pairs", "video-text-pairs", "qa-triples")}
    batches = [("image_classification", "image-class", 3, True), ("captioning", "image-text-pairs", 2, False),
               ("masked_lm", "text-corpus", 2, False), ("video_text_retrieval", "video-text-pairs", 2, False),
               ("vqa", "qa-triples", 2, False)]
    insts = [(sample_batch(kind, src[ds], ctx, np.random.default_rng(i), b), head)
             for i, (kind, ds, b, head) in enumerate(batches)]
    pos = sample_batch("position_classification", src["image-class"], ctx, np.random.default_rng(9), 3)

    def loss():
        terms = [task_loss(inst, m, use_head=head) for inst, head in insts]
        terms.append(smoothed_nll(feature_head_logits(m, pos), pos.truth, 0.1))
        return nc.add_n(terms)

    # step 1e-4: adapted-head scores reach exp(1/tau) ~ 1e6, so smaller steps amplify round-off
    rep = nc.grad_check(loss, m.params, step=1e-4, tol=1e-3, max_per_input=6, floor=1e-6,
                        rng=np.random.default_rng(1))
    groups: dict[str, float] = {}
    for n, err in rep.per_input.items():
        groups[param_group(n)] = max(groups.get(param_group(n), 0.0), err)
    print(f"checked {rep.n_checked} entries; worst relative error per group:")
    for g, err in sorted(groups.items()):
        print(f"  {g:14s} {err:.2e}")
    assert set(groups) == {"spe", "temperature", "tokenizer", "tokenizer_ln", "encoder", "encoder_ln", "prompts",
                           "adapt_head", "feature_head"}
    assert "log_tau" in rep.per_input
    assert rep.max_rel_err < 1e-3, groups


# -- 3 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def model64(pretrained_model):
    return pretrained_model.astype(F64)


@pytest.fixture(scope="module")
def captions():
    return generate_synthetic("image-text-pairs", 7, 100)


@pytest.mark.criterion(3)
def test_later_tokens_never_reach_earlier_slots(model64, ctx, captions):
    rng = np.random.default_rng(0)
    word_ids = np.arange(N_SPECIAL, ctx.vocab.size)
    checked = 0
    for i in range(20):
        ids = ctx.vocab.encode(captions.data["captions"][i])
        img = captions.data["images"][i]
        base = model64.features([ar_sequence(ctx, ids, img)], ar_sequence(ctx, ids, img).slot_rows, "input").data
        for t in range(1, len(ids) + 1):
            changed = list(ids[:t - 1]) + list(rng.choice(word_ids, size=len(ids) - t + 1))
            seq = ar_sequence(ctx, changed, img)
            out = model64.features([seq], seq.slot_rows, "input").data
            # slots predicting positions 1..t see only words before t
            assert np.array_equal(out[:t], base[:t]), (i, t)
            checked += t
    print(f"{checked} slot outputs bitwise unchanged under perturbation of later words")


@pytest.mark.criterion(3)
def test_teacher_forcing_matches_greedy_decoding(model64, ctx, captions):
    fy = vocab_features(model64, ctx)
    greedy_mismatch = prefix_mismatch = 0
    for i in range(100):
        img = captions.data["images"][i]
        ids = ctx.vocab.encode(captions.data["captions"][i])
        g = greedy_decode(model64, ctx, len(ids), img, fy)
        greedy_mismatch += list(teacher_forced(model64, ctx, g, img, fy)) != g
        # the same alignment on the ground-truth caption, one slot at a time
        tf = teacher_forced(model64, ctx, ids, img, fy)
        inc = [int(slot_logits(model64, ctx, ar_sequence(ctx, ids[:t - 1], img, n_slots=1, first=t), fy)[0]
                   .argmax()) + N_SPECIAL for t in range(1, len(ids) + 1)]
        prefix_mismatch += list(tf) != inc
    print(f"100 captions: {greedy_mismatch} greedy mismatches, {prefix_mismatch} ground-truth-prefix mismatches")
    assert greedy_mismatch == 0 and prefix_mismatch == 0


# -- 4 -----------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_probability_contracts(pretrained_model, ctx):
    ds = generate_synthetic("image-class", 21, 64)
    inst = sample_batch("image_classification", ds, ctx, np.random.default_rng(0), 64)
    with nc.no_grad():
        fx, fy = instance_features(inst, pretrained_model)
    lt = pretrained_model.params["log_tau"]
    arg, p = infer(fx, fy, lt)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-6

    for c in (1e-3, 0.5, 7.0, 1e4):
        scaled = nc.Tensor(fy.data * c, dtype=fy.dtype)
        np.testing.assert_array_equal(infer(fx, scaled, lt)[0], arg)

    with nc.no_grad():
        from jointpercept.head import similarity_logits, softmax_np
        logits = similarity_logits(fx, fy, lt).data.astype(F64)
    for shift in (-50.0, 3.0, 1e3):
        q = softmax_np(logits + shift)
        np.testing.assert_array_equal(q.argmax(axis=1), arg)
        np.testing.assert_allclose(q, softmax_np(logits), atol=1e-6)

    dup = nc.Tensor(np.concatenate([fy.data, fy.data[2:3]]), dtype=fy.dtype)
    _, pd = infer(fx, dup, lt)
    assert np.abs(pd[:, 2] - pd[:, -1]).max() <= 1e-6
    print(f"max |sum p - 1| = {np.abs(p.sum(axis=1) - 1).max():.1e}; duplicate gap {np.abs(pd[:, 2] - pd[:, -1]).max():.1e}")


# -- 5 -----------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_multitask_pretraining(pretrained, world):
    model, log, _ = pretrained
    assert len(log) == 2000
    cls = evaluate(model, "image_classification", world.datasets["image-class"], world.ctx)
    itr = evaluate(model, "image_text_retrieval", world.datasets["image-text-pairs"], world.ctx,
                   n_batches=100, batch=8)  # 800 queries keep the estimate's spread near 1%
    mlm = evaluate(model, "masked_lm", world.datasets["text-corpus"], world.ctx)
    print(f"train classification {cls.value:.3f}; retrieval R@1 {itr.value:.3f} (batch 8); "
          f"masked LM {mlm.value:.3f} (chance {mlm.chance:.4f})")
    print(f"loss: first 50 steps {np.mean([r.loss for r in log[:50]]):.3f}, "
          f"last 50 {np.mean([r.loss for r in log[-50:]]):.3f}")
    assert cls.value >= 0.95
    assert itr.value >= 0.90
    assert mlm.value >= 5 * mlm.chance


# -- 6 -----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_zero_shot_video_text_retrieval(pretrained_model, ctx):
    results = []
    for seed in range(100, 110):
        ds = generate_synthetic("video-text-pairs", seed, 256)
        results.append(evaluate(pretrained_model, "video_text_retrieval", ds, ctx, n_batches=20, batch=8, seed=seed))
    print("video-text R@1 per seed:", " ".join(f"{r.value:.3f}" for r in results), f"(chance {results[0].chance})")
    for r in results:
        assert r.value >= 3 * r.chance


# -- 7 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def vqa_data():
    return generate_synthetic("qa-triples", 11, 3200), generate_synthetic("qa-triples", 12, 256)


@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind,source", [("vqa", "qa-triples"), ("image_classification", "image-class")])
def test_zero_step_prompt_tuning_preserves_zero_shot(pretrained_model, ctx, kind, source):
    ds = generate_synthetic(source, 12, 256)
    tuned, _ = prompt_tune(pretrained_model, kind, ds, ctx, AdaptConfig(steps=0))
    for i in range(0, len(ds), 32):
        inst = sample_batch(kind, ds, ctx, None, indices=np.arange(i, i + 32))
        np.testing.assert_array_equal(predict(inst, tuned, use_head=True)[0], zero_shot(pretrained_model, inst)[0])


@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind,source", [("vqa", "qa-triples"), ("image_classification", "image-class")])
def test_gradient_leak_audit(pretrained_model, ctx, kind, source):
    ds = generate_synthetic(source, 11, 64)
    tuned, _ = prompt_tune(pretrained_model, kind, ds, ctx, AdaptConfig(steps=3, lr=3e-3))
    inst = sample_batch(kind, ds, ctx, np.random.default_rng(5), 8)
    with nc.fresh_tape():
        leaks = leak_audit(tuned, task_loss(inst, tuned, use_head=True))
    frozen = [n for n, t in tuned.params.items() if not t.requires_grad]
    assert leaks == [] and len(frozen) > 0
    for n in frozen:
        assert not np.any(tuned.params[n].grad)
    assert all(np.any(tuned.params[n].grad) for n in ("spe", "prompt.input", "prompt.target"))


@pytest.mark.criterion(7)
def test_few_shot_prompt_tuning_beats_zero_shot(pretrained_model, ctx, vqa_data):
    train_ds, test_ds = vqa_data
    cfg = AdaptConfig(steps=200, lr=3e-3)
    idx = np.random.default_rng(cfg.seed).permutation(len(train_ds))[:len(train_ds) // 100]
    before = evaluate(pretrained_model, "vqa", test_ds, ctx).value
    tuned, _ = prompt_tune(pretrained_model, "vqa", train_ds, ctx, cfg, indices=idx)
    after = evaluate(tuned, "vqa", test_ds, ctx, use_head=True).value
    print(f"VQA with {len(idx)} training examples: zero-shot {before:.3f}, prompt-tuned {after:.3f}")
    assert after - before >= 0.05


# -- 8 -----------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_finetune_modes_agree(pretrained_model, ctx):
    train_ds, test_ds = generate_synthetic("image-class", 11, 3200), generate_synthetic("image-class", 12, 256)
    cfg = AdaptConfig(steps=400, lr=1e-3)
    joint, _ = finetune(pretrained_model, "position_classification", train_ds, ctx, cfg, mode="joint_prob")
    head, _ = finetune(pretrained_model, "position_classification", train_ds, ctx, cfg, mode="feature_head")
    a = evaluate(joint, "position_classification", test_ds, ctx).value
    b = evaluate(head, "position_classification", test_ds, ctx, feature_head=True).value
    print(f"position classification: joint probability {a:.3f}, feature head {b:.3f}")
    assert abs(a - b) <= 0.02


# -- 9 -----------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_schedule_units():
    cfg = TrainConfig(lr=2e-4, warmup=1000, steps=11_000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1000, cfg) == 2e-4
    assert lr_at(6000, cfg) == 1e-4


@pytest.mark.criterion(9)
def test_clip_hits_the_clip_norm():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = {"a": rng.normal(size=(4, 5)) * rng.uniform(1, 100), "b": rng.normal(size=7) * rng.uniform(1, 100)}
        limit = rng.uniform(0.1, 5.0)
        if global_norm(g) <= limit:
            continue
        out, _ = clip_gradients(g, limit)
        assert abs(global_norm(out) - limit) <= 1e-6


@pytest.mark.criterion(9)
def test_worker_sync_equals_joint_loss_gradient(world, toy_config):
    m = Model(toy_config, world.vocab, seed=3, dtype=F64)
    k = 4
    fn = make_step_fn(m, TOY_TASKS, world.datasets, world.ctx, 0, 1, [], training=False)
    synced, _ = simulate_workers(m, k, fn)
    m.zero_grad()
    with nc.fresh_tape():
        nc.backward(nc.scale(nc.add_n([fn(i) for i in range(k)]), 1.0 / k))
    worst = 0.0
    for n, g in synced.items():
        ref = m.params[n].grad
        scale = max(np.abs(ref).max(), 1e-12)
        worst = max(worst, float(np.abs(g - ref).max() / scale))
    print(f"worker sync vs joint loss: max relative difference {worst:.1e}")
    assert worst <= 1e-6


# -- 10 ----------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_same_seed_same_trace_and_checkpoint(tmp_path, world):
    runs = []
    for r in range(2):
        model, log, state, _ = toy_pretrain(seed=3, steps=25, world=world)
        h = save_checkpoint(tmp_path / f"run{r}.ckpt", model, state, 25)
        runs.append(([x.loss for x in log], h))
    assert runs[0] == runs[1]
    model, log, state, _ = toy_pretrain(seed=4, steps=25, world=world)
    assert save_checkpoint(tmp_path / "other.ckpt", model, state, 25) != runs[0][1]


@pytest.mark.criterion(10)
def test_round_trip_is_bit_exact_and_evaluation_invariant(tmp_path, pretrained, world):
    model, _, state = pretrained
    save_checkpoint(tmp_path / "final.ckpt", model, state, 2000)
    loaded, ck = load_model(tmp_path / "final.ckpt")
    for n, t in model.params.items():
        assert loaded.params[n].data.tobytes() == t.data.tobytes()
    back = ck.optimizer_state()
    assert back.step == state.step and all(np.array_equal(back.m[n], state.m[n]) for n in state.m)
    for kind, ds in (("image_classification", "image-class"), ("image_text_retrieval", "image-text-pairs"),
                     ("masked_lm", "text-corpus"), ("captioning", "image-text-pairs")):
        assert evaluate(model, kind, world.datasets[ds], world.ctx) == evaluate(loaded, kind, world.datasets[ds],
                                                                                world.ctx)
