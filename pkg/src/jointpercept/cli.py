"""Command-line entry point.

    jointpercept pretrain    --config run.yaml --out runs/toy
    jointpercept eval        --ckpt runs/toy/final.ckpt --task task.yaml [--zeroshot]
    jointpercept prompt-tune --ckpt runs/toy/final.ckpt --task task.yaml --steps 200 --fraction 0.01
    jointpercept finetune    --ckpt runs/toy/final.ckpt --task task.yaml --mode joint|head
    jointpercept inspect     --ckpt runs/toy/final.ckpt

Every command prints line-delimited JSON records on stdout. The thread count
of the numerical backend is taken from ``JOINTPERCEPT_THREADS`` when set.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .adapt import census, count_trainable, finetune, is_classification, prompt_tune
from .checkpoint import (CompatibilityError, IntegrityError, FORMAT_VERSION, load_model, read_checkpoint,
                         save_checkpoint, save_delta)
from .config import read_run_config, read_task_file
from .evaluate import evaluate
from .model import Model
from .numcore import UsageError
from .pretrain import ConfigError, OptimizerState, TrainingAborted, train
from .tasks import TaskContext, build_vocabulary

THREADS_ENV = "JOINTPERCEPT_THREADS"

EXIT_USAGE = 2
EXIT_INTEGRITY = 3
EXIT_COMPAT = 4
EXIT_ABORTED = 5


def emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _context(model: Model) -> TaskContext:
    if model.vocab is None:
        raise CompatibilityError("checkpoint carries no vocabulary")
    cfg = model.config
    return TaskContext(model.vocab, cfg.tokenizer, cfg.encoder.max_len)


def _strip_adaptation(model: Model) -> Model:
    params = {n: t for n, t in model.params.items()
              if not n.startswith(("prompt.", "head.", "fthead."))}
    return Model(model.config, model.vocab, dtype=model.dtype, params=params)


def _metric_record(event: str, metric, **extra) -> dict:
    return {"event": event, **metric.to_dict(), **extra}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    rc = read_run_config(args.config)
    out = Path(args.out or rc.output_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(rc.dumps(), encoding="utf-8")
    vocab = build_vocabulary(rc.model.bpe_merges)
    cfg = rc.model.model_config(vocab.size)
    model = Model(cfg, vocab, seed=rc.model.init_seed)
    ctx = TaskContext(vocab, cfg.tokenizer, cfg.encoder.max_len)
    datasets = {d.name: d.build(cfg.tokenizer) for d in rc.datasets}
    state = OptimizerState()
    every = rc.checkpoint_every

    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        def log_fn(rec):
            log.write(rec.to_json() + "\n")
            if every and rec.step % every == 0 and rec.step < rc.train.steps:
                save_checkpoint(out / f"step_{rec.step:06d}.ckpt", model, state, rec.step)

        try:
            train(rc.train, model, rc.tasks, datasets, ctx, state=state, log_fn=log_fn)
        except TrainingAborted as exc:
            h = save_checkpoint(out / "last_good.ckpt", model, state, exc.step - 1)
            emit({"event": "aborted", "step": exc.step, "error": str(exc.__cause__), "checkpoint_hash": h})
            return EXIT_ABORTED
    h = save_checkpoint(out / "final.ckpt", model, state, rc.train.steps)
    ev = rc.eval
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mf:
        for spec in rc.tasks:
            m = evaluate(model, spec.kind, datasets[spec.dataset], ctx, int(ev.get("n_batches", 20)),
                         int(ev.get("batch", spec.batch_size)), seed=rc.seed)
            rec = _metric_record("metric", m, task=spec.name)
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            emit(rec)
    emit({"event": "checkpoint", "path": str(out / "final.ckpt"), "hash": h, "step": rc.train.steps})
    return 0


def cmd_eval(args) -> int:
    model, ck = load_model(args.ckpt)
    tf = read_task_file(args.task)
    if args.zeroshot:
        model = _strip_adaptation(model)
    ctx = _context(model)
    ds = tf.eval.build(model.config.tokenizer)
    fh = "fthead.w" in model.params
    m = evaluate(model, tf.kind, ds, ctx, tf.metric.n_batches, tf.metric.batch, tf.metric.seed,
                 use_head="head.w" in model.params, feature_head=fh and is_classification(tf.kind))
    emit(_metric_record("eval", m, mode="zeroshot" if args.zeroshot else "adapted", ckpt_hash=ck.hash))
    return 0


def _tuning_inputs(args):
    model, ck = load_model(args.ckpt)
    if ck.kind != "full":
        raise CompatibilityError("adaptation starts from a full checkpoint, not a delta")
    tf = read_task_file(args.task)
    if tf.train is None:
        raise ConfigError(f"{args.task}: adaptation needs a 'train' dataset")
    model = _strip_adaptation(model)
    ctx = _context(model)
    tok = model.config.tokenizer
    return model, ck, tf, ctx, tf.train.build(tok), tf.eval.build(tok)


def _evaluate(model, tf, ctx, ds, **kw):
    return evaluate(model, tf.kind, ds, ctx, tf.metric.n_batches, tf.metric.batch, tf.metric.seed, **kw)


def cmd_prompt_tune(args) -> int:
    model, ck, tf, ctx, train_ds, eval_ds = _tuning_inputs(args)
    if not 0.0 < args.fraction <= 1.0:
        raise ConfigError("--fraction must lie in (0, 1]")
    n_sub = max(1, math.ceil(args.fraction * len(train_ds)))
    idx = np.random.default_rng(tf.adapt.seed).permutation(len(train_ds))[:n_sub]
    cfg = dataclasses.replace(tf.adapt, steps=args.steps if args.steps is not None else tf.adapt.steps)
    before = _evaluate(model, tf, ctx, eval_ds)
    tuned, log = prompt_tune(model, tf.kind, train_ds, ctx, cfg, indices=idx)
    after = _evaluate(tuned, tf, ctx, eval_ds, use_head=True)
    names = tuned.trainable()
    n_classes = tuned.params["head.w"].shape[0] if "head.w" in tuned.params else None
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".prompt.ckpt")
    base_rel = os.path.relpath(Path(args.ckpt).resolve(), out.resolve().parent)
    h = save_delta(out, tuned, names, ck.hash, {"base_path": base_rel, "task": tf.kind, "steps": cfg.steps,
                                                "examples": int(n_sub)})
    emit({"event": "prompt_tune", "kind": tf.kind, "steps": cfg.steps, "examples": int(n_sub),
          "trainable": tuned.n_params(names),
          "count_trainable": count_trainable(model.config, "prompt_tune", n_classes),
          "before": before.value, "after": after.value, "chance": after.chance,
          "final_loss": log[-1]["loss"] if log else None, "delta": str(out), "delta_hash": h, "base_hash": ck.hash})
    return 0


def cmd_finetune(args) -> int:
    model, ck, tf, ctx, train_ds, eval_ds = _tuning_inputs(args)
    mode = {"joint": "joint_prob", "head": "feature_head"}[args.mode]
    cfg = dataclasses.replace(tf.adapt, steps=args.steps if args.steps is not None else tf.adapt.steps)
    before = _evaluate(model, tf, ctx, eval_ds)
    tuned, log = finetune(model, tf.kind, train_ds, ctx, cfg, mode=mode)
    after = _evaluate(tuned, tf, ctx, eval_ds, feature_head=mode == "feature_head")
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(f".{args.mode}.ckpt")
    h = save_checkpoint(out, tuned, step=cfg.steps, meta={"base_hash": ck.hash, "task": tf.kind, "mode": mode})
    emit({"event": "finetune", "kind": tf.kind, "mode": mode, "steps": cfg.steps,
          "trainable": tuned.n_params(tuned.trainable()), "before": before.value, "after": after.value,
          "chance": after.chance, "final_loss": log[-1]["loss"] if log else None, "checkpoint": str(out),
          "hash": h})
    return 0


def cmd_inspect(args) -> int:
    ck = read_checkpoint(args.ckpt)
    shapes = {n: t.shape for n, t in ck.params.items()}
    n_classes = shapes["head.w"][0] if "head.w" in shapes else None
    report = {
        "event": "inspect", "format_version": FORMAT_VERSION, "kind": ck.kind, "hash": ck.hash,
        "base_hash": ck.base_hash, "step": ck.step, "config": ck.config.to_dict(), "census": census(shapes),
        "optimizer_state": ck.optimizer_step is not None,
        "count_trainable": {mode: count_trainable(ck.config, mode, n_classes)
                            for mode in ("pretrain", "prompt_tune", "finetune")},
        "meta": ck.meta,
    }
    emit(report)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointpercept", description="Unified-perception toy models.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="multi-task pre-training from a run file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: output_dir from the run file)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--zeroshot", action="store_true", help="ignore any adaptation parameters")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("prompt-tune", help="few-shot prompt tuning; writes a delta checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--fraction", type=float, default=0.01, help="share of the training set used")
    s.add_argument("--out")
    s.set_defaults(func=cmd_prompt_tune)

    s = sub.add_parser("finetune", help="full fine-tuning; writes a full checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--mode", choices=("joint", "head"), default="joint")
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("inspect", help="parameter census, config echo and hash")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, UsageError) as exc:
        emit({"event": "error", "type": "config" if isinstance(exc, ConfigError) else "usage",
              "message": str(exc)}, sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        emit({"event": "error", "type": "integrity", "message": str(exc)}, sys.stderr)
        return EXIT_INTEGRITY
    except CompatibilityError as exc:
        emit({"event": "error", "type": "compatibility", "message": str(exc)}, sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
