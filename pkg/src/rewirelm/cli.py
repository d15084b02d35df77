"""Command-line front end.

Subcommands mirror the pipeline stages plus the experiment drivers:

    pretrain      masked-LM pretraining on a corpus file
    adapt-lang    embedding-only adaptation of a checkpoint to a corpus
    adapt-task    body+head task training on generated pair data
    assemble      splice embeddings from one checkpoint onto another's body
    eval          zero-shot pair-classification accuracy of a checkpoint
    matrix        the full variant x language x budget x seed grid
    sweep-budget  matrix with the pseudo-adaptation row, plus curve report
    sweep-k       forgetting pretrains across reset intervals
    report        render figures from an existing results directory

Configuration comes from an optional key=value file (--config); command-line
flags override file values.  Exit codes: 0 success, 1 one or more cells
failed, 2 invalid configuration or unreadable inputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import pipeline as P
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluationError,
    PreconditionError,
    SizeError,
    VocabError,
)
from .harness import (
    ExperimentPlan,
    render_report,
    run_matrix,
    sweep_adaptation_budget,
    sweep_forgetting_interval,
)
from .metrics import MetricsLog
from .model import ModelConfig
from .optim import ForgettingConfig, ScheduleSpec, default_emb_schedule
from .synthdata import LanguageSpec, load_corpus, make_cls_dataset, make_language

_PLAN_INT = {"corpus_seed", "pretrain_tokens", "adapt_corpus_tokens",
             "pretrain_updates", "batch_size", "checkpoint_interval", "k",
             "adapt_updates", "task_epochs", "task_examples", "eval_examples",
             "eval_seed", "probe_every"}
_PLAN_FLOAT = {"peak_lr", "warmup_frac", "adapt_peak_lr", "task_peak_lr"}
_MODEL_INT = {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
              "max_seq_len", "n_classes"}
_LIST_INT = {"budgets", "seeds"}
_LIST_STR = {"variants", "distances"}


def parse_config_file(path) -> dict:
    """key=value lines; # starts a comment line; blank lines ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


def plan_from_config(values: dict) -> ExperimentPlan:
    kwargs, model_kwargs, base_kwargs = {}, {}, {}
    try:
        for key, raw in values.items():
            if key in _PLAN_INT:
                kwargs[key] = int(raw)
            elif key in _PLAN_FLOAT:
                kwargs[key] = float(raw)
            elif key in _LIST_INT:
                kwargs[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif key in _LIST_STR:
                kwargs[key] = tuple(x.strip() for x in raw.split(",") if x.strip())
            elif key == "plan_id":
                kwargs[key] = raw
            elif key == "include_pseudo":
                kwargs[key] = _parse_bool(raw)
            elif key in _MODEL_INT:
                model_kwargs[key] = int(raw)
            elif key == "dropout":
                model_kwargs[key] = float(raw)
            elif key == "tie_lm_head":
                model_kwargs[key] = _parse_bool(raw)
            elif key == "base_name":
                base_kwargs["name"] = raw
            elif key == "base_grammar_seed":
                base_kwargs["grammar_seed"] = int(raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}")
    if model_kwargs:
        kwargs["config"] = replace(ModelConfig(), **model_kwargs)
    if base_kwargs:
        kwargs["base"] = LanguageSpec(name=base_kwargs.get("name", "base"),
                                      grammar_seed=base_kwargs.get("grammar_seed", 7))
    return ExperimentPlan(**kwargs).validate()


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _load_plan(args) -> ExperimentPlan:
    values = parse_config_file(args.config) if args.config else {}
    plan = plan_from_config(values)
    if getattr(args, "seed", None) is not None:
        plan = replace(plan, seeds=(args.seed,))
    return plan.validate()


def _pick(flag, fallback):
    return fallback if flag is None else flag


# ---------------------------------------------------------------------------
# stage commands


def cmd_pretrain(args) -> int:
    plan = _load_plan_no_seed(args)
    corpus = load_corpus(args.corpus)
    updates = _pick(args.updates, plan.pretrain_updates)
    peak = _pick(args.peak_lr, plan.peak_lr)
    k = _pick(args.k, plan.k)
    sched = ScheduleSpec(peak_lr=peak,
                         warmup_updates=max(1, round(plan.warmup_frac * updates)),
                         total_updates=updates)
    if args.variant == "forgetting":
        fc = ForgettingConfig(k=k, emb_schedule=default_emb_schedule(peak, k))
    else:
        fc = ForgettingConfig(k=k, emb_schedule=sched, enabled=False)
    log = MetricsLog()
    ckpt = P.pretrain(plan.config, corpus, sched, fc, updates,
                      seed=args.seed, batch_size=plan.batch_size,
                      checkpoint_interval=plan.checkpoint_interval,
                      metrics=log, run_id=os.path.basename(args.out))
    h = P.save_checkpoint(ckpt, args.out)
    log.save_jsonl(f"{args.out}.metrics.jsonl")
    print(f"pretrain[{args.variant}] {updates} updates -> {args.out} ({h})")
    if ckpt.provenance.diverged_at is not None:
        print(f"warning: run diverged at step {ckpt.provenance.diverged_at}",
              file=sys.stderr)
    return 0


def cmd_adapt_lang(args) -> int:
    plan = _load_plan_no_seed(args)
    parent = P.load_checkpoint(args.parent)
    corpus = load_corpus(args.corpus)
    updates = _pick(args.updates, plan.adapt_updates)
    peak = _pick(args.peak_lr, plan.adapt_peak_lr)
    log = MetricsLog()
    ckpt = P.adapt_language(
        parent, corpus, args.budget, updates, seed=args.seed,
        schedule=ScheduleSpec(peak_lr=peak,
                              warmup_updates=max(1, round(0.08 * updates)),
                              total_updates=updates),
        batch_size=plan.batch_size, metrics=log,
        run_id=os.path.basename(args.out))
    h = P.save_checkpoint(ckpt, args.out)
    log.save_jsonl(f"{args.out}.metrics.jsonl")
    print(f"adapt-lang {corpus.spec.name} budget={args.budget} -> {args.out} ({h})")
    return 0


def cmd_adapt_task(args) -> int:
    plan = _load_plan_no_seed(args)
    parent = P.load_checkpoint(args.parent)
    spec = LanguageSpec(name=parent.provenance.language,
                        grammar_seed=_pick(args.grammar_seed, plan.base.grammar_seed),
                        script_offset=args.script_offset,
                        swap_fraction=args.swap_fraction,
                        reverse_word_order=args.reverse)
    data = make_cls_dataset(spec, _pick(args.examples, plan.task_examples),
                            seed=_pick(args.data_seed, plan.eval_seed + 1))
    freeze = (P.FreezeMask() if args.full_model
              else P.FreezeMask(embedding_frozen=True))
    log = MetricsLog()
    ckpt = P.adapt_task(parent, data, _pick(args.epochs, plan.task_epochs),
                        seed=args.seed, freeze=freeze,
                        peak_lr=_pick(args.peak_lr, plan.task_peak_lr),
                        batch_size=plan.batch_size, metrics=log,
                        run_id=os.path.basename(args.out))
    h = P.save_checkpoint(ckpt, args.out)
    log.save_jsonl(f"{args.out}.metrics.jsonl")
    acc = ckpt.provenance.val_accuracy
    print(f"adapt-task {spec.name} -> {args.out} ({h})"
          + (f" val_accuracy={acc:.4f}" if acc is not None else ""))
    return 0


def cmd_assemble(args) -> int:
    emb = P.load_checkpoint(args.emb)
    body = P.load_checkpoint(args.body)
    ckpt = P.assemble(emb, body)
    h = P.save_checkpoint(ckpt, args.out)
    print(f"assemble emb={emb.params_hash()} body={body.params_hash()} "
          f"-> {args.out} ({h})")
    return 0


def cmd_eval(args) -> int:
    plan = _load_plan_no_seed(args)
    ckpt = P.load_checkpoint(args.ckpt)
    if args.distance:
        spec = make_language(plan.base, args.distance)
        if spec.name != ckpt.provenance.language:
            raise EvaluationError(
                f"--distance {args.distance} implies language {spec.name!r} but "
                f"the checkpoint is for {ckpt.provenance.language!r}")
    else:
        spec = LanguageSpec(name=ckpt.provenance.language,
                            grammar_seed=_pick(args.grammar_seed, plan.base.grammar_seed),
                            script_offset=args.script_offset,
                            swap_fraction=args.swap_fraction,
                            reverse_word_order=args.reverse)
    data = make_cls_dataset(spec, _pick(args.examples, plan.eval_examples),
                            seed=_pick(args.data_seed, plan.eval_seed))
    acc = P.evaluate_zero_shot(ckpt, data)
    print(f"accuracy={acc!r} n={len(data.examples)} language={spec.name}")
    return 0


def _load_plan_no_seed(args) -> ExperimentPlan:
    values = parse_config_file(args.config) if args.config else {}
    return plan_from_config(values)


# ---------------------------------------------------------------------------
# experiment drivers


def cmd_matrix(args) -> int:
    plan = _load_plan(args)
    result = run_matrix(plan, args.out, jobs=args.jobs)
    print(f"matrix: {len(result.rows)} rows -> {os.path.join(args.out, 'results.csv')}")
    for cell, err in result.failures:
        print(f"FAILED {cell}: {err}", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_sweep_budget(args) -> int:
    plan = replace(_load_plan(args), include_pseudo=True)
    result = run_matrix(plan, args.out, jobs=args.jobs)
    points = sweep_adaptation_budget(result.rows)
    render_report(plan, args.out, rows=result.rows)
    for p in points:
        print(f"{p.variant:10s} {p.distance:8s} budget={p.budget:>8d} "
              f"median_accuracy={p.accuracy:.4f} (n={p.n_seeds})")
    for cell, err in result.failures:
        print(f"FAILED {cell}: {err}", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_sweep_k(args) -> int:
    plan = _load_plan(args)
    try:
        k_values = tuple(int(x) for x in args.k_values.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad --k-values {args.k_values!r}")
    if not k_values:
        raise ConfigError("--k-values is empty")
    rows = sweep_forgetting_interval(plan, k_values, args.out)
    for r in rows:
        state = (f"diverged_at={r.diverged_at}" if r.diverged_at is not None
                 else f"accuracy={r.accuracy:.4f}")
        print(f"K={r.k:<6d} resets={r.resets:<5d} {state}")
    return 0


def cmd_report(args) -> int:
    plan = _load_plan(args)
    written = render_report(plan, args.out)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rewirelm", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default=None, jobs=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        if out_default is argparse.SUPPRESS:
            p.add_argument("--out", required=True, help="output path")
        else:
            p.add_argument("--out", default=out_default, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="concurrent cell processes")

    p = sub.add_parser("pretrain", help="masked-LM pretraining on a corpus file")
    common(p, out_default=argparse.SUPPRESS)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", choices=("standard", "forgetting"),
                   default="standard")
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.set_defaults(func=cmd_pretrain, seed=0)

    p = sub.add_parser("adapt-lang", help="embedding-only language adaptation")
    common(p, out_default=argparse.SUPPRESS)
    p.add_argument("--parent", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.set_defaults(func=cmd_adapt_lang, seed=0)

    p = sub.add_parser("adapt-task", help="task training on generated pair data")
    common(p, out_default=argparse.SUPPRESS)
    p.add_argument("--parent", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--examples", type=int, default=None)
    p.add_argument("--grammar-seed", type=int, default=None)
    p.add_argument("--script-offset", type=int, default=0)
    p.add_argument("--swap-fraction", type=float, default=0.0)
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--full-model", action="store_true",
                   help="train embeddings too (no freezing)")
    p.set_defaults(func=cmd_adapt_task, seed=0)

    p = sub.add_parser("assemble", help="splice embedding and body checkpoints")
    p.add_argument("--emb", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", help="zero-shot accuracy of a checkpoint")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--distance", choices=("close", "medium", "distant"))
    p.add_argument("--grammar-seed", type=int, default=None)
    p.add_argument("--script-offset", type=int, default=0)
    p.add_argument("--swap-fraction", type=float, default=0.0)
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--examples", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run the full experiment grid")
    common(p, out_default="runs", jobs=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep-budget", help="budget sweep incl. pseudo-adaptation")
    common(p, out_default="runs", jobs=True)
    p.set_defaults(func=cmd_sweep_budget)

    p = sub.add_parser("sweep-k", help="reset-interval sweep")
    common(p, out_default="runs")
    p.add_argument("--k-values", default="25,250,1250")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("report", help="render figures from results")
    common(p, out_default="runs")
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PreconditionError, CheckpointError, EvaluationError,
            VocabError, SizeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
