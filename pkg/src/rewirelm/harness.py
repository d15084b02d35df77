"""Experiment orchestration: the variant × language × budget × seed matrix,
budget and reset-interval sweeps, convergence statistics, and report files.

All artifacts live under a single output directory:

    out/
      plan.json                 the exact plan that ran
      corpora/                  generated corpus files + content hashes
      checkpoints/<key>/        cached stage checkpoints (key = params digest)
      rows/<key>.json           cached per-cell result rows
      metrics/<run_id>.jsonl    per-run step records
      results.csv               one row per matrix cell
      failures.csv              cells that raised, with the error text
      report/                   figure CSVs and SVG charts

Checkpoints and rows are keyed by a digest of everything that determines
them, so re-running the same plan is a cache read, and changing any knob
recomputes exactly the affected artifacts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from statistics import median

from . import pipeline as P
from .errors import ConfigError, PreconditionError
from .hashing import fnv1a_hex
from .metrics import MetricsLog
from .model import EMBEDDING_PARAM_NAMES, ModelConfig, TransformerModel
from .optim import ForgettingConfig, ScheduleSpec, default_emb_schedule
from .svgplot import Series, bar_chart, line_chart
from .synthdata import (
    DISTANCES,
    LanguageSpec,
    generate_corpus,
    make_cls_dataset,
    make_language,
    save_corpus,
)

VARIANTS = ("standard", "forgetting")
RESULT_HEADER = ["variant", "language", "distance", "budget", "seed",
                 "accuracy", "ckpt_hash"]


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything that determines one experiment matrix.

    Every (variant, language, budget, seed) cell runs the identical
    pipeline; only the named factor varies.  Defaults are the desk scale:
    5000 pretraining updates with K=250 (20 reset episodes), 1000
    adaptation updates, and a 1K..1M token budget grid.
    """

    plan_id: str = "desk"
    config: ModelConfig = field(default_factory=ModelConfig)
    base: LanguageSpec = field(default_factory=lambda: LanguageSpec(name="base", grammar_seed=7))
    variants: tuple = VARIANTS
    distances: tuple = DISTANCES
    budgets: tuple = (1_000, 10_000, 100_000, 1_000_000)
    seeds: tuple = (0, 1, 2)
    include_pseudo: bool = False
    corpus_seed: int = 1234
    pretrain_tokens: int = 200_000
    adapt_corpus_tokens: int = 1_002_000
    pretrain_updates: int = 5000
    batch_size: int = 16
    checkpoint_interval: int = 100
    k: int = 250
    peak_lr: float = 7e-4
    warmup_frac: float = 0.08
    adapt_updates: int = 1000
    adapt_peak_lr: float = 1e-3
    task_epochs: int = 10
    task_examples: int = 3000
    task_peak_lr: float = 1e-3
    eval_examples: int = 300
    eval_seed: int = 9999
    probe_every: int = 50

    def validate(self) -> "ExperimentPlan":
        self.config.validate()
        self.base.validate()
        if not self.variants or any(v not in VARIANTS for v in self.variants):
            raise ConfigError(f"variants must be drawn from {VARIANTS}")
        if not self.distances or any(d not in DISTANCES for d in self.distances):
            raise ConfigError(f"distances must be drawn from {DISTANCES}")
        if not self.budgets or list(self.budgets) != sorted(set(self.budgets)):
            raise ConfigError("budgets must be distinct and ascending")
        if self.budgets[0] < 64:
            raise ConfigError("smallest budget must hold at least one sequence")
        if self.budgets[-1] > self.adapt_corpus_tokens:
            raise ConfigError(
                f"largest budget {self.budgets[-1]} exceeds adaptation corpus "
                f"size {self.adapt_corpus_tokens}"
            )
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")
        for name in ("pretrain_tokens", "pretrain_updates", "batch_size",
                     "checkpoint_interval", "k", "adapt_updates",
                     "task_examples", "eval_examples", "probe_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.task_epochs < 0:
            raise ConfigError("task_epochs must be >= 0")
        if not (0.0 <= self.warmup_frac <= 0.5):
            raise ConfigError("warmup_frac must lie in [0, 0.5]")
        for name in ("peak_lr", "adapt_peak_lr", "task_peak_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        d["base"] = asdict(self.base)
        for key in ("variants", "distances", "budgets", "seeds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        d["config"] = ModelConfig.from_dict(d["config"])
        d["base"] = LanguageSpec(**d["base"])
        for key in ("variants", "distances", "budgets", "seeds"):
            d[key] = tuple(d[key])
        return cls(**d).validate()


@dataclass
class ResultRow:
    variant: str
    language: str
    distance: str
    budget: int
    seed: int
    accuracy: float
    ckpt_hash: str


@dataclass
class MatrixResult:
    rows: list
    failures: list  # (cell dict, error string)
    out_dir: str


def relative_gain(forgetting: float, standard: float) -> float:
    """(forgetting - standard) / standard, as a fraction (0.2 == +20%)."""
    if standard == 0:
        raise PreconditionError("relative gain undefined for a zero baseline")
    return (forgetting - standard) / standard


def averaged_relative_gain(pairs) -> float:
    """Mean of per-language relative gains over (forgetting, standard) pairs."""
    gains = [relative_gain(f, s) for f, s in pairs]
    if not gains:
        raise PreconditionError("no accuracy pairs to average")
    return sum(gains) / len(gains)


def headline_budget(plan: ExperimentPlan) -> int:
    """Budget used for single-budget summaries: 100K when on the grid."""
    return 100_000 if 100_000 in plan.budgets else plan.budgets[-1]


# ---------------------------------------------------------------------------
# plan-derived pieces


def body_schedule(plan: ExperimentPlan) -> ScheduleSpec:
    w = max(1, round(plan.warmup_frac * plan.pretrain_updates))
    return ScheduleSpec(peak_lr=plan.peak_lr, warmup_updates=w,
                        total_updates=plan.pretrain_updates)


def variant_forgetting(plan: ExperimentPlan, variant: str,
                       k: int | None = None) -> ForgettingConfig:
    k = plan.k if k is None else k
    if variant == "forgetting":
        return ForgettingConfig(k=k, emb_schedule=default_emb_schedule(plan.peak_lr, k))
    return ForgettingConfig(k=k, emb_schedule=body_schedule(plan), enabled=False)


def plan_languages(plan: ExperimentPlan, include_pseudo: bool | None = None):
    """(distance_label, LanguageSpec) pairs; pseudo = the base language
    re-adapted to itself, the sanity point of the budget sweep."""
    pairs = [(d, make_language(plan.base, d)) for d in plan.distances]
    if plan.include_pseudo if include_pseudo is None else include_pseudo:
        pairs.append(("pseudo", plan.base))
    return pairs


def pretrain_corpus(plan: ExperimentPlan):
    return generate_corpus(plan.base, plan.pretrain_tokens, seed=plan.corpus_seed)


def adaptation_corpus(plan: ExperimentPlan, spec: LanguageSpec):
    return generate_corpus(spec, plan.adapt_corpus_tokens, seed=plan.corpus_seed + 1)


def eval_dataset(plan: ExperimentPlan, spec: LanguageSpec):
    return make_cls_dataset(spec, plan.eval_examples, seed=plan.eval_seed)


def task_dataset(plan: ExperimentPlan):
    return make_cls_dataset(plan.base, plan.task_examples, seed=plan.eval_seed + 1)


def matrix_cells(plan: ExperimentPlan):
    cells = []
    for variant in plan.variants:
        for distance, spec in plan_languages(plan):
            for budget in plan.budgets:
                for seed in plan.seeds:
                    cells.append({"variant": variant, "distance": distance,
                                  "language": spec.name, "budget": budget,
                                  "seed": seed})
    return cells


# ---------------------------------------------------------------------------
# artifact cache


def _digest(obj) -> str:
    return fnv1a_hex(json.dumps(obj, sort_keys=True).encode())[:10]


def _pretrain_key(plan, variant, seed, k=None):
    spec = {
        "kind": "pretrain", "variant": variant, "seed": seed,
        "k": plan.k if k is None else k,
        "config": plan.config.to_dict(),
        "corpus": [plan.base.name, plan.base.grammar_seed, plan.corpus_seed,
                   plan.pretrain_tokens],
        "updates": plan.pretrain_updates, "batch": plan.batch_size,
        "interval": plan.checkpoint_interval,
        "peak_lr": plan.peak_lr, "warmup_frac": plan.warmup_frac,
    }
    tag = f"pre_{variant}_s{seed}" if k is None else f"pre_{variant}_k{spec['k']}_s{seed}"
    return f"{tag}_{_digest(spec)}"


def _task_key(plan, variant, seed, parent_hash, tag=""):
    spec = {
        "kind": "task", "parent": parent_hash,
        "dataset": [plan.base.name, plan.task_examples, plan.eval_seed + 1],
        "epochs": plan.task_epochs, "peak_lr": plan.task_peak_lr,
        "batch": plan.batch_size, "seed": seed,
    }
    return f"task_{variant}{tag}_s{seed}_{_digest(spec)}"


def _cell_key(plan, cell, parent_hash, task_hash):
    spec = {
        "kind": "cell", "parent": parent_hash, "task": task_hash,
        "corpus": [cell["language"], plan.corpus_seed + 1, plan.adapt_corpus_tokens],
        "budget": cell["budget"], "updates": plan.adapt_updates,
        "peak_lr": plan.adapt_peak_lr, "batch": plan.batch_size,
        "seed": cell["seed"],
        "eval": [plan.eval_examples, plan.eval_seed, plan.probe_every],
    }
    tag = (f"lang_{cell['variant']}_{cell['distance']}_b{cell['budget']}"
           f"_s{cell['seed']}")
    return f"{tag}_{_digest(spec)}"


def _ensure_dirs(out_dir):
    for sub in ("checkpoints", "rows", "metrics", "corpora", "report"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def _load_or_run(out_dir, key, compute, run_id=None):
    """Return the checkpoint cached under `key`, computing and saving it
    (plus its metrics file) on a miss."""
    path = os.path.join(out_dir, "checkpoints", key)
    if os.path.isdir(path):
        return P.load_checkpoint(path)
    log = MetricsLog()
    ckpt = compute(log)
    P.save_checkpoint(ckpt, path)
    if run_id is not None:
        log.save_jsonl(os.path.join(out_dir, "metrics", f"{run_id}.jsonl"))
    return ckpt


def ensure_pretrain(plan, variant, seed, out_dir, corpus=None, k=None,
                    run_id=None) -> P.Checkpoint:
    corpus = pretrain_corpus(plan) if corpus is None else corpus
    run_id = run_id or f"pre_{variant}_s{seed}"
    key = _pretrain_key(plan, variant, seed, k=k)

    def compute(log):
        return P.pretrain(
            plan.config, corpus, body_schedule(plan),
            variant_forgetting(plan, variant, k=k), plan.pretrain_updates,
            seed=seed, batch_size=plan.batch_size,
            checkpoint_interval=plan.checkpoint_interval, metrics=log,
            run_id=run_id,
        )

    return _load_or_run(out_dir, key, compute, run_id=run_id)


def ensure_task(plan, variant, seed, out_dir, parent, dataset=None,
                tag="") -> P.Checkpoint:
    dataset = task_dataset(plan) if dataset is None else dataset
    run_id = f"task_{variant}{tag}_s{seed}"
    key = _task_key(plan, variant, seed, parent.params_hash(), tag=tag)
    total = plan.task_epochs * max(1, math.ceil(
        len(dataset.examples) * 0.9 / plan.batch_size))

    def compute(log):
        return P.adapt_task(
            parent, dataset, plan.task_epochs, seed=seed,
            schedule=ScheduleSpec(peak_lr=plan.task_peak_lr,
                                  warmup_updates=max(1, round(0.1 * total)),
                                  total_updates=max(1, total)),
            batch_size=plan.batch_size, metrics=log, run_id=run_id,
        )

    return _load_or_run(out_dir, key, compute, run_id=run_id)


def _probe_hook(config, task_ckpt, examples):
    """Accuracy probe used during language adaptation: splice the live
    embeddings onto the frozen task body and score the target eval set."""
    from .tensor import Tensor

    body = {name: Tensor(arr.copy()) for name, arr in task_ckpt.params.items()
            if name not in EMBEDDING_PARAM_NAMES}

    def hook(model, n):
        spliced = TransformerModel(config, {
            name: (model.params[name] if name in EMBEDDING_PARAM_NAMES
                   else body[name])
            for name in model.params
        })
        return P.cls_accuracy(spliced, examples)

    return hook


def run_cell(plan, cell, out_dir, pre, task, corpus, eval_set) -> ResultRow:
    """One matrix cell: adapt embeddings on the budget, splice onto the
    task body, and score zero-shot.  The adapted checkpoint, its metrics,
    and the result row are all cached under the cell digest."""
    key = _cell_key(plan, cell, pre.params_hash(), task.params_hash())
    row_path = os.path.join(out_dir, "rows", f"{key}.json")
    if os.path.exists(row_path):
        with open(row_path) as f:
            return ResultRow(**json.load(f))

    run_id = f"lang_{cell['variant']}_{cell['distance']}_b{cell['budget']}_s{cell['seed']}"
    log = MetricsLog()
    dense_eval = cell["budget"] == plan.budgets[-1]
    lang = P.adapt_language(
        pre, corpus, cell["budget"], plan.adapt_updates, seed=cell["seed"],
        schedule=ScheduleSpec(peak_lr=plan.adapt_peak_lr,
                              warmup_updates=max(1, round(0.08 * plan.adapt_updates)),
                              total_updates=plan.adapt_updates),
        batch_size=plan.batch_size,
        eval_loss_every=1 if dense_eval else 10,
        eval_hook=_probe_hook(plan.config, task, eval_set.examples),
        eval_hook_every=plan.probe_every,
        metrics=log, run_id=run_id,
    )
    P.save_checkpoint(lang, os.path.join(out_dir, "checkpoints", key))
    log.save_jsonl(os.path.join(out_dir, "metrics", f"{run_id}.jsonl"))

    asm = P.assemble(lang, task)
    acc = P.evaluate_zero_shot(asm, eval_set)
    row = ResultRow(variant=cell["variant"], language=cell["language"],
                    distance=cell["distance"], budget=cell["budget"],
                    seed=cell["seed"], accuracy=acc,
                    ckpt_hash=asm.params_hash())
    tmp = f"{row_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(asdict(row), f, sort_keys=True)
    os.replace(tmp, row_path)
    return row


def _cell_worker(payload):
    """Process-pool entry: rebuild inputs deterministically, run one cell."""
    plan = ExperimentPlan.from_dict(payload["plan"])
    cell = payload["cell"]
    out_dir = payload["out_dir"]
    spec = next(s for d, s in plan_languages(plan, include_pseudo=True)
                if s.name == cell["language"])
    pre = P.load_checkpoint(os.path.join(out_dir, "checkpoints", payload["pre_key"]))
    task = P.load_checkpoint(os.path.join(out_dir, "checkpoints", payload["task_key"]))
    corpus = adaptation_corpus(plan, spec)
    eval_set = eval_dataset(plan, spec)
    row = run_cell(plan, cell, out_dir, pre, task, corpus, eval_set)
    return asdict(row)


def write_results_csv(rows, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow([r.variant, r.language, r.distance, r.budget, r.seed,
                        repr(r.accuracy), r.ckpt_hash])
    os.replace(tmp, path)


def read_results_csv(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_HEADER:
            raise ValueError(f"unexpected results header: {reader.fieldnames}")
        for d in reader:
            rows.append(ResultRow(variant=d["variant"], language=d["language"],
                                  distance=d["distance"], budget=int(d["budget"]),
                                  seed=int(d["seed"]),
                                  accuracy=float(d["accuracy"]),
                                  ckpt_hash=d["ckpt_hash"]))
    return rows


def _row_sort_key(plan):
    v_order = {v: i for i, v in enumerate(plan.variants)}
    d_order = {d: i for i, d in enumerate(list(plan.distances) + ["pseudo"])}
    return lambda r: (v_order[r.variant], d_order[r.distance], r.budget, r.seed)


def run_matrix(plan: ExperimentPlan, out_dir, jobs: int = 1) -> MatrixResult:
    """Execute every cell of the plan, sharing pretrains and task adapts.

    Pretraining runs once per (variant, seed) and task adaptation once per
    pretrain; cells differ only in their language-adaptation stage.  A cell
    that raises is recorded in failures and the matrix continues.
    """
    plan.validate()
    out_dir = os.fspath(out_dir)
    _ensure_dirs(out_dir)
    with open(os.path.join(out_dir, "plan.json"), "w") as f:
        json.dump(plan.to_dict(), f, indent=2, sort_keys=True)

    base_corpus = pretrain_corpus(plan)
    _write_corpus_files(plan, out_dir, base_corpus)
    tdata = task_dataset(plan)

    pres, tasks = {}, {}
    for variant in plan.variants:
        for seed in plan.seeds:
            pre = ensure_pretrain(plan, variant, seed, out_dir, corpus=base_corpus)
            task = ensure_task(plan, variant, seed, out_dir, pre, dataset=tdata)
            pres[(variant, seed)] = pre
            tasks[(variant, seed)] = task

    cells = matrix_cells(plan)
    rows, failures = [], []

    if jobs <= 1:
        corpora, evals = {}, {}
        for distance, spec in plan_languages(plan):
            corpora[spec.name] = adaptation_corpus(plan, spec)
            evals[spec.name] = eval_dataset(plan, spec)
        for cell in cells:
            pre = pres[(cell["variant"], cell["seed"])]
            task = tasks[(cell["variant"], cell["seed"])]
            try:
                rows.append(run_cell(plan, cell, out_dir, pre, task,
                                     corpora[cell["language"]],
                                     evals[cell["language"]]))
            except Exception as e:  # cell failure must not sink the matrix
                failures.append((cell, f"{type(e).__name__}: {e}"))
    else:
        payloads = []
        for cell in cells:
            pre = pres[(cell["variant"], cell["seed"])]
            payloads.append({
                "plan": plan.to_dict(), "cell": cell, "out_dir": out_dir,
                "pre_key": _pretrain_key(plan, cell["variant"], cell["seed"]),
                "task_key": _task_key(plan, cell["variant"], cell["seed"],
                                      pre.params_hash()),
            })
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, outcome in zip(cells, pool.map(_safe_cell_worker, payloads)):
                if "error" in outcome:
                    failures.append((cell, outcome["error"]))
                else:
                    rows.append(ResultRow(**outcome))

    rows.sort(key=_row_sort_key(plan))
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    _write_failures_csv(failures, os.path.join(out_dir, "failures.csv"))
    return MatrixResult(rows=rows, failures=failures, out_dir=out_dir)


def _safe_cell_worker(payload):
    try:
        return _cell_worker(payload)
    except Exception as e:
        return {"error": f"{type(e).__name__}: {e}"}


def _write_failures_csv(failures, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "language", "distance", "budget", "seed", "error"])
        for cell, err in failures:
            w.writerow([cell["variant"], cell["language"], cell["distance"],
                        cell["budget"], cell["seed"], err])
    os.replace(tmp, path)


def _write_corpus_files(plan, out_dir, base_corpus):
    """Persist every corpus the plan touches, recording content hashes.

    Idempotent per entry, so a plan that adds languages to an existing
    results directory fills in only the missing files.
    """
    meta_path = os.path.join(out_dir, "corpora", "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    todo = [("pretrain", lambda: base_corpus)]
    for distance, spec in plan_languages(plan):
        todo.append((f"adapt_{distance}",
                     lambda s=spec: adaptation_corpus(plan, s)))
    changed = False
    for label, make in todo:
        path = os.path.join(out_dir, "corpora", f"{label}.txt")
        if label in meta and os.path.exists(path):
            continue
        corpus = make()
        save_corpus(corpus, path)
        with open(path, "rb") as f:
            meta[label] = {"language": corpus.spec.name, "seed": corpus.seed,
                           "tokens": corpus.n_tokens,
                           "file_hash": fnv1a_hex(f.read())}
        changed = True
    if not changed:
        return
    tmp = f"{meta_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    os.replace(tmp, meta_path)


# ---------------------------------------------------------------------------
# aggregation: budget curves, convergence, K sweep


@dataclass
class CurvePoint:
    variant: str
    language: str
    distance: str
    budget: int
    accuracy: float  # median over seeds
    n_seeds: int


def sweep_adaptation_budget(rows) -> list:
    """Collapse matrix rows to accuracy-vs-budget curve points (median over
    seeds, one point per variant/language/budget)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.variant, r.language, r.distance, r.budget), []).append(r.accuracy)
    points = [CurvePoint(v, lang, d, b, float(median(accs)), len(accs))
              for (v, lang, d, b), accs in groups.items()]
    points.sort(key=lambda p: (p.variant, p.distance, p.budget))
    return points


@dataclass
class ConvergenceStats:
    threshold_step: int  # first step at >= 90% of final accuracy
    frac_at_10pct: float  # accuracy at 10% of updates / final accuracy
    final_accuracy: float


def adaptation_convergence(trace, total_updates: int) -> ConvergenceStats:
    """Convergence statistics from an (step, accuracy) probe trace.

    The threshold is measured against the run's own final accuracy; a trace
    that never reaches it (possible only when empty or with a nonpositive
    final value) is scored total_updates + 1.
    """
    trace = sorted(trace)
    if not trace or trace[-1][1] <= 0:
        final = trace[-1][1] if trace else 0.0
        return ConvergenceStats(total_updates + 1, 0.0, final)
    final = trace[-1][1]
    bar = 0.9 * final
    threshold = next((s for s, a in trace if a >= bar), total_updates + 1)
    mark = max(1, total_updates // 10)
    early = [a for s, a in trace if s <= mark]
    frac = early[-1] / final if early else 0.0
    return ConvergenceStats(int(threshold), float(frac), float(final))


def convergence_trace(out_dir, run_id):
    """(step, accuracy) probe pairs recorded during one adaptation run."""
    path = os.path.join(os.fspath(out_dir), "metrics", f"{run_id}.jsonl")
    log = MetricsLog.load_jsonl(path)
    return [(r.step, r.accuracy) for r in log.for_run(run_id, stage="adapt_language")
            if r.accuracy is not None]


def convergence_table(plan: ExperimentPlan, out_dir) -> list:
    """ConvergenceStats per cell, read back from stored metrics files."""
    rows = []
    for cell in matrix_cells(plan):
        run_id = (f"lang_{cell['variant']}_{cell['distance']}"
                  f"_b{cell['budget']}_s{cell['seed']}")
        path = os.path.join(os.fspath(out_dir), "metrics", f"{run_id}.jsonl")
        if not os.path.exists(path):
            continue
        stats = adaptation_convergence(convergence_trace(out_dir, run_id),
                                       plan.adapt_updates)
        rows.append({**cell, "threshold_step": stats.threshold_step,
                     "frac_at_10pct": stats.frac_at_10pct,
                     "final_accuracy": stats.final_accuracy})
    return rows


@dataclass
class KSweepRow:
    k: int
    resets: int
    diverged_at: int | None
    accuracy: float | None
    pretrain_run_id: str


def sweep_forgetting_interval(plan: ExperimentPlan, k_values, out_dir,
                              budget: int | None = None,
                              seed: int | None = None) -> list:
    """Forgetting pretrains across reset intervals, plus downstream accuracy.

    Reports per-K loss traces (via metrics files), reset counts, divergence
    flags, and zero-shot accuracy on the most distant language at the
    headline budget.  No ordering is asserted; this is a report.
    """
    plan.validate()
    out_dir = os.fspath(out_dir)
    _ensure_dirs(out_dir)
    seed = plan.seeds[0] if seed is None else seed
    budget = headline_budget(plan) if budget is None else budget
    distance = plan.distances[-1]
    spec = make_language(plan.base, distance)
    base_corpus = pretrain_corpus(plan)
    tdata = task_dataset(plan)
    target_corpus = adaptation_corpus(plan, spec)
    eval_set = eval_dataset(plan, spec)

    rows = []
    for k in k_values:
        run_id = f"ksweep_pre_k{k}_s{seed}"
        pre = ensure_pretrain(plan, "forgetting", seed, out_dir,
                              corpus=base_corpus, k=k, run_id=run_id)
        log = MetricsLog.load_jsonl(os.path.join(out_dir, "metrics", f"{run_id}.jsonl"))
        resets = sum(1 for r in log.for_run(run_id) if r.event == "reset")
        diverged = pre.provenance.diverged_at
        accuracy = None
        if diverged is None:
            task = ensure_task(plan, "forgetting", seed, out_dir, pre,
                               dataset=tdata, tag=f"_k{k}")
            cell = {"variant": "forgetting", "distance": f"k{k}_{distance}",
                    "language": spec.name, "budget": budget, "seed": seed}
            row = run_cell(plan, cell, out_dir, pre, task, target_corpus, eval_set)
            accuracy = row.accuracy
        rows.append(KSweepRow(k=k, resets=resets, diverged_at=diverged,
                              accuracy=accuracy, pretrain_run_id=run_id))

    _write_k_sweep_report(plan, rows, out_dir)
    return rows


def _write_k_sweep_report(plan, rows, out_dir):
    report = os.path.join(out_dir, "report")
    os.makedirs(report, exist_ok=True)
    with open(os.path.join(report, "fig_k_sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "resets", "diverged_at", "accuracy"])
        for r in rows:
            w.writerow([r.k, r.resets,
                        "" if r.diverged_at is None else r.diverged_at,
                        "" if r.accuracy is None else f"{r.accuracy:.10g}"])
    series = []
    for r in rows:
        log = MetricsLog.load_jsonl(
            os.path.join(out_dir, "metrics", f"{r.pretrain_run_id}.jsonl"))
        recs = [x for x in log.for_run(r.pretrain_run_id) if x.loss is not None]
        stride = max(1, len(recs) // 800)
        pts = recs[::stride]
        label = f"K={r.k}" + (" (diverged)" if r.diverged_at is not None else "")
        series.append(Series(label, [x.step for x in pts], [x.loss for x in pts]))
    svg = line_chart(series, title="Pretraining loss by reset interval",
                     xlabel="update", ylabel="loss")
    with open(os.path.join(report, "fig_k_sweep_loss.svg"), "w") as f:
        f.write(svg)


# ---------------------------------------------------------------------------
# report rendering


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def render_report(plan: ExperimentPlan, out_dir, rows=None) -> list:
    """Write figure CSVs, SVG charts, and the summary table; returns paths.

    Figures: accuracy vs budget (log x), pretraining loss with reset
    markers, per-language adaptation curves plus their cross-language
    median, and a relative-gain bar chart by distance at the headline
    budget.  The summary holds per-(budget, distance) medians and the
    across-language averaged relative gain.
    """
    out_dir = os.fspath(out_dir)
    report = os.path.join(out_dir, "report")
    os.makedirs(report, exist_ok=True)
    if rows is None:
        rows = read_results_csv(os.path.join(out_dir, "results.csv"))
    if not rows:
        raise PreconditionError("no result rows to report")
    written = []

    def emit(name, text):
        path = os.path.join(report, name)
        with open(path, "w") as f:
            f.write(text)
        written.append(path)
        return path

    # -- accuracy vs budget ------------------------------------------------
    points = sweep_adaptation_budget(rows)
    path = os.path.join(report, "fig_accuracy_vs_budget.csv")
    _write_csv(path, ["variant", "language", "distance", "budget", "median_accuracy", "n_seeds"],
               [[p.variant, p.language, p.distance, p.budget,
                 f"{p.accuracy:.10g}", p.n_seeds] for p in points])
    written.append(path)
    series = []
    for variant in plan.variants:
        for distance in [d for d, _ in plan_languages(plan)]:
            sel = [p for p in points if p.variant == variant and p.distance == distance]
            if sel:
                series.append(Series(f"{variant}/{distance}",
                                     [p.budget for p in sel],
                                     [p.accuracy for p in sel]))
    emit("fig_accuracy_vs_budget.svg",
         line_chart(series, title="Zero-shot accuracy vs adaptation budget",
                    xlabel="adaptation tokens", ylabel="accuracy", log_x=True))

    # -- pretraining loss with reset markers --------------------------------
    loss_rows, loss_series = [], []
    seed0 = plan.seeds[0]
    for variant in plan.variants:
        path = os.path.join(out_dir, "metrics", f"pre_{variant}_s{seed0}.jsonl")
        if not os.path.exists(path):
            continue
        log = MetricsLog.load_jsonl(path)
        recs = [r for r in log.for_run(f"pre_{variant}_s{seed0}") if r.loss is not None]
        loss_rows += [[variant, r.step, f"{r.loss:.6g}", r.event or ""] for r in recs]
        stride = max(1, len(recs) // 1200)
        pts = recs[::stride]
        loss_series.append(Series(variant, [r.step for r in pts], [r.loss for r in pts]))
        resets = [r for r in recs if r.event == "reset"]
        if resets:
            loss_series.append(Series(f"{variant} resets",
                                      [r.step for r in resets],
                                      [r.loss for r in resets], mode="points"))
    if loss_rows:
        path = os.path.join(report, "fig_pretrain_loss.csv")
        _write_csv(path, ["variant", "step", "loss", "event"], loss_rows)
        written.append(path)
        emit("fig_pretrain_loss.svg",
             line_chart(loss_series, title=f"Pretraining loss (seed {seed0})",
                        xlabel="update", ylabel="loss"))

    # -- adaptation accuracy curves -----------------------------------------
    curve_rows = []
    max_budget = plan.budgets[-1]
    per_language = {}
    for distance, spec in plan_languages(plan):
        for variant in plan.variants:
            traces = []
            for seed in plan.seeds:
                run_id = f"lang_{variant}_{distance}_b{max_budget}_s{seed}"
                mpath = os.path.join(out_dir, "metrics", f"{run_id}.jsonl")
                if os.path.exists(mpath):
                    traces.append(dict(convergence_trace(out_dir, run_id)))
            if not traces:
                continue
            steps = sorted(set().union(*[set(t) for t in traces]))
            med = [float(median([t[s] for t in traces if s in t])) for s in steps]
            per_language[(distance, variant)] = (steps, med)
            curve_rows += [[variant, spec.name, distance, s, f"{a:.10g}"]
                           for s, a in zip(steps, med)]
    if per_language:
        path = os.path.join(report, "fig_adaptation_accuracy.csv")
        _write_csv(path, ["variant", "language", "distance", "step", "median_accuracy"],
                   curve_rows)
        written.append(path)
        for distance in {d for d, _ in per_language}:
            series = [Series(variant, *per_language[(distance, variant)])
                      for d2, variant in per_language if d2 == distance]
            emit(f"fig_adaptation_accuracy_{distance}.svg",
                 line_chart(series,
                            title=f"Adaptation accuracy, {distance} (budget {max_budget})",
                            xlabel="adaptation update", ylabel="accuracy"))
        agg = []
        for variant in plan.variants:
            keys = [(d, v) for d, v in per_language if v == variant and d != "pseudo"]
            if not keys:
                continue
            steps = sorted(set().union(*[set(per_language[k][0]) for k in keys]))
            med = [float(median([dict(zip(*per_language[k]))[s]
                                 for k in keys if s in dict(zip(*per_language[k]))]))
                   for s in steps]
            agg.append(Series(f"{variant} (median over languages)", steps, med))
        if agg:
            emit("fig_adaptation_accuracy_median.svg",
                 line_chart(agg, title=f"Adaptation accuracy, cross-language median "
                                       f"(budget {max_budget})",
                            xlabel="adaptation update", ylabel="accuracy"))

    # -- relative gain by distance + summary --------------------------------
    med = {(p.variant, p.distance, p.budget): p.accuracy for p in points}
    have_both = ("standard" in plan.variants and "forgetting" in plan.variants)
    summary_rows = []
    for budget in plan.budgets:
        budget_gains = []
        for distance, spec in plan_languages(plan):
            s = med.get(("standard", distance, budget))
            fo = med.get(("forgetting", distance, budget))
            gain = ""
            if have_both and s is not None and s > 0 and fo is not None:
                g = relative_gain(fo, s)
                gain = f"{g:.10g}"
                if distance != "pseudo":
                    budget_gains.append(g)
            summary_rows.append([budget, distance,
                                 "" if s is None else f"{s:.10g}",
                                 "" if fo is None else f"{fo:.10g}", gain])
        if budget_gains:
            summary_rows.append([budget, "(avg)", "", "",
                                 f"{sum(budget_gains) / len(budget_gains):.10g}"])
    path = os.path.join(report, "summary.csv")
    _write_csv(path, ["budget", "distance", "standard_median",
                      "forgetting_median", "relative_gain"], summary_rows)
    written.append(path)

    if have_both:
        hb = headline_budget(plan)
        labels, values = [], []
        for distance in plan.distances:
            s = med.get(("standard", distance, hb))
            fo = med.get(("forgetting", distance, hb))
            if s is not None and s > 0 and fo is not None:
                labels.append(distance)
                values.append(relative_gain(fo, s))
        if labels:
            path = os.path.join(report, "fig_relative_gain.csv")
            _write_csv(path, ["distance", "budget", "relative_gain"],
                       [[l, hb, f"{v:.10g}"] for l, v in zip(labels, values)])
            written.append(path)
            emit("fig_relative_gain.svg",
                 bar_chart(labels, values,
                           title=f"Relative gain by distance (budget {hb})",
                           ylabel="relative gain"))
    return written
