# Scaled-down experiment grid + report rendering.  Everything is cached
# under --out, so re-running is nearly free and --jobs only matters the
# first time.
#
#   python3 demos/budget_sweep_report.py --out /tmp/demo_runs --jobs 2
import argparse
from dataclasses import replace

from rewirelm import ExperimentPlan, ModelConfig, render_report, run_matrix
from rewirelm.harness import sweep_adaptation_budget

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_runs")
ap.add_argument("--jobs", type=int, default=1)
args = ap.parse_args()

plan = replace(
    ExperimentPlan(),
    plan_id="demo",
    config=ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=128),
    distances=("close", "distant"),
    budgets=(1_000, 10_000, 100_000),
    seeds=(0, 1),
    pretrain_tokens=80_000,
    pretrain_updates=800,
    k=100,
    adapt_corpus_tokens=150_000,
    adapt_updates=400,
    task_epochs=4,
    task_examples=600,
    eval_examples=200,
    probe_every=25,
)

result = run_matrix(plan, args.out, jobs=args.jobs)
print(f"{len(result.rows)} rows, {len(result.failures)} failures")

for p in sweep_adaptation_budget(result.rows):
    print(f"{p.variant:10s} {p.distance:8s} budget={p.budget:>7d} "
          f"median acc {p.accuracy:.3f}")

for path in render_report(plan, args.out, rows=result.rows):
    print("wrote", path)
