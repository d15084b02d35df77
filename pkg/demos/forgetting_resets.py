"""What an embedding reset does to the loss curve.

Trains the same tiny model twice -- once plain, once with the embedding
table re-drawn every K updates -- and prints the loss right before and
after each reset.  The spike-and-recover pattern is the whole point:
the body is forced to solve the task again for a brand-new code book,
which is what makes it reusable later.

Writes loss_curves.svg next to this script unless --no-svg.
"""
import argparse
import os

from rewirelm import (ForgettingConfig, LanguageSpec, MetricsLog, ModelConfig,
                      ScheduleSpec, default_emb_schedule, generate_corpus)
from rewirelm.pipeline import pretrain
from rewirelm.svgplot import Series, line_chart

ap = argparse.ArgumentParser()
ap.add_argument("--updates", type=int, default=400)
ap.add_argument("--k", type=int, default=80)
ap.add_argument("--no-svg", action="store_true")
args = ap.parse_args()

config = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=128)
corpus = generate_corpus(LanguageSpec("demo", grammar_seed=7), 50_000, seed=1)
sched = ScheduleSpec(peak_lr=1e-3, warmup_updates=args.updates // 12,
                     total_updates=args.updates)

traces = {}
for name, fc in (
    ("standard", ForgettingConfig(k=args.k, emb_schedule=sched, enabled=False)),
    ("forgetting", ForgettingConfig(k=args.k,
                                    emb_schedule=default_emb_schedule(1e-3, args.k))),
):
    log = MetricsLog()
    pretrain(config, corpus, sched, fc, args.updates, seed=0,
             batch_size=16, checkpoint_interval=args.updates,
             metrics=log, run_id=name)
    traces[name] = [(r.step, r.loss) for r in log.for_run(name)
                    if r.loss is not None]
    if name == "forgetting":
        resets = [r.step for r in log.for_run(name) if r.event == "reset"]

loss = dict(traces["forgetting"])
print(f"resets at {resets}")
for r in resets:
    if r - 1 in loss and r + 1 in loss:
        print(f"  reset @{r:>4d}: loss {loss[r-1]:.3f} -> {loss[r+1]:.3f} "
              f"(spike {loss[r+1] - loss[r-1]:+.3f})")

if not args.no_svg:
    svg = line_chart(
        [Series(name, [s for s, _ in t], [v for _, v in t])
         for name, t in traces.items()],
        title=f"training loss, reset every {args.k} updates",
        xlabel="update", ylabel="masked-LM loss")
    path = os.path.join(os.path.dirname(__file__) or ".", "loss_curves.svg")
    with open(path, "w") as f:
        f.write(svg)
    print("wrote", path)
