# Masked-LM pretraining on a generated corpus, small enough to watch live.
# Usage: python3 demos/train_tiny_mlm.py --updates 300 --out /tmp/tiny_ckpt
import argparse
import time

from rewirelm import (ForgettingConfig, LanguageSpec, MetricsLog, ModelConfig,
                      ScheduleSpec, generate_corpus)
from rewirelm.pipeline import pretrain, save_checkpoint

ap = argparse.ArgumentParser()
ap.add_argument("--updates", type=int, default=300)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default="")
args = ap.parse_args()

config = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=128)
corpus = generate_corpus(LanguageSpec("demo", grammar_seed=7), 50_000, seed=1)
print(f"corpus: {corpus.n_tokens} tokens in {len(corpus.sequences)} sequences")

sched = ScheduleSpec(peak_lr=1e-3,
                     warmup_updates=max(1, args.updates // 12),
                     total_updates=args.updates)
# disabled forgetting == plain single-schedule training
no_forget = ForgettingConfig(k=10**9, emb_schedule=sched, enabled=False)

log = MetricsLog()
t0 = time.time()
ckpt = pretrain(config, corpus, sched, no_forget, args.updates,
                seed=args.seed, batch_size=16, checkpoint_interval=50,
                metrics=log, run_id="tiny_mlm")
print(f"trained {args.updates} updates in {time.time() - t0:.1f}s")

for rec in log.for_run("tiny_mlm"):
    if rec.eval_loss is not None:
        print(f"  step {rec.step:>5d}  val loss {rec.eval_loss:.4f}")

if args.out:
    h = save_checkpoint(ckpt, args.out)
    print("saved", args.out, h)
