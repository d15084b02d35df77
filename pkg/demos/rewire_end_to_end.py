"""The full four-stage recipe on one language pair, both variants.

  1. pretrain on the base language      (standard vs forgetting)
  2. adapt embeddings only to the target language (tiny token budget)
  3. adapt body+head to the task, embeddings frozen, on the base language
  4. assemble: target embeddings + task body, evaluate zero-shot

Takes a few minutes on one core at the default sizes.
"""
import argparse

from rewirelm import (ForgettingConfig, LanguageSpec, ModelConfig,
                      ScheduleSpec, default_emb_schedule, generate_corpus,
                      make_cls_dataset, make_language)
from rewirelm.pipeline import (adapt_language, adapt_task, assemble,
                               evaluate_zero_shot, pretrain)

ap = argparse.ArgumentParser()
ap.add_argument("--pretrain-updates", type=int, default=1200)
ap.add_argument("--k", type=int, default=120)
ap.add_argument("--budget", type=int, default=30_000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

config = ModelConfig(d_model=48, n_layers=2, n_heads=4, d_ff=192)
base = LanguageSpec("base", grammar_seed=7)
target = make_language(base, "distant")
print(f"base={base.name}  target={target.name} "
      f"(offset={target.script_offset}, swap={target.swap_fraction}, "
      f"reversed={target.reverse_word_order})")

base_corpus = generate_corpus(base, 120_000, seed=11)
target_corpus = generate_corpus(target, 200_000, seed=12)
task_data = make_cls_dataset(base, 600, seed=21)
eval_data = make_cls_dataset(target, 300, seed=22)

sched = ScheduleSpec(peak_lr=7e-4, warmup_updates=args.pretrain_updates // 12,
                     total_updates=args.pretrain_updates)
variants = {
    "standard": ForgettingConfig(k=args.k, emb_schedule=sched, enabled=False),
    "forgetting": ForgettingConfig(k=args.k,
                                   emb_schedule=default_emb_schedule(7e-4, args.k)),
}

for name, fc in variants.items():
    pre = pretrain(config, base_corpus, sched, fc, args.pretrain_updates,
                   seed=args.seed, batch_size=16, checkpoint_interval=100)
    lang = adapt_language(pre, target_corpus, args.budget, 600,
                          seed=args.seed, peak_lr=1e-3)
    task = adapt_task(pre, task_data, epochs=6, seed=args.seed)
    final = evaluate_zero_shot(assemble(lang, task), eval_data)
    print(f"{name:10s}  task val acc {task.provenance.val_accuracy:.3f}   "
          f"zero-shot on {target.name}: {final:.3f}")
