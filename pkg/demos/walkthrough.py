"""Train the default expert bundle and watch its uncertainty react to unfamiliar prompts.

Run with ``python3 demos/walkthrough.py`` (about a minute on one core).
"""

import numpy as np

from emoe import EMoE, RunConfig, make_corpus, score_corpus, split_test, train_bundle

cfg = RunConfig()
print(f"training backbone and {cfg.M} experts (config {cfg.config_hash()})")
engine = EMoE(train_bundle(cfg).bundle, cfg.schedule())

print("\nsplit means over a 300-prompt corpus")
corpus = make_corpus(cfg.seed, 100, 100, 100)
scores = score_corpus(engine, corpus, cfg.seed, with_alignment=False)
for split in ("in_dist", "ood_remap", "ood_unseen_token"):
    v = [s.reported for s in scores if s.split == split]
    print(f"  {split:17s} mean {np.mean(v):.4f}  std {np.std(v):.4f}")
for split in ("ood_remap", "ood_unseen_token"):
    print(f"  Welch one-sided p ({split} > in_dist): {split_test(scores, split).p_value:.2e}")

print("\nfast mode: halt after the first denoising step when uncertainty is high")
threshold = float(np.quantile([s.reported for s in scores if s.split == "in_dist"], 0.9))
print(f"  threshold = 90th percentile of in-distribution uncertainty = {threshold:.4f}")
for split in ("in_dist", "ood_remap", "ood_unseen_token"):
    entries = corpus.split(split)[:40]
    halted = sum(engine.fast_emoe(e.prompt, cfg.seed, threshold)[1] is None for e in entries)
    print(f"  {split:17s} halted {halted}/{len(entries)}")

