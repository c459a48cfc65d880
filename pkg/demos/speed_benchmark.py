"""Amortization payoff: one forward pass vs per-pair optimization.

The per-pair optimizer runs 100 gradient steps for every new adapter pair.
The trained predictor replaces that with a single forward pass per
projection.  This demo times both on the held-out pairs.

Run with:  python3 demos/speed_benchmark.py
"""

import time
from pathlib import Path

import numpy as np

from loramerge.hypernet import TrainConfig, hypernet_coefficients, train_hypernet
from loramerge.merging import ZipConfig, zip_optimize
from loramerge.objective import MergePolicy
from loramerge.tasks import (CorpusConfig, PairSampler, SplitManifest,
                             build_corpus, gen_task, load_corpus)

out_root = Path(__file__).parent / "output"
corpus_dir = out_root / "corpus"

if (corpus_dir / "index.json").is_file():
    corpus = load_corpus(corpus_dir)
    print(f"reusing corpus at {corpus_dir}")
else:
    corpus = build_corpus(corpus_dir, SplitManifest.toy(), CorpusConfig())
    print(f"built corpus at {corpus_dir}")
model = corpus.base_model()
policy = MergePolicy()

# 1. Train the predictor once, up front.  This cost is paid a single time
#    and then amortized over every future pair.
t0 = time.perf_counter()
net, _ = train_hypernet(model,
                        [e.adapter for e in corpus.select("content", "train")],
                        [e.adapter for e in corpus.select("style", "train")],
                        TrainConfig(), policy)
train_seconds = time.perf_counter() - t0
print(f"one-time predictor training: {train_seconds:.1f} s")

# 2. Per pair: best-of-5 prediction time vs one 100-step optimization run.
zip_cfg = ZipConfig()
print(f"\nper-pair cost on the held-out grid "
      f"(prediction vs {zip_cfg.steps}-step optimization):")
print("  pair       predict      optimize    speedup")
speedups = []
savings = []
for entry_c, entry_s in corpus.pairs("test"):
    Lc, Ls = entry_c.adapter, entry_s.adapter
    best = None
    for _ in range(5):
        t0 = time.perf_counter()
        hypernet_coefficients(net, Lc, Ls, policy)
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
    sampler = PairSampler(gen_task("content", Lc.task_seed, corpus.dims),
                          gen_task("style", Ls.task_seed, corpus.dims))
    t0 = time.perf_counter()
    zip_optimize(model, Lc, Ls, sampler, zip_cfg, policy)
    zip_seconds = time.perf_counter() - t0
    speedups.append(zip_seconds / best)
    savings.append(zip_seconds - best)
    print(f"  ({Lc.task_seed}, {Ls.task_seed})     {best * 1e6:7.0f} us  "
          f"{zip_seconds:8.3f} s   {speedups[-1]:7.0f}x")

breakeven = int(np.ceil(train_seconds / np.mean(savings)))
print(f"\nmean speedup {np.mean(speedups):.0f}x; each pair saves "
      f"{np.mean(savings):.2f} s, so the one-time training cost is repaid "
      f"after about {breakeven} merged pairs")
