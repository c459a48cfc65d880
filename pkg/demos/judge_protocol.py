"""The two-question judging protocol, from calibration to the score table.

Each generated sample is asked two binary questions -- does it show the
content task's subject, and is it in the style task's style -- and the
sample scores 1 only if both pass.  This demo calibrates the offline judge's
thresholds, walks through one judged sample, then scores the training-free
strategies on the held-out pair grid.

Run with:  python3 demos/judge_protocol.py
"""

from pathlib import Path

import numpy as np

from loramerge.evaluation import (EvalConfig, calibrate_thresholds, make_strategy,
                                  mock_judge, probe_distances, run_benchmark)
from loramerge.merging import direct_merge_deltas
from loramerge.model import apply_deltas, combine_prompts, forward
from loramerge.tasks import CorpusConfig, SplitManifest, build_corpus, load_corpus
from loramerge.tensor import Rng

out_root = Path(__file__).parent / "output"
corpus_dir = out_root / "corpus"

if (corpus_dir / "index.json").is_file():
    corpus = load_corpus(corpus_dir)
    print(f"reusing corpus at {corpus_dir}")
else:
    corpus = build_corpus(corpus_dir, SplitManifest.toy(), CorpusConfig())
    print(f"built corpus at {corpus_dir}")
model = corpus.base_model()

# 1. Calibration: render pure-content merges (all content, no style) on the
#    train split, and place the thresholds so those merges pass the content
#    check ~90% of the time and fail the style check ~90% of the time.
thresholds, pools = calibrate_thresholds(corpus)
print(f"\ncalibrated on {len(pools['content'])} samples:")
print(f"  tau_content = {thresholds.tau_content:.4f} "
      f"(90th percentile of content-probe distances)")
print(f"  tau_style   = {thresholds.tau_style:.4f} "
      f"(10th percentile of style-probe distances)")

# 2. One judged sample, by hand.  A pure-content merge should show the
#    subject but not the style.
entry_c, entry_s = corpus.pairs("test")[0]
task_c = entry_c.task(corpus.dims)
task_s = entry_s.task(corpus.dims)
merged = apply_deltas(model, direct_merge_deltas(entry_c.adapter,
                                                 entry_s.adapter, wc=1.0, ws=0.0))
x = Rng(123).gaussian_array((corpus.dims.d,))
out = forward(merged, x, combine_prompts(task_c.prompt, task_s.prompt))
d_content, d_style = probe_distances(out, x, task_c, task_s)
verdict = mock_judge(out, x, task_c, task_s, thresholds)
print(f"\npure-content merge of ({task_c.name}, {task_s.name}):")
print(f"  content distance {d_content:.4f} vs tau {thresholds.tau_content:.4f} "
      f"-> {'pass' if verdict.content_pass else 'fail'}")
print(f"  style   distance {d_style:.4f} vs tau {thresholds.tau_style:.4f} "
      f"-> {'pass' if verdict.style_pass else 'fail'}")
print(f"  sample score = {verdict.sample_score} (needs both)")

# 3. Score the training-free strategies on the full held-out grid.
#    average_case is the mean of per-pair score means; best_case is the share
#    of pairs with at least one passing sample.
strategies = [make_strategy(name) for name in ("direct", "dare", "ties",
                                               "dare-ties", "zip")]
result = run_benchmark(corpus, strategies, EvalConfig(thresholds=thresholds))
print(f"\nscores on {len(result.pairs)} held-out pairs "
      f"({result.samples_per_pair} samples each):")
print("  strategy    average_case  best_case")
ranked = sorted(result.outcomes.items(),
                key=lambda kv: -kv[1].report.average_case)
for name, outcome in ranked:
    rep = outcome.report
    print(f"  {name:10s}  {rep.average_case:12.3f}  {rep.best_case:9.3f}")
