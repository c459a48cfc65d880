"""Binary-judge evaluation protocol, baselines harness, and timing benchmark.

Every generated sample receives two independent binary judgments: does it
show the content (subject) of the content task, and is it in the style of the
style task?  A judgment passes when strictly more than half of the per-
reference votes say yes; the sample score is the AND of the two judgments.
Per strategy, average_case is the mean of per-pair sample-score means and
best_case is the fraction of pairs with at least one passing sample (with a
full grid and no exclusions, average_case equals the plain mean over all
samples).

Merged models generate under the pair's combined prompt (both token banks
concatenated, the way a text prompt would mention subject and style at
once); single-adapter references render under their own prompt.  Two judges
are provided.  The offline judge projects (output - composed ground truth)
through each task's signature probe and thresholds the distances; it needs
no network and a single synthetic reference, so the majority rule
degenerates to one vote.  The HTTP judge posts prompt + base64 PNG images to
an endpoint returning {"answer": "..."} and counts an answer as a yes-vote
iff it starts with "Yes" (case-insensitive, after stripping whitespace).
Transport failures are retried; a sample whose judgments cannot be obtained
is excluded from aggregation and logged, shrinking that pair's denominator.
"""

from __future__ import annotations

import base64
import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests
from PIL import Image

from . import tensor
from .merging import (ZipConfig, dare_merge_deltas, dare_ties_merge_deltas,
                      direct_merge_deltas, ties_merge_deltas, zip_optimize)
from .hypernet import Hypernetwork, hypernet_coefficients
from .model import (BaseModel, LoraAdapter, apply_deltas, apply_lora,
                    combine_prompts, forward)
from .objective import MergeCoefficients, MergePolicy, build_merged_deltas
from .tasks import Corpus, PairSampler, SyntheticTask, composed_target, gen_task
from .tensor import Rng, derive_seed

log = logging.getLogger("loramerge.evaluation")

STRATEGY_NAMES = ("direct", "dare", "ties", "dare-ties", "zip", "hypernet")

SYSTEM_PROMPT = "You are a helpful assistant."

SUBJECT_PROMPT = (
    "Your task is to identify if the test image shows the same subject as the "
    "support image.\n"
    "\n"
    "Support image:\n"
    "\n"
    "{Image}\n"
    "\n"
    "Test image:\n"
    "\n"
    "{Image}\n"
    "\n"
    "Pay attention to the details of the subject, it should for example have "
    "the same color. However, the general style of the image may be different.\n"
    "\n"
    "Does the test image show the same subject as the support image?\n"
    "\n"
    "Answer with Yes or No only."
)

STYLE_PROMPT_TEMPLATE = (
    "Your task is to identify if the test image shows the subject in {style} "
    "style. An example image in the {style} style is provided.\n"
    "\n"
    "Example image in the {style} style:\n"
    "\n"
    "{Image}\n"
    "\n"
    "Test image:\n"
    "\n"
    "{Image}\n"
    "\n"
    "The example image shows an illustration of the {style} style and the "
    "details of the subject are expected to be different.\n"
    "\n"
    "Do not check similarity with the subject.\n"
    "\n"
    "Is the test image in the {style} style?\n"
    "\n"
    "Answer with Yes or No only."
)


class JudgeUnavailableError(RuntimeError):
    """The judge endpoint could not produce a verdict after retries."""


class EmptyPairError(ValueError):
    """Every sample of some pair was excluded; aggregation is undefined."""


class ZeroVarianceError(ValueError):
    """Correlation is undefined for a constant series."""


def majority_pass(votes) -> bool:
    """Strict majority: yes-votes must exceed half the reference count."""
    votes = tuple(bool(v) for v in votes)
    if not votes:
        raise ValueError("majority_pass needs at least one vote")
    return sum(votes) > len(votes) / 2


@dataclass(frozen=True)
class JudgeVerdict:
    content_votes: tuple[bool, ...]
    style_votes: tuple[bool, ...]

    @property
    def content_pass(self) -> bool:
        return majority_pass(self.content_votes)

    @property
    def style_pass(self) -> bool:
        return majority_pass(self.style_votes)

    @property
    def sample_score(self) -> int:
        return int(self.content_pass and self.style_pass)


# -- offline probe judge -------------------------------------------------

# Frozen from the 20-pair calibration run on the default toy corpus
# (see calibrate_thresholds); pure-content merges pass the content check and
# fail the style check on >= 80% of calibration samples at these values.
DEFAULT_TAU_CONTENT = 1.4709067940711975
DEFAULT_TAU_STYLE = 0.21011728197336196


@dataclass(frozen=True)
class JudgeThresholds:
    tau_content: float = DEFAULT_TAU_CONTENT
    tau_style: float = DEFAULT_TAU_STYLE


def probe_distances(output: np.ndarray, probe_latent: np.ndarray,
                    task_c: SyntheticTask, task_s: SyntheticTask) -> tuple[float, float]:
    """Probe-space distances between an output and the composed ground truth."""
    target = composed_target(task_c, task_s, probe_latent)
    diff = tensor.add(output, tensor.scale(-1.0, target))
    d_content = tensor.l2_norm(tensor.matmul(task_c.probe, diff))
    d_style = tensor.l2_norm(tensor.matmul(task_s.probe, diff))
    return d_content, d_style


def mock_judge(output: np.ndarray, probe_latent: np.ndarray,
               task_c: SyntheticTask, task_s: SyntheticTask,
               thresholds: JudgeThresholds = JudgeThresholds()) -> JudgeVerdict:
    """Single-reference offline verdict with strict thresholds."""
    d_content, d_style = probe_distances(output, probe_latent, task_c, task_s)
    return JudgeVerdict(content_votes=(d_content < thresholds.tau_content,),
                        style_votes=(d_style < thresholds.tau_style,))


def calibrate_thresholds(corpus: Corpus, n_pairs: int = 20, samples: int = 5,
                         seed: int = 0) -> tuple[JudgeThresholds, dict]:
    """Set thresholds from pure-content merges on train-split pairs.

    tau_content is the 90th percentile of content-probe distances of pure-
    content merges (so they pass the content check ~90% of the time);
    tau_style is the 10th percentile of their style-probe distances (so they
    fail the style check ~90% of the time).  Returns the thresholds and the
    raw distance pools.
    """
    model = corpus.base_model()
    pairs = corpus.pairs("train")[:n_pairs]
    if not pairs:
        raise ValueError("calibration needs at least one train-split pair")
    d_contents: list[float] = []
    d_styles: list[float] = []
    for entry_c, entry_s in pairs:
        task_c = entry_c.task(corpus.dims)
        task_s = entry_s.task(corpus.dims)
        deltas = direct_merge_deltas(entry_c.adapter, entry_s.adapter, wc=1.0, ws=0.0)
        merged = apply_deltas(model, deltas)
        prompt = combine_prompts(task_c.prompt, task_s.prompt)
        rng = Rng(derive_seed(seed, "calibrate", entry_c.task_seed, entry_s.task_seed))
        for _ in range(samples):
            x = rng.gaussian_array((corpus.dims.d,))
            out = forward(merged, x, prompt)
            dc, ds = probe_distances(out, x, task_c, task_s)
            d_contents.append(dc)
            d_styles.append(ds)
    thresholds = JudgeThresholds(
        tau_content=float(np.quantile(d_contents, 0.9)),
        tau_style=float(np.quantile(d_styles, 0.1)))
    return thresholds, {"content": d_contents, "style": d_styles}


# -- HTTP judge ----------------------------------------------------------


@dataclass(frozen=True)
class JudgeEndpointConfig:
    url: str
    timeout: float = 10.0
    retries: int = 2            # extra attempts after the first
    auth_token: str | None = None
    max_in_flight: int = 1


def latent_to_png(latent: np.ndarray) -> bytes:
    """Deterministic grayscale rendering of a latent vector."""
    x = tensor.as_f32(latent).astype(np.float64)
    pix = np.clip((x + 4.0) / 8.0, 0.0, 1.0) * 255.0
    pix = pix.round().astype(np.uint8)
    n = pix.size
    rows = 4 if n % 4 == 0 else 1
    img = Image.fromarray(pix.reshape(rows, n // rows), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def ask_judge(cfg: JudgeEndpointConfig, system: str, user: str,
              images: list[bytes]) -> bool:
    """One yes/no judgment; images ride base64-encoded in placeholder order."""
    payload = {
        "system": system,
        "user": user,
        "images": [base64.b64encode(img).decode("ascii") for img in images],
    }
    headers = {}
    if cfg.auth_token:
        headers["Authorization"] = f"Bearer {cfg.auth_token}"
    last_error = "no attempt made"
    for attempt in range(cfg.retries + 1):
        try:
            resp = requests.post(cfg.url, json=payload, headers=headers,
                                 timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = f"transport error: {exc}"
            continue
        if not 200 <= resp.status_code < 300:
            last_error = f"status {resp.status_code}"
            continue
        try:
            answer = resp.json()["answer"]
        except (ValueError, KeyError, TypeError):
            last_error = "unparseable response body"
            continue
        if not isinstance(answer, str):
            last_error = "answer field is not a string"
            continue
        return answer.strip().lower().startswith("yes")
    raise JudgeUnavailableError(
        f"judge at {cfg.url} failed after {cfg.retries + 1} attempts ({last_error})")


def judge_sample_http(cfg: JudgeEndpointConfig, generated_png: bytes,
                      content_refs: list[bytes], style_refs: list[bytes],
                      style_name: str) -> JudgeVerdict:
    """One vote per reference image for each of the two judgments."""
    style_user = STYLE_PROMPT_TEMPLATE.replace("{style}", style_name)
    requests_spec = (
        [(SYSTEM_PROMPT, SUBJECT_PROMPT, [ref, generated_png]) for ref in content_refs]
        + [(SYSTEM_PROMPT, style_user, [ref, generated_png]) for ref in style_refs])
    if cfg.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            votes = list(pool.map(lambda spec: ask_judge(cfg, *spec), requests_spec))
    else:
        votes = [ask_judge(cfg, *spec) for spec in requests_spec]
    n_c = len(content_refs)
    return JudgeVerdict(content_votes=tuple(votes[:n_c]),
                        style_votes=tuple(votes[n_c:]))


# -- aggregation ---------------------------------------------------------


@dataclass
class PairReport:
    content_seed: int
    style_seed: int
    sample_scores: list[int]
    excluded: int = 0


@dataclass
class Mars2Report:
    pairs: list[PairReport]
    average_case: float
    best_case: float


def mars2_aggregate(pairs: list[PairReport]) -> Mars2Report:
    """average_case: mean of per-pair score means; best_case: share of pairs
    with at least one passing sample.  Raises EmptyPairError if exclusions
    left any pair with no judged samples."""
    if not pairs:
        raise ValueError("mars2_aggregate needs at least one pair")
    for p in pairs:
        if not p.sample_scores:
            raise EmptyPairError(
                f"pair ({p.content_seed}, {p.style_seed}) has no judged samples "
                f"({p.excluded} excluded)")
    per_pair_mean = [sum(p.sample_scores) / len(p.sample_scores) for p in pairs]
    per_pair_best = [max(p.sample_scores) for p in pairs]
    return Mars2Report(pairs=pairs,
                       average_case=float(np.mean(per_pair_mean)),
                       best_case=float(np.mean(per_pair_best)))


def pearson_corr(xs, ys) -> float:
    """Pearson correlation in float64; raises on short or constant input."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"pearson_corr needs two equal-length series, "
                         f"got shapes {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError(f"pearson_corr needs at least 2 points, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ZeroVarianceError("correlation undefined: a series is constant")
    return float(np.corrcoef(x, y)[0, 1])


# -- strategies ----------------------------------------------------------


@dataclass
class StrategyResult:
    deltas: dict[tuple[int, str], np.ndarray]
    coefficients: MergeCoefficients | None
    seconds: float


@dataclass
class MergeStrategy:
    """Named recipe turning an adapter pair into merged per-projection deltas."""

    name: str
    _fn: object

    def merge(self, model: BaseModel, Lc: LoraAdapter, Ls: LoraAdapter) -> StrategyResult:
        t0 = time.perf_counter()
        deltas, coeffs = self._fn(model, Lc, Ls)
        return StrategyResult(deltas=deltas, coefficients=coeffs,
                              seconds=time.perf_counter() - t0)


def make_strategy(name: str, *, policy: MergePolicy = MergePolicy(),
                  weights: tuple[float, float] = (0.5, 0.5), density: float = 0.5,
                  trim: float = 0.5, seed: int = 0,
                  zip_cfg: ZipConfig = ZipConfig(),
                  net: Hypernetwork | None = None) -> MergeStrategy:
    wc, ws = weights

    def pair_seed(Lc, Ls):
        return derive_seed(seed, "strategy", name, Lc.task_seed, Ls.task_seed)

    if name == "direct":
        fn = lambda model, Lc, Ls: (direct_merge_deltas(Lc, Ls, wc, ws), None)
    elif name == "dare":
        fn = lambda model, Lc, Ls: (
            dare_merge_deltas(Lc, Ls, density, pair_seed(Lc, Ls), wc, ws), None)
    elif name == "ties":
        fn = lambda model, Lc, Ls: (ties_merge_deltas(Lc, Ls, trim), None)
    elif name == "dare-ties":
        fn = lambda model, Lc, Ls: (
            dare_ties_merge_deltas(Lc, Ls, density, trim, pair_seed(Lc, Ls)), None)
    elif name == "zip":
        def fn(model, Lc, Ls):
            sampler = PairSampler(gen_task("content", Lc.task_seed, model.dims),
                                  gen_task("style", Ls.task_seed, model.dims))
            coeffs, _ = zip_optimize(model, Lc, Ls, sampler, zip_cfg, policy)
            return build_merged_deltas(Lc, Ls, coeffs, policy), coeffs
    elif name == "hypernet":
        if net is None:
            raise ValueError("hypernet strategy needs a trained network")

        def fn(model, Lc, Ls):
            coeffs = hypernet_coefficients(net, Lc, Ls, policy)
            return build_merged_deltas(Lc, Ls, coeffs, policy), coeffs
    else:
        raise ValueError(f"unknown strategy {name!r}; known: {STRATEGY_NAMES}")
    return MergeStrategy(name=name, _fn=fn)


# -- benchmark harness ---------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    samples: int = 10           # generated probes per pair
    references: int = 3         # reference images per pair (HTTP judge)
    judge: str = "mock"
    thresholds: JudgeThresholds = JudgeThresholds()
    seed: int = 0
    endpoint: JudgeEndpointConfig | None = None


@dataclass
class StrategyOutcome:
    report: Mars2Report
    coeff_seconds: list[float]  # one entry per pair, coefficient production only


@dataclass
class BenchmarkResult:
    pairs: list[tuple[int, int]]
    outcomes: dict[str, StrategyOutcome]
    samples_per_pair: int
    judge: str


def run_benchmark(corpus: Corpus, strategies: list[MergeStrategy],
                  cfg: EvalConfig = EvalConfig(), split: str = "test") -> BenchmarkResult:
    """Judge every strategy on the full content x style grid of a split.

    Probe latents depend only on (seed, pair, sample index), so all strategies
    see identical inputs.  With the HTTP judge, samples whose verdicts cannot
    be obtained are excluded and logged; a pair losing all samples raises
    EmptyPairError via aggregation.
    """
    if cfg.judge not in ("mock", "http"):
        raise ValueError(f"unknown judge {cfg.judge!r}; use 'mock' or 'http'")
    if cfg.judge == "http" and cfg.endpoint is None:
        raise ValueError("http judge needs an endpoint configuration")
    model = corpus.base_model()
    grid = corpus.pairs(split)
    if not grid:
        raise ValueError(f"corpus has no {split!r} pairs to evaluate")
    pair_ids = [(c.task_seed, s.task_seed) for c, s in grid]
    outcomes: dict[str, StrategyOutcome] = {}
    for strategy in strategies:
        reports: list[PairReport] = []
        seconds: list[float] = []
        for entry_c, entry_s in grid:
            task_c = entry_c.task(corpus.dims)
            task_s = entry_s.task(corpus.dims)
            result = strategy.merge(model, entry_c.adapter, entry_s.adapter)
            seconds.append(result.seconds)
            merged = apply_deltas(model, result.deltas)
            prompt = combine_prompts(task_c.prompt, task_s.prompt)
            refs_c, refs_s = None, None
            if cfg.judge == "http":
                refs_c, refs_s = _reference_images(model, corpus.dims, entry_c, entry_s,
                                                   task_c, task_s, cfg)
            scores: list[int] = []
            excluded = 0
            for g in range(cfg.samples):
                rng = Rng(derive_seed(cfg.seed, "probe", entry_c.task_seed,
                                      entry_s.task_seed, g))
                x = rng.gaussian_array((corpus.dims.d,))
                out = forward(merged, x, prompt)
                if cfg.judge == "mock":
                    verdict = mock_judge(out, x, task_c, task_s, cfg.thresholds)
                    scores.append(verdict.sample_score)
                else:
                    try:
                        verdict = judge_sample_http(cfg.endpoint, latent_to_png(out),
                                                    refs_c, refs_s, task_s.name)
                        scores.append(verdict.sample_score)
                    except JudgeUnavailableError as exc:
                        excluded += 1
                        log.warning("excluding sample %d of pair (%d, %d): %s",
                                    g, entry_c.task_seed, entry_s.task_seed, exc)
            reports.append(PairReport(content_seed=entry_c.task_seed,
                                      style_seed=entry_s.task_seed,
                                      sample_scores=scores, excluded=excluded))
        outcomes[strategy.name] = StrategyOutcome(report=mars2_aggregate(reports),
                                                  coeff_seconds=seconds)
    return BenchmarkResult(pairs=pair_ids, outcomes=outcomes,
                           samples_per_pair=cfg.samples, judge=cfg.judge)


def _reference_images(model, dims, entry_c, entry_s, task_c, task_s, cfg):
    """Single-adapter renders used as judge references."""
    with_c = apply_lora(model, entry_c.adapter)
    with_s = apply_lora(model, entry_s.adapter)
    refs_c, refs_s = [], []
    for i in range(cfg.references):
        rng = Rng(derive_seed(cfg.seed, "reference", entry_c.task_seed,
                              entry_s.task_seed, i))
        x = rng.gaussian_array((dims.d,))
        refs_c.append(latent_to_png(forward(with_c, x, task_c.prompt)))
        refs_s.append(latent_to_png(forward(with_s, x, task_s.prompt)))
    return refs_c, refs_s


def benchmark_to_canonical(result: BenchmarkResult) -> dict:
    """Deterministic report section (no timings, no paths)."""
    return {
        "judge": result.judge,
        "samples_per_pair": result.samples_per_pair,
        "pairs": [list(p) for p in result.pairs],
        "strategies": {
            name: {
                "average_case": outcome.report.average_case,
                "best_case": outcome.report.best_case,
                "per_pair": [
                    {"content_seed": p.content_seed, "style_seed": p.style_seed,
                     "sample_scores": p.sample_scores, "excluded": p.excluded}
                    for p in outcome.report.pairs
                ],
            }
            for name, outcome in sorted(result.outcomes.items())
        },
    }


def benchmark_timings(result: BenchmarkResult) -> dict:
    return {name: {"coeff_seconds_per_pair": outcome.coeff_seconds,
                   "coeff_seconds_mean": float(np.mean(outcome.coeff_seconds))}
            for name, outcome in sorted(result.outcomes.items())}


def export_coefficients_csv(path, coeffs: MergeCoefficients) -> None:
    """Per-column coefficient dump: projection, column, m_c, m_s."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["projection", "column", "m_c", "m_s"])
        for (block, role) in sorted(coeffs.coeffs):
            m_c, m_s = coeffs.coeffs[(block, role)]
            for j in range(m_c.shape[0]):
                writer.writerow([f"blocks.{block}.{role}", j,
                                 repr(float(m_c[j])), repr(float(m_s[j]))])
