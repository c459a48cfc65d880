"""Command-line front end.

Subcommands: gen-dataset, train-hypernet, merge, eval, bench, inspect-coeffs.
Exit codes: 0 success, 1 usage error, 2 data/compute error, 3 the run failed
only because the judge endpoint was unavailable.

Outputs are deterministic for fixed inputs and seeds: report files carry the
reproducible results under a top-level "canonical" key, with the config echo
and wall-clock timings outside it, and wall-clock timestamps go to a sidecar
<output>.log file only.  An optional --config JSON file supplies defaults
(strict schema: unknown keys are rejected); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, hypernet, tasks, tensorfile
from .evaluation import (EmptyPairError, EvalConfig, JudgeEndpointConfig,
                         JudgeThresholds, JudgeUnavailableError, STRATEGY_NAMES,
                         benchmark_timings, benchmark_to_canonical,
                         export_coefficients_csv, make_strategy, run_benchmark)
from .hypernet import TrainConfig, load_hypernet, save_hypernet, train_hypernet
from .merging import ZipConfig, zip_optimize
from .model import DivergenceError, FinetuneConfig, ModelDims, BaseModel
from .objective import MergePolicy, build_merged_deltas
from .tasks import (Corpus, CorpusConfig, PairSampler, SplitManifest,
                    build_corpus, gen_task, load_corpus)
from .tensor import ShapeError

PROG = "loramerge"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


_CONFIG_SCHEMA: dict[str, set[str] | None] = {
    "dims": {"d", "h", "d_p", "t", "blocks"},
    "finetune": {"steps", "lr", "rank"},
    "train": {"steps", "pair_period", "lr", "lam", "hidden", "seed", "policy"},
    "zip": {"steps", "lr", "lam", "init", "seed", "eval_samples"},
    "eval": {"samples", "references", "judge", "tau_content", "tau_style",
             "seed", "endpoint", "timeout", "retries", "max_in_flight"},
    "merge": {"density", "trim", "wc", "ws", "seed"},
    "base_seed": None,
    "seed": None,
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: config is not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"{p}: config must be a JSON object")
    for key, value in obj.items():
        if key not in _CONFIG_SCHEMA:
            raise ValueError(f"{p}: unknown config key {key!r}; known keys: "
                             f"{sorted(_CONFIG_SCHEMA)}")
        allowed = _CONFIG_SCHEMA[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise ValueError(f"{p}: config section {key!r} must be an object")
            unknown = set(value) - allowed
            if unknown:
                raise ValueError(f"{p}: unknown keys in config section {key!r}: "
                                 f"{sorted(unknown)}; known: {sorted(allowed)}")
    return obj


def _pick(flag_value, config: dict, section: str, key: str, default):
    """Precedence: explicit flag > config file > built-in default."""
    if flag_value is not None:
        return flag_value
    sec = config.get(section, {})
    if isinstance(sec, dict) and key in sec:
        return sec[key]
    return default


def _dims_from_config(config: dict) -> ModelDims:
    sec = config.get("dims", {})
    return ModelDims(**sec) if sec else ModelDims()


def _sidecar(out_path: Path, argv: list[str], started: float) -> None:
    lines = [
        f"started: {datetime.datetime.fromtimestamp(started).isoformat()}",
        f"argv: {PROG} {' '.join(argv)}",
        f"finished: {datetime.datetime.now().isoformat()}",
        f"elapsed_seconds: {time.time() - started:.3f}",
    ]
    Path(str(out_path) + ".log").write_text("\n".join(lines) + "\n")


def _write_report(path: Path, canonical: dict, config_echo: dict,
                  timings: dict | None = None) -> None:
    doc: dict = {"canonical": canonical, "config": config_echo}
    if timings is not None:
        doc["timings"] = timings
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _load_manifest(text: str) -> SplitManifest:
    if text == "toy":
        return SplitManifest.toy()
    if text == "paper":
        return SplitManifest.paper_scale()
    p = Path(text)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p} (or use 'toy'/'paper')")
    return SplitManifest.from_json(json.loads(p.read_text()))


# -- subcommands ---------------------------------------------------------


def cmd_gen_dataset(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    manifest = _load_manifest(args.manifest)
    dims = _dims_from_config(config)
    ft = FinetuneConfig(
        steps=_pick(args.finetune_steps, config, "finetune", "steps", FinetuneConfig.steps),
        lr=_pick(None, config, "finetune", "lr", FinetuneConfig.lr),
        rank=_pick(args.rank, config, "finetune", "rank", FinetuneConfig.rank))
    cfg = CorpusConfig(dims=dims,
                       base_seed=_pick(args.base_seed, config, "base_seed", "", 0),
                       seed=_pick(args.seed, config, "seed", "", 0),
                       finetune=ft)
    corpus = build_corpus(args.out, manifest, cfg)
    losses = [e.final_loss for e in corpus.entries]
    print(f"wrote {len(corpus.entries)} adapters to {args.out} "
          f"(mean final loss {float(np.mean(losses)):.4f})")
    _sidecar(Path(args.out) / tasks.INDEX_NAME, argv, started)
    return 0


def cmd_train_hypernet(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    corpus = load_corpus(args.corpus)
    policy = MergePolicy.parse(
        _pick(args.policy, config, "train", "policy", MergePolicy().to_text()))
    cfg = TrainConfig(
        steps=_pick(args.steps, config, "train", "steps", TrainConfig.steps),
        pair_period=_pick(args.pair_period, config, "train", "pair_period",
                          TrainConfig.pair_period),
        lr=_pick(args.lr, config, "train", "lr", TrainConfig.lr),
        lam=_pick(args.lam, config, "train", "lam", TrainConfig.lam),
        hidden=_pick(args.hidden, config, "train", "hidden", TrainConfig.hidden),
        seed=_pick(args.seed, config, "train", "seed", TrainConfig.seed))
    content = [e.adapter for e in corpus.select("content", "train")]
    style = [e.adapter for e in corpus.select("style", "train")]
    net, trace = train_hypernet(corpus.base_model(), content, style, cfg, policy)
    save_hypernet(args.out, net, policy,
                  extra_metadata={"steps": str(cfg.steps), "lam": repr(cfg.lam),
                                  "seed": str(cfg.seed)})
    print(f"trained {cfg.steps} steps on {len(content)}x{len(style)} train pairs; "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}; saved {args.out}")
    _sidecar(Path(args.out), argv, started)
    return 0


def _strategy_from_args(name: str, args, config: dict, policy: MergePolicy,
                        net: hypernet.Hypernetwork | None):
    zip_cfg = ZipConfig(
        steps=_pick(getattr(args, "zip_steps", None), config, "zip", "steps", ZipConfig.steps),
        lr=_pick(None, config, "zip", "lr", ZipConfig.lr),
        lam=_pick(None, config, "zip", "lam", ZipConfig.lam),
        init=_pick(None, config, "zip", "init", ZipConfig.init),
        seed=_pick(None, config, "zip", "seed", ZipConfig.seed),
        eval_samples=_pick(None, config, "zip", "eval_samples", ZipConfig.eval_samples))
    weights = (_pick(getattr(args, "wc", None), config, "merge", "wc", 0.5),
               _pick(getattr(args, "ws", None), config, "merge", "ws", 0.5))
    return make_strategy(
        name, policy=policy, weights=weights,
        density=_pick(getattr(args, "density", None), config, "merge", "density", 0.5),
        trim=_pick(getattr(args, "trim", None), config, "merge", "trim", 0.5),
        seed=_pick(getattr(args, "seed", None), config, "merge", "seed", 0),
        zip_cfg=zip_cfg, net=net)


def cmd_merge(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    if args.strategy not in STRATEGY_NAMES:
        raise UsageError(f"unknown strategy {args.strategy!r}; "
                         f"choose from {', '.join(STRATEGY_NAMES)}")
    Lc = tensorfile.load_adapter(args.content)
    Ls = tensorfile.load_adapter(args.style)
    if Lc.kind != "content":
        raise tensorfile.UnknownKindError(
            f"{args.content}: expected a content adapter, got kind {Lc.kind!r}")
    if Ls.kind != "style":
        raise tensorfile.UnknownKindError(
            f"{args.style}: expected a style adapter, got kind {Ls.kind!r}")
    dims = _dims_from_config(config)
    Lc.validate_against(dims)
    Ls.validate_against(dims)
    policy = MergePolicy.parse(args.policy) if args.policy else MergePolicy()
    net = None
    if args.strategy == "hypernet":
        if not args.hypernet:
            raise UsageError("--hypernet CHECKPOINT is required for the hypernet strategy")
        net, ckpt_policy = load_hypernet(args.hypernet)
        if args.policy is None:
            policy = ckpt_policy
    model = BaseModel.random(dims, _pick(args.base_seed, config, "base_seed", "", 0))
    strategy = _strategy_from_args(args.strategy, args, config, policy, net)
    result = strategy.merge(model, Lc, Ls)
    meta = {"strategy": args.strategy, "content_task_seed": str(Lc.task_seed),
            "style_task_seed": str(Ls.task_seed), "policy": policy.to_text()}
    tensorfile.save_merged_deltas(args.out, result.deltas, meta)
    print(f"merged via {args.strategy} -> {args.out} "
          f"({len(result.deltas)} projections, {result.seconds * 1e3:.1f} ms)")
    _sidecar(Path(args.out), argv, started)
    return 0


def cmd_eval(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    corpus = load_corpus(args.corpus)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for name in names:
        if name not in STRATEGY_NAMES:
            raise UsageError(f"unknown strategy {name!r}; "
                             f"choose from {', '.join(STRATEGY_NAMES)}")
    policy = MergePolicy()
    net = None
    if "hypernet" in names:
        if not args.hypernet:
            raise UsageError("--hypernet CHECKPOINT is required when evaluating "
                             "the hypernet strategy")
        net, policy = load_hypernet(args.hypernet)
    judge = _pick(args.judge, config, "eval", "judge", "mock")
    endpoint = None
    if judge == "http":
        url = _pick(args.endpoint, config, "eval", "endpoint", None)
        if not url:
            raise UsageError("--endpoint URL is required with --judge http")
        endpoint = JudgeEndpointConfig(
            url=url,
            timeout=_pick(None, config, "eval", "timeout", 10.0),
            retries=_pick(None, config, "eval", "retries", 2),
            max_in_flight=_pick(None, config, "eval", "max_in_flight", 1))
    cfg = EvalConfig(
        samples=_pick(args.samples, config, "eval", "samples", 10),
        references=_pick(args.references, config, "eval", "references", 3),
        judge=judge,
        thresholds=JudgeThresholds(
            tau_content=_pick(args.tau_content, config, "eval", "tau_content",
                              evaluation.DEFAULT_TAU_CONTENT),
            tau_style=_pick(args.tau_style, config, "eval", "tau_style",
                            evaluation.DEFAULT_TAU_STYLE)),
        seed=_pick(args.seed, config, "eval", "seed", 0),
        endpoint=endpoint)
    strategies = [_strategy_from_args(name, args, config, policy, net) for name in names]
    result = run_benchmark(corpus, strategies, cfg, split=args.split)
    echo = {"corpus": str(args.corpus), "strategies": names, "judge": judge,
            "split": args.split, "samples": cfg.samples, "seed": cfg.seed,
            "tau_content": cfg.thresholds.tau_content,
            "tau_style": cfg.thresholds.tau_style}
    _write_report(Path(args.report), benchmark_to_canonical(result), echo,
                  benchmark_timings(result))
    for name in names:
        rep = result.outcomes[name].report
        print(f"{name:10s} average_case={rep.average_case:.3f} "
              f"best_case={rep.best_case:.3f}")
    print(f"report written to {args.report}")
    _sidecar(Path(args.report), argv, started)
    return 0


def cmd_bench(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    corpus = load_corpus(args.corpus)
    net, policy = load_hypernet(args.hypernet)
    zip_cfg = ZipConfig(
        steps=_pick(args.zip_steps, config, "zip", "steps", ZipConfig.steps),
        lr=_pick(None, config, "zip", "lr", ZipConfig.lr),
        lam=_pick(None, config, "zip", "lam", ZipConfig.lam))
    model = corpus.base_model()
    grid = corpus.pairs(args.split)[: args.pairs]
    if not grid:
        raise ValueError(f"corpus has no {args.split!r} pairs to benchmark")
    rows = []
    for entry_c, entry_s in grid:
        sampler = PairSampler(gen_task("content", entry_c.task_seed, corpus.dims),
                              gen_task("style", entry_s.task_seed, corpus.dims))
        best_hyper = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            hypernet.hypernet_coefficients(net, entry_c.adapter, entry_s.adapter, policy)
            dt = time.perf_counter() - t0
            best_hyper = dt if best_hyper is None else min(best_hyper, dt)
        t0 = time.perf_counter()
        zip_optimize(model, entry_c.adapter, entry_s.adapter, sampler, zip_cfg, policy)
        zip_seconds = time.perf_counter() - t0
        rows.append({"content_seed": entry_c.task_seed, "style_seed": entry_s.task_seed,
                     "hypernet_seconds": best_hyper, "zip_seconds": zip_seconds,
                     "speedup": zip_seconds / best_hyper})
    canonical = {"pairs": [[r["content_seed"], r["style_seed"]] for r in rows],
                 "zip_steps": zip_cfg.steps, "repeats": args.repeats}
    timings = {"per_pair": rows,
               "speedup_min": min(r["speedup"] for r in rows),
               "speedup_mean": float(np.mean([r["speedup"] for r in rows]))}
    _write_report(Path(args.report), canonical,
                  {"corpus": str(args.corpus), "hypernet": str(args.hypernet)}, timings)
    for r in rows:
        print(f"pair ({r['content_seed']}, {r['style_seed']}): "
              f"hypernet {r['hypernet_seconds'] * 1e6:.0f} us, "
              f"zip {r['zip_seconds']:.3f} s, speedup {r['speedup']:.0f}x")
    print(f"report written to {args.report}")
    _sidecar(Path(args.report), argv, started)
    return 0


def cmd_inspect_coeffs(args, config: dict, argv: list[str]) -> int:
    started = time.time()
    net, policy = load_hypernet(args.hypernet)
    Lc = tensorfile.load_adapter(args.content)
    Ls = tensorfile.load_adapter(args.style)
    coeffs = hypernet.hypernet_coefficients(net, Lc, Ls, policy)
    export_coefficients_csv(args.out, coeffs)
    n_rows = sum(m.shape[0] for m, _ in coeffs.coeffs.values())
    print(f"wrote {n_rows} coefficient rows for {len(coeffs.coeffs)} projections "
          f"to {args.out}")
    _sidecar(Path(args.out), argv, started)
    return 0


# -- parser --------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (strict schema)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-dataset", help="fine-tune and write an adapter corpus")
    add_common(p)
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--manifest", default="toy", help="'toy', 'paper', or a JSON path")
    p.add_argument("--base-seed", type=int, default=None, dest="base_seed")
    p.add_argument("--finetune-steps", type=int, default=None, dest="finetune_steps")
    p.add_argument("--rank", type=int, default=None)

    p = sub.add_parser("train-hypernet", help="train the coefficient predictor")
    add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--pair-period", type=int, default=None, dest="pair_period")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--policy", default=None, help="e.g. 'Q,O'")

    p = sub.add_parser("merge", help="merge one content and one style adapter")
    add_common(p)
    p.add_argument("--strategy", required=True,
                   help=f"one of {', '.join(STRATEGY_NAMES)}")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hypernet", default=None, help="checkpoint for --strategy hypernet")
    p.add_argument("--policy", default=None)
    p.add_argument("--base-seed", type=int, default=None, dest="base_seed")
    p.add_argument("--wc", type=float, default=None, help="content weight (direct/dare)")
    p.add_argument("--ws", type=float, default=None, help="style weight (direct/dare)")
    p.add_argument("--density", type=float, default=None, help="dare keep probability")
    p.add_argument("--trim", type=float, default=None, help="ties keep fraction")
    p.add_argument("--zip-steps", type=int, default=None, dest="zip_steps")

    p = sub.add_parser("eval", help="judge merge strategies on a corpus split")
    add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--strategies", default="direct,hypernet")
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--references", type=int, default=None)
    p.add_argument("--judge", choices=("mock", "http"), default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--tau-content", type=float, default=None, dest="tau_content")
    p.add_argument("--tau-style", type=float, default=None, dest="tau_style")
    p.add_argument("--hypernet", default=None)
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--trim", type=float, default=None)
    p.add_argument("--zip-steps", type=int, default=None, dest="zip_steps")

    p = sub.add_parser("bench", help="time hypernet prediction against zip optimization")
    add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--hypernet", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--split", default="test")
    p.add_argument("--zip-steps", type=int, default=None, dest="zip_steps")

    p = sub.add_parser("inspect-coeffs", help="dump predicted coefficients to CSV")
    add_common(p)
    p.add_argument("--hypernet", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    return parser


_COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train-hypernet": cmd_train_hypernet,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect-coeffs": cmd_inspect_coeffs,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config, argv)
    except UsageError as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return 1
    except (JudgeUnavailableError, EmptyPairError) as exc:
        print(f"{PROG}: judge unavailable: {exc}", file=sys.stderr)
        return 3
    except (tensorfile.TensorFileError, tasks.CorpusFormatError, ShapeError,
            DivergenceError, hypernet.UnregisteredWidthError,
            OSError, ValueError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
