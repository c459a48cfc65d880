"""Synthetic content/style tasks and reproducible adapter corpora.

A task is a fixed affine target map (latent -> T @ latent + bias) plus a fixed
prompt-token bank and a probe projection used by the offline judge.  Content
tasks push outputs along a random direction (identity plus a small rank-one
term and a dominant direction bias); style tasks apply a near-rotation
(identity plus a scaled skew-symmetric term) with a smaller bias.  The probe
is the task's signature row: the unit bias direction, i.e. the direction
along which applying the task visibly shifts an output.  Task identity is
(kind, task_seed) alone: seeds are namespaced by kind, so content seed 3 and
style seed 3 are unrelated tasks, and any process can regenerate a task
without the corpus that introduced it.

The composed map style(content(x)) is ground truth for the offline judge
only; no training code sees it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor, tensorfile
from .model import (BaseModel, FinetuneConfig, KINDS, LoraAdapter, ModelDims,
                    PromptEmbedding, finetune_lora)
from .tensor import Rng, derive_seed

NOISE_SIGMA = 0.1          # latent jitter used by merge-objective sampling
CONTENT_MAP_SCALE = 0.3    # rank-one perturbation strength
CONTENT_BIAS_SCALE = 1.0
STYLE_MAP_SCALE = 0.25     # skew (near-rotation) strength
STYLE_BIAS_SCALE = 0.5
MAX_CONDITION = 100.0

INDEX_NAME = "index.json"
INDEX_FORMAT = "loramerge-corpus-v1"


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    task_seed: int
    name: str
    transform: np.ndarray       # (d, d)
    bias: np.ndarray            # (d,)
    prompt: PromptEmbedding     # (t, d_p) tokens
    probe: np.ndarray           # (1, d) signature row used by the offline judge

    def sample_latent(self, rng: Rng) -> np.ndarray:
        return rng.gaussian_array((self.transform.shape[0],))

    def noisy_latent(self, rng: Rng) -> np.ndarray:
        d = self.transform.shape[0]
        return tensor.add(rng.gaussian_array((d,)),
                          rng.gaussian_array((d,), sigma=NOISE_SIGMA))

    def target(self, x: np.ndarray) -> np.ndarray:
        return tensor.add(tensor.matmul(self.transform, x), self.bias)


def composed_target(task_c: SyntheticTask, task_s: SyntheticTask, x: np.ndarray) -> np.ndarray:
    """style(content(x)): judge-only ground truth for a merged model."""
    return task_s.target(task_c.target(x))


def _unit(rng: Rng, d: int) -> np.ndarray:
    v = rng.gaussian_array((d,)).astype(np.float64)
    return (v / np.linalg.norm(v)).astype(tensor.F32)


def gen_task(kind: str, task_seed: int, dims: ModelDims) -> SyntheticTask:
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}; kinds are {KINDS}")
    rng = Rng(derive_seed(0, "task", kind, task_seed))
    d = dims.d
    eye = np.eye(d, dtype=tensor.F32)
    if kind == "content":
        u = _unit(rng, d)
        v = _unit(rng, d)
        transform = (eye.astype(np.float64)
                     + CONTENT_MAP_SCALE * np.outer(u, v)).astype(tensor.F32)
        bias = tensor.scale(CONTENT_BIAS_SCALE, u)
        name = f"subject-{task_seed}"
    else:
        m = rng.gaussian_array((d, d)).astype(np.float64)
        skew = (m - m.T) / 2.0
        skew /= np.linalg.norm(skew, 2)
        transform = (eye.astype(np.float64) + STYLE_MAP_SCALE * skew).astype(tensor.F32)
        bias = tensor.scale(STYLE_BIAS_SCALE, _unit(rng, d))
        name = f"style-{task_seed}"
    cond = float(np.linalg.cond(transform.astype(np.float64)))
    if not cond < MAX_CONDITION:
        raise ValueError(f"task {kind}/{task_seed} transform condition {cond:.1f} "
                         f"exceeds {MAX_CONDITION}")
    prompt = PromptEmbedding(tokens=rng.gaussian_array((dims.t, dims.d_p)), tag=name)
    b64 = bias.astype(np.float64)
    probe = (b64 / np.linalg.norm(b64)).astype(tensor.F32).reshape(1, d)
    return SyntheticTask(kind=kind, task_seed=task_seed, name=name,
                         transform=transform, bias=bias, prompt=prompt, probe=probe)


@dataclass(frozen=True)
class PairSampler:
    """Draws the per-step training latents for one (content, style) pair."""

    task_c: SyntheticTask
    task_s: SyntheticTask

    def sample_content(self, rng: Rng) -> np.ndarray:
        return self.task_c.noisy_latent(rng)

    def sample_style(self, rng: Rng) -> np.ndarray:
        return self.task_s.noisy_latent(rng)


def sample_pair(content: list, style: list, rng: Rng) -> tuple:
    """Uniform independent draw of one element from each pool."""
    if not content or not style:
        raise ValueError("sample_pair needs non-empty content and style pools")
    return content[rng.choice(len(content))], style[rng.choice(len(style))]


# -- split manifests ----------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitManifest:
    content: dict[str, tuple[int, ...]]
    style: dict[str, tuple[int, ...]]

    def __post_init__(self):
        for kind, table in (("content", self.content), ("style", self.style)):
            seen: dict[int, str] = {}
            for split in table:
                if split not in SPLITS:
                    raise ValueError(f"unknown split {split!r} in {kind} manifest")
                for seed in table[split]:
                    if seed in seen:
                        raise ValueError(f"{kind} task_seed {seed} appears in both "
                                         f"{seen[seed]!r} and {split!r}")
                    seen[seed] = split

    def seeds(self, kind: str, split: str) -> tuple[int, ...]:
        table = self.content if kind == "content" else self.style
        return tuple(table.get(split, ()))

    @classmethod
    def toy(cls) -> "SplitManifest":
        return cls(
            content={"train": tuple(range(6)), "val": (6, 7), "test": (8, 9)},
            style={"train": tuple(range(5)), "val": (5, 6), "test": (7, 8)},
        )

    @classmethod
    def paper_scale(cls) -> "SplitManifest":
        return cls(
            content={"train": tuple(range(20)), "val": tuple(range(20, 25)),
                     "test": tuple(range(25, 30))},
            style={"train": tuple(range(18)), "val": tuple(range(18, 21)),
                   "test": tuple(range(21, 26))},
        )

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        def table(kind):
            raw = obj.get(kind)
            if not isinstance(raw, dict):
                raise ValueError(f"manifest needs a {kind!r} object of split -> seed list")
            out = {}
            for split, seeds in raw.items():
                if not isinstance(seeds, list) or any(not isinstance(s, int) for s in seeds):
                    raise ValueError(f"manifest {kind}.{split} must be a list of integers")
                out[split] = tuple(seeds)
            return out

        extra = set(obj) - {"content", "style"}
        if extra:
            raise ValueError(f"unknown manifest keys: {sorted(extra)}")
        return cls(content=table("content"), style=table("style"))

    def to_json(self) -> dict:
        return {
            "content": {k: list(v) for k, v in self.content.items()},
            "style": {k: list(v) for k, v in self.style.items()},
        }


# -- corpus build / load ------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    dims: ModelDims = ModelDims()
    base_seed: int = 0          # frozen base model identity
    seed: int = 0               # fine-tuning stream seed
    finetune: FinetuneConfig = FinetuneConfig()


@dataclass
class CorpusEntry:
    kind: str
    split: str
    task_seed: int
    path: str                   # relative to the corpus directory
    final_loss: float
    adapter: LoraAdapter | None = None

    def task(self, dims: ModelDims) -> SyntheticTask:
        return gen_task(self.kind, self.task_seed, dims)


@dataclass
class Corpus:
    root: Path
    config: CorpusConfig
    entries: list[CorpusEntry]

    @property
    def dims(self) -> ModelDims:
        return self.config.dims

    def base_model(self) -> BaseModel:
        return BaseModel.random(self.config.dims, self.config.base_seed)

    def select(self, kind: str, split: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.kind == kind and e.split == split]

    def pairs(self, split: str) -> list[tuple[CorpusEntry, CorpusEntry]]:
        """Full content x style grid for one split."""
        return [(c, s) for c in self.select("content", split)
                for s in self.select("style", split)]


def build_corpus(out_dir, manifest: SplitManifest, cfg: CorpusConfig = CorpusConfig()) -> Corpus:
    """Fine-tune one adapter per manifest task and write adapters plus index.

    Rebuilding with the same manifest and config is byte-identical; the index
    stores paths relative to the corpus directory so the directory can move.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = BaseModel.random(cfg.dims, cfg.base_seed)
    ft_cfg = replace(cfg.finetune, seed=cfg.seed)
    entries: list[CorpusEntry] = []
    for kind in KINDS:
        for split in SPLITS:
            for task_seed in manifest.seeds(kind, split):
                task = gen_task(kind, task_seed, cfg.dims)
                adapter, losses = finetune_lora(model, task, ft_cfg)
                rel_path = f"{kind}-{task_seed:03d}.safetensors"
                tensorfile.save_adapter(out_dir / rel_path, adapter,
                                        extra_metadata={"split": split})
                entries.append(CorpusEntry(kind=kind, split=split, task_seed=task_seed,
                                           path=rel_path, final_loss=losses[-1],
                                           adapter=adapter))
    index = {
        "format": INDEX_FORMAT,
        "dims": {"d": cfg.dims.d, "h": cfg.dims.h, "d_p": cfg.dims.d_p,
                 "t": cfg.dims.t, "blocks": cfg.dims.blocks},
        "base_seed": cfg.base_seed,
        "seed": cfg.seed,
        "finetune": {"steps": ft_cfg.steps, "lr": ft_cfg.lr, "rank": ft_cfg.rank},
        "entries": [
            {"path": e.path, "kind": e.kind, "split": e.split,
             "task_seed": e.task_seed, "final_loss": e.final_loss}
            for e in entries
        ],
    }
    (out_dir / INDEX_NAME).write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    return Corpus(root=out_dir, config=cfg, entries=entries)


class CorpusFormatError(ValueError):
    """The corpus index is missing, malformed, or inconsistent."""


def load_corpus(root, load_adapters: bool = True) -> Corpus:
    root = Path(root)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise CorpusFormatError(f"{index_path}: corpus index not found")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{index_path}: invalid JSON ({exc})") from exc
    if index.get("format") != INDEX_FORMAT:
        raise CorpusFormatError(f"{index_path}: unknown format {index.get('format')!r}")
    try:
        dims = ModelDims(**index["dims"])
        cfg = CorpusConfig(dims=dims, base_seed=index["base_seed"], seed=index["seed"],
                           finetune=FinetuneConfig(seed=index["seed"], **index["finetune"]))
        raw_entries = index["entries"]
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(f"{index_path}: missing or invalid field ({exc})") from exc
    entries = []
    for raw in raw_entries:
        entry = CorpusEntry(kind=raw["kind"], split=raw["split"],
                            task_seed=raw["task_seed"], path=raw["path"],
                            final_loss=raw["final_loss"])
        if load_adapters:
            entry.adapter = tensorfile.load_adapter(root / entry.path)
            if entry.adapter.kind != entry.kind or entry.adapter.task_seed != entry.task_seed:
                raise CorpusFormatError(
                    f"{root / entry.path}: adapter metadata ({entry.adapter.kind}, "
                    f"{entry.adapter.task_seed}) disagrees with index entry "
                    f"({entry.kind}, {entry.task_seed})")
        entries.append(entry)
    audit_split_disjointness(entries)
    return Corpus(root=root, config=cfg, entries=entries)


def audit_split_disjointness(entries: list[CorpusEntry]) -> None:
    """Raise if any task_seed appears in more than one split of the same kind."""
    seen: dict[tuple[str, int], str] = {}
    for e in entries:
        key = (e.kind, e.task_seed)
        if key in seen and seen[key] != e.split:
            raise CorpusFormatError(
                f"{e.kind} task_seed {e.task_seed} appears in splits "
                f"{seen[key]!r} and {e.split!r}")
        seen[key] = e.split
