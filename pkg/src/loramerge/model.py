"""Toy cross-attention stack with low-rank adapters.

The base model is a residual stack of single-head cross-attention blocks over
a latent vector x and a fixed bank of prompt tokens.  Per block, projections
Q (h x d), K (h x d_p), V (h x d_p), O (d x h) give

    q = Q x,   scores_j = (q . K p_j) / sqrt(h),   a = softmax(scores),
    ctx = sum_j a_j (V p_j),   x <- x + O ctx.

An adapter holds rank-r factor pairs (A: r x in, B: out x r) for every
(block, role); applying it adds B @ A to the frozen base weight.  The taped
forward records exactly the same primitive calls as the eager one, so the two
agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autodiff import AdamW, AdamWConfig, Tape
from .tensor import F32, Rng, ShapeError, derive_seed

ROLES = ("Q", "K", "V", "O")
KINDS = ("content", "style")


class DivergenceError(RuntimeError):
    """A training loop produced a non-finite or non-decreasing loss."""


@dataclass(frozen=True)
class ModelDims:
    d: int = 32     # latent width
    h: int = 16     # head width
    d_p: int = 32   # prompt token width
    t: int = 4      # prompt token count
    blocks: int = 2

    def proj_shape(self, role: str) -> tuple[int, int]:
        """(out_rows, in_cols) of one projection weight."""
        if role == "Q":
            return (self.h, self.d)
        if role == "K":
            return (self.h, self.d_p)
        if role == "V":
            return (self.h, self.d_p)
        if role == "O":
            return (self.d, self.h)
        raise ValueError(f"unknown role {role!r}; roles are {ROLES}")


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (n_tokens, d_p) float32
    tag: str = ""


def combine_prompts(*prompts: PromptEmbedding) -> PromptEmbedding:
    """Concatenate token banks; attention then reads all tokens at once.

    Generation for a merged model conditions on the union of the pair's
    prompts, the way a text prompt would mention both the subject and the
    style; single-adapter reference renders keep their own prompt.
    """
    if not prompts:
        raise ValueError("combine_prompts needs at least one prompt")
    tokens = np.concatenate([tensor.as_f32(p.tokens) for p in prompts], axis=0)
    return PromptEmbedding(tokens=tokens, tag="+".join(p.tag for p in prompts))


@dataclass
class BaseModel:
    dims: ModelDims
    weights: dict[tuple[int, str], np.ndarray]
    seed: int = 0

    @classmethod
    def random(cls, dims: ModelDims, seed: int) -> "BaseModel":
        """Frozen base weights, gaussian(0, 1/sqrt(fan_in)) per projection."""
        weights = {}
        for b in range(dims.blocks):
            for role in ROLES:
                out_rows, in_cols = dims.proj_shape(role)
                rng = Rng(derive_seed(seed, "base", b, role))
                weights[(b, role)] = rng.gaussian_array(
                    (out_rows, in_cols), sigma=1.0 / math.sqrt(in_cols))
        return cls(dims=dims, weights=weights, seed=seed)

    def projections(self) -> list[tuple[int, str]]:
        return [(b, role) for b in range(self.dims.blocks) for role in ROLES]


@dataclass
class LoraAdapter:
    """Rank-r factors per (block, role); delta is B @ A, never materialized
    into the base weights (applying an adapter is non-destructive)."""

    kind: str
    rank: int
    task_seed: int
    factors: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def delta(self, block: int, role: str) -> np.ndarray:
        a, b = self.factors[(block, role)]
        return tensor.matmul(b, a)

    def deltas(self) -> dict[tuple[int, str], np.ndarray]:
        return {key: self.delta(*key) for key in sorted(self.factors)}

    def validate_against(self, dims: ModelDims) -> None:
        for (block, role), (a, b) in self.factors.items():
            out_rows, in_cols = dims.proj_shape(role)
            if a.shape != (self.rank, in_cols) or b.shape != (out_rows, self.rank):
                raise ShapeError(
                    f"adapter factor blocks.{block}.{role} has A{a.shape} B{b.shape}, "
                    f"expected A({self.rank}, {in_cols}) B({out_rows}, {self.rank})")


@dataclass
class EffectiveWeights:
    """A merged weight view (base plus delta); the base model is untouched."""

    dims: ModelDims
    weights: dict[tuple[int, str], np.ndarray]


def apply_lora(model: BaseModel, adapter: LoraAdapter) -> EffectiveWeights:
    adapter.validate_against(model.dims)
    merged = {}
    for key, w0 in model.weights.items():
        if key in adapter.factors:
            merged[key] = tensor.add(w0, adapter.delta(*key))
        else:
            merged[key] = w0
    return EffectiveWeights(dims=model.dims, weights=merged)


def apply_deltas(model: BaseModel, deltas: dict[tuple[int, str], np.ndarray]) -> EffectiveWeights:
    """Add dense per-projection deltas (e.g. a merge result) to the base."""
    merged = {}
    for key, w0 in model.weights.items():
        d = deltas.get(key)
        if d is None:
            merged[key] = w0
        else:
            if d.shape != w0.shape:
                raise ShapeError(f"delta for {key} has shape {d.shape}, weight is {w0.shape}")
            merged[key] = tensor.add(w0, d)
    return EffectiveWeights(dims=model.dims, weights=merged)


def forward(weights: BaseModel | EffectiveWeights, x: np.ndarray, prompt: PromptEmbedding) -> np.ndarray:
    """Eager forward pass; returns the final latent (length d)."""
    dims = weights.dims
    w = weights.weights
    x = tensor.as_f32(x)
    if x.shape != (dims.d,):
        raise ShapeError(f"latent has shape {x.shape}, model width is ({dims.d},)")
    p_t = tensor.as_f32(prompt.tokens).T  # (d_p, n_tokens)
    if p_t.ndim != 2 or p_t.shape[0] != dims.d_p or p_t.shape[1] < 1:
        raise ShapeError(f"prompt tokens have shape {prompt.tokens.shape}, "
                         f"expected (n >= 1, {dims.d_p})")
    inv_sqrt_h = 1.0 / math.sqrt(dims.h)
    for b in range(dims.blocks):
        q = tensor.matmul(w[(b, "Q")], x)
        kp = tensor.matmul(w[(b, "K")], p_t)
        scores = tensor.scale(inv_sqrt_h, tensor.matmul(q, kp))
        attn = tensor.softmax(scores)
        vp = tensor.matmul(w[(b, "V")], p_t)
        ctx = tensor.matmul(vp, attn)
        x = tensor.add(x, tensor.matmul(w[(b, "O")], ctx))
    return x


def forward_on_tape(
    tape: Tape,
    dims: ModelDims,
    weight_nodes: dict[tuple[int, str], int],
    x: np.ndarray,
    prompt: PromptEmbedding,
) -> int:
    """Taped forward pass over weight nodes; mirrors forward() call for call."""
    x_node = tape.constant(tensor.as_f32(x))
    p_t = tape.constant(tensor.as_f32(prompt.tokens).T)
    inv_sqrt_h = 1.0 / math.sqrt(dims.h)
    for b in range(dims.blocks):
        q = tape.matmul(weight_nodes[(b, "Q")], x_node)
        kp = tape.matmul(weight_nodes[(b, "K")], p_t)
        scores = tape.scalar_mul(inv_sqrt_h, tape.matmul(q, kp))
        attn = tape.softmax(scores)
        vp = tape.matmul(weight_nodes[(b, "V")], p_t)
        ctx = tape.matmul(vp, attn)
        x_node = tape.add(x_node, tape.matmul(weight_nodes[(b, "O")], ctx))
    return x_node


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    lr: float = 5e-3
    rank: int = 4
    seed: int = 0


def finetune_lora(model: BaseModel, task, cfg: FinetuneConfig) -> tuple[LoraAdapter, list[float]]:
    """Fit a fresh adapter to a task by MSE on its (x, prompt, target) sampler.

    `task` must expose kind, task_seed, prompt, sample_latent(rng) and
    target(x).  A factors start gaussian(0, 1/sqrt(in)), B factors start at
    zero, so the first step leaves the base model's outputs unchanged.
    Returns the adapter and the per-step loss trace; raises DivergenceError
    on a non-finite loss or if the final loss is not below the initial one.
    """
    dims = model.dims
    rng = Rng(derive_seed(cfg.seed, "finetune", task.kind, task.task_seed))
    params: dict[str, np.ndarray] = {}
    for b in range(dims.blocks):
        for role in ROLES:
            out_rows, in_cols = dims.proj_shape(role)
            params[f"{b}.{role}.A"] = rng.gaussian_array(
                (cfg.rank, in_cols), sigma=1.0 / math.sqrt(in_cols))
            params[f"{b}.{role}.B"] = tensor.zeros((out_rows, cfg.rank))
    opt = AdamW(params, AdamWConfig(lr=cfg.lr))
    losses: list[float] = []
    for step in range(cfg.steps):
        x = task.sample_latent(rng)
        target = task.target(x)
        tape = Tape()
        weight_nodes = {}
        param_nodes = {}
        for b in range(dims.blocks):
            for role in ROLES:
                a_node = tape.param(params[f"{b}.{role}.A"])
                b_node = tape.param(params[f"{b}.{role}.B"])
                param_nodes[f"{b}.{role}.A"] = a_node
                param_nodes[f"{b}.{role}.B"] = b_node
                w0 = tape.constant(model.weights[(b, role)])
                weight_nodes[(b, role)] = tape.add(w0, tape.matmul(b_node, a_node))
        out = forward_on_tape(tape, dims, weight_nodes, x, task.prompt)
        diff = tape.sub(out, tape.constant(target))
        loss = tape.scalar_mul(1.0 / dims.d, tape.dot(diff, diff))
        loss_val = float(tape.value(loss))
        if not math.isfinite(loss_val):
            raise DivergenceError(f"non-finite fine-tune loss at step {step}")
        losses.append(loss_val)
        grads_by_id = tape.backward(loss)
        grads = {key: grads_by_id[nid] for key, nid in param_nodes.items()}
        params = opt.step(params, grads)
    if losses and cfg.steps > 1 and not losses[-1] < losses[0] and losses[-1] > 1e-12:
        # A flat trace at ~zero loss means the task was already solved, not divergence.
        raise DivergenceError(
            f"fine-tune did not descend: first loss {losses[0]:.6f}, last {losses[-1]:.6f}")
    factors = {}
    for b in range(dims.blocks):
        for role in ROLES:
            factors[(b, role)] = (params[f"{b}.{role}.A"], params[f"{b}.{role}.B"])
    adapter = LoraAdapter(kind=task.kind, rank=cfg.rank, task_seed=task.task_seed, factors=factors)
    return adapter, losses
