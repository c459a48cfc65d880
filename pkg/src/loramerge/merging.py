"""Training-free merge baselines and per-pair coefficient optimization.

Baselines operate on dense deltas (B @ A materialized once):

* direct:    weighted sum, default 0.5/0.5 averaging.
* dare:      random sparsification; each entry survives with probability p and
             is rescaled by 1/p, so the sparsified delta is unbiased.
* ties:      trim each delta to its largest-magnitude entries, elect a
             per-entry sign from the magnitude-weighted sum, then average the
             trimmed values that agree with the elected sign.
* dare-ties: dare each delta with independently derived seeds, then ties.

zip_optimize fits per-column coefficients for one (content, style) pair by
gradient descent on the pair loss; it is the slow per-pair route that the
trained coefficient predictor replaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .autodiff import AdamW, AdamWConfig, Tape
from .model import BaseModel, DivergenceError, LoraAdapter, ROLES
from .objective import (AVG_WEIGHT, MergeCoefficients, MergePolicy,
                        merge_loss_on_tape, merge_loss_value)
from .tensor import Rng, derive_seed


def direct_merge(delta_c: np.ndarray, delta_s: np.ndarray,
                 wc: float = AVG_WEIGHT, ws: float = AVG_WEIGHT) -> np.ndarray:
    return tensor.add(tensor.scale(wc, delta_c), tensor.scale(ws, delta_s))


def direct_merge_deltas(Lc: LoraAdapter, Ls: LoraAdapter,
                        wc: float = AVG_WEIGHT, ws: float = AVG_WEIGHT
                        ) -> dict[tuple[int, str], np.ndarray]:
    return {key: direct_merge(Lc.delta(*key), Ls.delta(*key), wc, ws)
            for key in sorted(Lc.factors)}


def dare_sparsify(delta: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Keep each entry with probability p (scaled 1/p), zero otherwise.

    Entries are visited in row-major order with one uniform draw each, so the
    result is a pure function of (delta, p, seed).
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"dare keep-probability must be in (0, 1], got {p}")
    rng = Rng(seed)
    flat = tensor.as_f32(delta).reshape(-1)
    draws = np.array([rng.uniform() for _ in range(flat.size)])
    kept = draws < p
    out = np.where(kept, flat.astype(np.float64) / p, 0.0).astype(tensor.F32)
    return out.reshape(delta.shape)


def ties_trim(delta: np.ndarray, k: float) -> np.ndarray:
    """Zero all but the top max(1, round(k*N)) entries by magnitude.

    Magnitude ties are broken toward the lower flat (row-major) index.
    """
    if not 0.0 < k <= 1.0:
        raise ValueError(f"ties trim fraction must be in (0, 1], got {k}")
    flat = tensor.as_f32(delta).reshape(-1)
    n_keep = max(1, int(round(k * flat.size)))
    order = np.argsort(-np.abs(flat), kind="stable")  # stable: lower index wins ties
    out = np.zeros_like(flat)
    keep_idx = order[:n_keep]
    out[keep_idx] = flat[keep_idx]
    return out.reshape(delta.shape)


def ties_merge(deltas: list[np.ndarray], k: float = 0.5) -> np.ndarray:
    """Trim, elect per-entry signs, and average sign-agreeing trimmed values."""
    if not deltas:
        raise ValueError("ties_merge needs at least one delta")
    shape = deltas[0].shape
    for d in deltas[1:]:
        if d.shape != shape:
            raise tensor.ShapeError(f"ties_merge deltas disagree: {shape} vs {d.shape}")
    trimmed = [ties_trim(d, k).reshape(-1).astype(np.float64) for d in deltas]
    stacked = np.stack(trimmed)                      # (n_deltas, N)
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (elected != 0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, stacked, 0.0).sum(axis=0)
    out = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return out.astype(tensor.F32).reshape(shape)


def dare_ties_merge(deltas: list[np.ndarray], p: float, k: float, seed: int) -> np.ndarray:
    """DARE each delta with a seed derived per position, then TIES-merge."""
    sparsified = [dare_sparsify(d, p, derive_seed(seed, "dare", i))
                  for i, d in enumerate(deltas)]
    return ties_merge(sparsified, k)


def dare_merge_deltas(Lc: LoraAdapter, Ls: LoraAdapter, p: float, seed: int,
                      wc: float = AVG_WEIGHT, ws: float = AVG_WEIGHT
                      ) -> dict[tuple[int, str], np.ndarray]:
    out = {}
    for key in sorted(Lc.factors):
        b, role = key
        dc = dare_sparsify(Lc.delta(b, role), p, derive_seed(seed, "dare", b, role, "content"))
        ds = dare_sparsify(Ls.delta(b, role), p, derive_seed(seed, "dare", b, role, "style"))
        out[key] = direct_merge(dc, ds, wc, ws)
    return out


def ties_merge_deltas(Lc: LoraAdapter, Ls: LoraAdapter, k: float = 0.5
                      ) -> dict[tuple[int, str], np.ndarray]:
    return {key: ties_merge([Lc.delta(*key), Ls.delta(*key)], k)
            for key in sorted(Lc.factors)}


def dare_ties_merge_deltas(Lc: LoraAdapter, Ls: LoraAdapter, p: float, k: float, seed: int
                           ) -> dict[tuple[int, str], np.ndarray]:
    return {key: dare_ties_merge([Lc.delta(*key), Ls.delta(*key)], p, k,
                                 derive_seed(seed, "proj", *key))
            for key in sorted(Lc.factors)}


# -- per-pair coefficient optimization ----------------------------------


@dataclass(frozen=True)
class ZipConfig:
    steps: int = 100
    lr: float = 0.01
    lam: float = 0.01
    init: float = 0.5
    seed: int = 0
    eval_samples: int = 4   # fixed sample count for the descent assertion


def zip_optimize(
    model: BaseModel,
    Lc: LoraAdapter,
    Ls: LoraAdapter,
    sampler,
    cfg: ZipConfig = ZipConfig(),
    policy: MergePolicy = MergePolicy(),
) -> tuple[MergeCoefficients, list[float]]:
    """Optimize per-column coefficients for one pair with AdamW.

    Fresh latents are drawn each step, so the per-step trace is stochastic;
    the descent guarantee (final <= initial) is asserted on a fixed
    seed-derived evaluation sample set instead.  Roles outside the policy
    stay at the 0.5/0.5 average and are not optimized.
    """
    dims = model.dims
    params: dict[str, np.ndarray] = {}
    keys = []
    for b in range(dims.blocks):
        for role in ROLES:
            if policy.merged(role):
                _, cols = dims.proj_shape(role)
                keys.append((b, role))
                params[f"{b}.{role}.mc"] = np.full(cols, cfg.init, dtype=tensor.F32)
                params[f"{b}.{role}.ms"] = np.full(cols, cfg.init, dtype=tensor.F32)

    def coefficients(p: dict[str, np.ndarray]) -> MergeCoefficients:
        return MergeCoefficients({(b, role): (p[f"{b}.{role}.mc"], p[f"{b}.{role}.ms"])
                                  for b, role in keys})

    eval_rng = Rng(derive_seed(cfg.seed, "zip-eval", Lc.task_seed, Ls.task_seed))
    eval_points = [(sampler.sample_content(eval_rng), sampler.sample_style(eval_rng))
                   for _ in range(cfg.eval_samples)]

    def eval_loss(p: dict[str, np.ndarray]) -> float:
        coeffs = coefficients(p)
        return sum(merge_loss_value(model, Lc, Ls, coeffs, policy, x_c,
                                    sampler.task_c.prompt, x_s, sampler.task_s.prompt,
                                    cfg.lam)
                   for x_c, x_s in eval_points) / max(len(eval_points), 1)

    initial = eval_loss(params)
    opt = AdamW(params, AdamWConfig(lr=cfg.lr))
    rng = Rng(derive_seed(cfg.seed, "zip", Lc.task_seed, Ls.task_seed))
    trace: list[float] = []
    for step in range(cfg.steps):
        x_c = sampler.sample_content(rng)
        x_s = sampler.sample_style(rng)
        tape = Tape()
        node_of = {name: tape.param(value) for name, value in params.items()}
        coeff_nodes = {(b, role): (node_of[f"{b}.{role}.mc"], node_of[f"{b}.{role}.ms"])
                       for b, role in keys}
        loss = merge_loss_on_tape(tape, model, Lc, Ls, coeff_nodes, policy,
                                  x_c, sampler.task_c.prompt,
                                  x_s, sampler.task_s.prompt, cfg.lam)
        loss_val = float(tape.value(loss))
        if not np.isfinite(loss_val):
            raise DivergenceError(f"non-finite pair loss at step {step}")
        trace.append(loss_val)
        grads_by_id = tape.backward(loss)
        grads = {name: grads_by_id[nid] for name, nid in node_of.items()}
        params = opt.step(params, grads)
    final = eval_loss(params)
    if final > initial:
        raise DivergenceError(
            f"coefficient optimization ascended: eval loss {initial:.6f} -> {final:.6f}")
    return coefficients(params), trace
