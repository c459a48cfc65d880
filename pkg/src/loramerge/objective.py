"""Column-coefficient merging and the merge training objective.

A merged delta is built column by column: given per-column coefficient
vectors m_c, m_s and the two adapter deltas,

    delta_merged = m_c (col*) delta_c  +  m_s (col*) delta_s,

where (col*) scales column j by the j-th coefficient.  The training loss for
a candidate merge is two-sided fidelity plus a cosine-style interference
penalty, per (content, style) pair:

    || f_m(x_c, p_c) - f_c(x_c, p_c) ||_2
  + || f_m(x_s, p_s) - f_s(x_s, p_s) ||_2
  + lambda * sum_projections | m_c . m_s |

with f_c / f_s the base model carrying only the content / style adapter.
Those reference branches are constants: gradients flow through the merged
branch only.  A merge policy routes a subset of roles (default Query and
Output) through learned coefficients; the remaining roles are plain 0.5/0.5
averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autodiff import Tape
from .model import (BaseModel, LoraAdapter, ROLES, apply_lora, forward,
                    forward_on_tape)
from .tensor import ShapeError

AVG_WEIGHT = 0.5  # coefficient used for roles outside the policy


@dataclass(frozen=True)
class MergePolicy:
    """Which projection roles get learned per-column coefficients."""

    roles: frozenset = frozenset({"Q", "O"})

    def __post_init__(self):
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles in policy: {sorted(bad)}; roles are {ROLES}")

    def merged(self, role: str) -> bool:
        return role in self.roles

    @classmethod
    def parse(cls, text: str) -> "MergePolicy":
        """Accepts 'Q,O' or compact 'QO'."""
        letters = [p for p in text.replace(",", "").strip()]
        return cls(roles=frozenset(letters))

    def to_text(self) -> str:
        return ",".join(sorted(self.roles))


@dataclass
class MergeCoefficients:
    """(m_c, m_s) per policy projection; vector length equals column count."""

    coeffs: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def validate_against(self, adapter: LoraAdapter) -> None:
        for (block, role), (m_c, m_s) in self.coeffs.items():
            a, _ = adapter.factors[(block, role)]
            cols = a.shape[1]
            if m_c.shape != (cols,) or m_s.shape != (cols,):
                raise ShapeError(
                    f"coefficients for blocks.{block}.{role} have shapes "
                    f"{m_c.shape}/{m_s.shape}, projection has {cols} columns")


def constant_coefficients(model: BaseModel, policy: MergePolicy,
                          wc: float = AVG_WEIGHT, ws: float = AVG_WEIGHT) -> MergeCoefficients:
    """Constant-per-column coefficients (the direct-merge point in coefficient space)."""
    coeffs = {}
    for b in range(model.dims.blocks):
        for role in ROLES:
            if policy.merged(role):
                _, cols = model.dims.proj_shape(role)
                coeffs[(b, role)] = (np.full(cols, wc, dtype=tensor.F32),
                                     np.full(cols, ws, dtype=tensor.F32))
    return MergeCoefficients(coeffs)


def merge_with_coeffs(delta_c: np.ndarray, delta_s: np.ndarray,
                      m_c: np.ndarray, m_s: np.ndarray) -> np.ndarray:
    """Column-scaled combination of two deltas."""
    return tensor.add(tensor.col_scale(m_c, delta_c), tensor.col_scale(m_s, delta_s))


def build_merged_deltas(Lc: LoraAdapter, Ls: LoraAdapter,
                        coeffs: MergeCoefficients, policy: MergePolicy
                        ) -> dict[tuple[int, str], np.ndarray]:
    """Dense merged delta per projection; non-policy roles are 0.5/0.5 averages."""
    out = {}
    for key in sorted(Lc.factors):
        dc = Lc.delta(*key)
        ds = Ls.delta(*key)
        _, role = key
        if policy.merged(role):
            m_c, m_s = coeffs.coeffs[key]
            out[key] = merge_with_coeffs(dc, ds, m_c, m_s)
        else:
            out[key] = tensor.add(tensor.scale(AVG_WEIGHT, dc), tensor.scale(AVG_WEIGHT, ds))
    return out


def merge_loss_on_tape(
    tape: Tape,
    model: BaseModel,
    Lc: LoraAdapter,
    Ls: LoraAdapter,
    coeff_nodes: dict[tuple[int, str], tuple[int, int]],
    policy: MergePolicy,
    x_c: np.ndarray,
    p_c,
    x_s: np.ndarray,
    p_s,
    lam: float,
) -> int:
    """Record the pair loss; returns the scalar loss node.

    coeff_nodes maps each policy projection to its (m_c, m_s) node ids (param
    or constant).  Reference outputs are computed eagerly and enter as
    constants, so backward() touches the merged branch only.
    """
    dims = model.dims
    ref_c = forward(apply_lora(model, Lc), x_c, p_c)
    ref_s = forward(apply_lora(model, Ls), x_s, p_s)
    weight_nodes = {}
    for b in range(dims.blocks):
        for role in ROLES:
            key = (b, role)
            w0 = model.weights[key]
            dc = Lc.delta(b, role)
            ds = Ls.delta(b, role)
            if policy.merged(role):
                mc_node, ms_node = coeff_nodes[key]
                delta_node = tape.add(
                    tape.col_scale(mc_node, tape.constant(dc)),
                    tape.col_scale(ms_node, tape.constant(ds)))
                weight_nodes[key] = tape.add(tape.constant(w0), delta_node)
            else:
                avg = tensor.add(tensor.scale(AVG_WEIGHT, dc), tensor.scale(AVG_WEIGHT, ds))
                weight_nodes[key] = tape.constant(tensor.add(w0, avg))
    out_c = forward_on_tape(tape, dims, weight_nodes, x_c, p_c)
    out_s = forward_on_tape(tape, dims, weight_nodes, x_s, p_s)
    loss = tape.add(
        tape.l2norm(tape.sub(out_c, tape.constant(ref_c))),
        tape.l2norm(tape.sub(out_s, tape.constant(ref_s))))
    if lam != 0.0:
        for key in sorted(coeff_nodes):
            mc_node, ms_node = coeff_nodes[key]
            loss = tape.add(loss, tape.scalar_mul(lam, tape.absdot(mc_node, ms_node)))
    return loss


def merge_loss_value(
    model: BaseModel,
    Lc: LoraAdapter,
    Ls: LoraAdapter,
    coeffs: MergeCoefficients,
    policy: MergePolicy,
    x_c: np.ndarray,
    p_c,
    x_s: np.ndarray,
    p_s,
    lam: float,
) -> float:
    """Pair loss at fixed coefficient values (forward only)."""
    tape = Tape()
    coeff_nodes = {key: (tape.constant(m_c), tape.constant(m_s))
                   for key, (m_c, m_s) in coeffs.coeffs.items()}
    loss = merge_loss_on_tape(tape, model, Lc, Ls, coeff_nodes, policy,
                              x_c, p_c, x_s, p_s, lam)
    return float(tape.value(loss))


def pair_eval_loss(
    model: BaseModel,
    Lc: LoraAdapter,
    Ls: LoraAdapter,
    coeffs: MergeCoefficients,
    policy: MergePolicy,
    sampler,
    lam: float,
    n_samples: int = 8,
    seed: int = 0,
) -> float:
    """Mean pair loss over a fixed, seed-derived sample set.

    The samples depend only on (seed, pair task seeds), so two methods
    evaluated on the same pair see identical latents.
    """
    rng = tensor.Rng(tensor.derive_seed(seed, "eval-loss", Lc.task_seed, Ls.task_seed))
    total = 0.0
    for _ in range(n_samples):
        x_c = sampler.sample_content(rng)
        x_s = sampler.sample_style(rng)
        total += merge_loss_value(model, Lc, Ls, coeffs, policy,
                                  x_c, sampler.task_c.prompt, x_s, sampler.task_s.prompt, lam)
    return total / n_samples
