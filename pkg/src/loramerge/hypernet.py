"""Coefficient predictor: one shared network that replaces per-pair optimization.

For a projection whose delta has m rows, each column pair is concatenated to a
length-2m feature; the n columns form a minibatch.  The network is a width-
routed two-layer MLP: one input affine (2m -> hidden) per distinct 2m among
the policy projections, a ReLU, and a shared output affine (hidden -> 2)
whose two units are the content and style coefficients for that column.
Predicting coefficients for a new pair is a single forward pass, versus
hundreds of gradient steps for per-pair optimization.

Initialization pins the untrained network to the direct-merge point: input
weights are gaussian(0, 1/sqrt(in)), the output weight is zero and its bias
is 0.5, so every predicted coefficient starts at exactly 0.5.  Training
updates only network parameters; adapters and the base model stay frozen.

Checkpoint keys are hypernet.in_{2m}.weight / .bias and hypernet.out.weight /
.bias, with affine weights stored (in, out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor, tensorfile
from .autodiff import AdamW, AdamWConfig, Tape
from .model import BaseModel, DivergenceError, LoraAdapter, ModelDims, ROLES
from .objective import MergeCoefficients, MergePolicy, merge_loss_on_tape
from .tasks import PairSampler, gen_task, sample_pair
from .tensor import Rng, derive_seed

OUT_UNITS = 2
INIT_COEFF = 0.5


class UnregisteredWidthError(ValueError):
    """Input width 2m has no input layer; message lists registered widths."""


@dataclass
class AffineLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray    # (out,)


def policy_widths(dims: ModelDims, policy: MergePolicy) -> tuple[int, ...]:
    """Distinct concatenated-column widths (2m) over the policy projections."""
    widths = {2 * dims.proj_shape(role)[0] for role in ROLES if policy.merged(role)}
    return tuple(sorted(widths))


@dataclass
class Hypernetwork:
    hidden: int
    input_layers: dict[int, AffineLayer] = field(default_factory=dict)
    output: AffineLayer | None = None

    @classmethod
    def from_widths(cls, widths: tuple[int, ...], hidden: int, seed: int) -> "Hypernetwork":
        layers = {}
        for width in sorted(set(widths)):
            rng = Rng(derive_seed(seed, "hypernet", "in", width))
            layers[width] = AffineLayer(
                weight=rng.gaussian_array((width, hidden), sigma=1.0 / math.sqrt(width)),
                bias=tensor.zeros((hidden,)))
        output = AffineLayer(weight=tensor.zeros((hidden, OUT_UNITS)),
                             bias=np.full(OUT_UNITS, INIT_COEFF, dtype=tensor.F32))
        return cls(hidden=hidden, input_layers=layers, output=output)

    @classmethod
    def for_model(cls, dims: ModelDims, policy: MergePolicy, hidden: int, seed: int) -> "Hypernetwork":
        return cls.from_widths(policy_widths(dims, policy), hidden, seed)

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for width in sorted(self.input_layers):
            out[f"in_{width}.weight"] = self.input_layers[width].weight
            out[f"in_{width}.bias"] = self.input_layers[width].bias
        out["out.weight"] = self.output.weight
        out["out.bias"] = self.output.bias
        return out

    def replace_params(self, params: dict[str, np.ndarray]) -> None:
        for width in self.input_layers:
            self.input_layers[width].weight = params[f"in_{width}.weight"]
            self.input_layers[width].bias = params[f"in_{width}.bias"]
        self.output.weight = params["out.weight"]
        self.output.bias = params["out.bias"]

    def count_params(self) -> int:
        return sum(v.size for v in self.params().values())

    # -- forward -----------------------------------------------------------

    def _features(self, delta_c: np.ndarray, delta_s: np.ndarray) -> tuple[int, np.ndarray]:
        if delta_c.shape != delta_s.shape:
            raise tensor.ShapeError(
                f"delta shapes differ: {delta_c.shape} vs {delta_s.shape}")
        rows = delta_c.shape[0]
        width = 2 * rows
        if width not in self.input_layers:
            raise UnregisteredWidthError(
                f"no input layer for width {width}; registered widths are "
                f"{sorted(self.input_layers)}")
        feats = np.concatenate([tensor.as_f32(delta_c).T, tensor.as_f32(delta_s).T],
                               axis=1).astype(tensor.F32)
        return width, feats

    def predict(self, delta_c: np.ndarray, delta_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients for every column of one projection (eager)."""
        width, feats = self._features(delta_c, delta_s)
        layer = self.input_layers[width]
        hidden = tensor.relu(tensor.add(tensor.matmul(feats, layer.weight), layer.bias))
        out = tensor.add(tensor.matmul(hidden, self.output.weight), self.output.bias)
        return out[:, 0].copy(), out[:, 1].copy()

    def predict_on_tape(self, tape: Tape, node_of: dict[str, int],
                        delta_c: np.ndarray, delta_s: np.ndarray) -> tuple[int, int]:
        """Taped twin of predict(); node_of maps params() keys to tape nodes."""
        width, feats = self._features(delta_c, delta_s)
        x = tape.constant(feats)
        hidden = tape.relu(tape.add(tape.matmul(x, node_of[f"in_{width}.weight"]),
                                    node_of[f"in_{width}.bias"]))
        out = tape.add(tape.matmul(hidden, node_of["out.weight"]), node_of["out.bias"])
        return tape.slice_index(out, axis=1, index=0), tape.slice_index(out, axis=1, index=1)


def count_params(widths: tuple[int, ...], hidden: int, out_units: int = OUT_UNITS) -> int:
    """Parameter count for given input widths: sum of in*out + out per affine."""
    total = sum(w * hidden + hidden for w in sorted(set(widths)))
    return total + hidden * out_units + out_units


def hypernet_coefficients(net: Hypernetwork, Lc: LoraAdapter, Ls: LoraAdapter,
                          policy: MergePolicy) -> MergeCoefficients:
    """One forward pass per policy projection."""
    coeffs = {}
    for key in sorted(Lc.factors):
        _, role = key
        if policy.merged(role):
            m_c, m_s = net.predict(Lc.delta(*key), Ls.delta(*key))
            coeffs[key] = (m_c, m_s)
    return MergeCoefficients(coeffs)


# -- training -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    pair_period: int = 5    # steps between pair redraws; short dwells keep
                            # the update stream close to the pair distribution
    lr: float = 0.01
    lam: float = 0.01
    hidden: int = 8
    seed: int = 0


def train_hypernet(
    model: BaseModel,
    content: list[LoraAdapter],
    style: list[LoraAdapter],
    cfg: TrainConfig = TrainConfig(),
    policy: MergePolicy = MergePolicy(),
    net: Hypernetwork | None = None,
) -> tuple[Hypernetwork, list[float]]:
    """Train the predictor over a pool of (content, style) pairs.

    Every pair_period steps a pair is redrawn uniformly from the pools; every
    step draws fresh latents, predicts coefficients, scores the merged model
    against the two single-adapter references, and AdamW-updates the network.
    Returns the trained network and the per-step loss trace.  steps=0 returns
    the initialized network unchanged.
    """
    if not content or not style:
        raise ValueError("train_hypernet needs non-empty content and style pools")
    if net is None:
        net = Hypernetwork.for_model(model.dims, policy, cfg.hidden, cfg.seed)
    params = net.params()
    opt = AdamW(params, AdamWConfig(lr=cfg.lr))
    rng = Rng(derive_seed(cfg.seed, "train-hypernet"))
    trace: list[float] = []
    Lc = Ls = sampler = None
    for step in range(cfg.steps):
        if step % cfg.pair_period == 0 or sampler is None:
            Lc, Ls = sample_pair(content, style, rng)
            sampler = PairSampler(gen_task("content", Lc.task_seed, model.dims),
                                  gen_task("style", Ls.task_seed, model.dims))
        x_c = sampler.sample_content(rng)
        x_s = sampler.sample_style(rng)
        tape = Tape()
        node_of = {name: tape.param(value) for name, value in params.items()}
        coeff_nodes = {}
        for key in sorted(Lc.factors):
            _, role = key
            if policy.merged(role):
                coeff_nodes[key] = net.predict_on_tape(
                    tape, node_of, Lc.delta(*key), Ls.delta(*key))
        loss = merge_loss_on_tape(tape, model, Lc, Ls, coeff_nodes, policy,
                                  x_c, sampler.task_c.prompt,
                                  x_s, sampler.task_s.prompt, cfg.lam)
        loss_val = float(tape.value(loss))
        if not np.isfinite(loss_val):
            raise DivergenceError(f"non-finite training loss at step {step}")
        trace.append(loss_val)
        grads_by_id = tape.backward(loss)
        grads = {name: grads_by_id[nid] for name, nid in node_of.items()}
        params = opt.step(params, grads)
        net.replace_params(params)
    return net, trace


# -- checkpoints --------------------------------------------------------


def save_hypernet(path, net: Hypernetwork, policy: MergePolicy,
                  extra_metadata: dict[str, str] | None = None) -> None:
    tensors = {f"hypernet.{name}": value for name, value in net.params().items()}
    metadata = {
        "kind": "hypernet",
        "hidden": str(net.hidden),
        "widths": ",".join(str(w) for w in sorted(net.input_layers)),
        "policy": policy.to_text(),
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    tensorfile.save_tensors(path, tensors, metadata)


def load_hypernet(path) -> tuple[Hypernetwork, MergePolicy]:
    tf = tensorfile.load_tensorfile(path)
    if tf.metadata.get("kind") != "hypernet":
        raise tensorfile.UnknownKindError(
            f"{path}: metadata kind {tf.metadata.get('kind')!r} is not 'hypernet'")
    try:
        hidden = int(tf.metadata["hidden"])
    except (KeyError, ValueError) as exc:
        raise tensorfile.KeyConventionError(f"{path}: missing integer 'hidden' "
                                            f"metadata ({exc})") from exc
    layers: dict[int, dict[str, np.ndarray]] = {}
    out_parts: dict[str, np.ndarray] = {}
    for name, arr in tf.tensors.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[0] != "hypernet" or parts[2] not in ("weight", "bias"):
            raise tensorfile.KeyConventionError(f"{path}: unexpected tensor key {name!r}")
        group = parts[1]
        if group == "out":
            out_parts[parts[2]] = arr
        elif group.startswith("in_") and group[3:].isdigit():
            layers.setdefault(int(group[3:]), {})[parts[2]] = arr
        else:
            raise tensorfile.KeyConventionError(f"{path}: unexpected tensor key {name!r}")
    if "weight" not in out_parts or "bias" not in out_parts:
        raise tensorfile.MissingFactorError(f"{path}: output layer weight/bias missing")
    input_layers = {}
    for width, parts in sorted(layers.items()):
        if "weight" not in parts or "bias" not in parts:
            raise tensorfile.MissingFactorError(
                f"{path}: input layer for width {width} is missing weight or bias")
        w, b = parts["weight"], parts["bias"]
        if w.shape != (width, hidden) or b.shape != (hidden,):
            raise tensorfile.MalformedHeaderError(
                f"{path}: input layer {width} has weight{w.shape} bias{b.shape}, "
                f"expected ({width}, {hidden}) and ({hidden},)")
        input_layers[width] = AffineLayer(weight=w, bias=b)
    if not input_layers:
        raise tensorfile.MissingFactorError(f"{path}: checkpoint has no input layers")
    ow, ob = out_parts["weight"], out_parts["bias"]
    if ow.shape != (hidden, OUT_UNITS) or ob.shape != (OUT_UNITS,):
        raise tensorfile.MalformedHeaderError(
            f"{path}: output layer has weight{ow.shape} bias{ob.shape}, "
            f"expected ({hidden}, {OUT_UNITS}) and ({OUT_UNITS},)")
    net = Hypernetwork(hidden=hidden, input_layers=input_layers,
                       output=AffineLayer(weight=ow, bias=ob))
    policy = MergePolicy.parse(tf.metadata.get("policy", "Q,O"))
    return net, policy
