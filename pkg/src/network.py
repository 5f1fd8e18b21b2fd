# src/network.py: plain and highway feedforward networks with tied gates

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from src import linalg
from src.config import INIT_RANGE
from src.errors import (
    ConfigurationError,
    ConsistencyError,
    NumericError,
    ParameterError,
    ShapeError,
)
from src.losses import softmax_temperature

ARCHITECTURES = ("plain_dnn", "highway")
GROUPS = ("hidden", "gates", "output")


@dataclass(frozen=True)
class GateConfig:
    transform: bool = True
    carry: bool = True
    constrained: bool = False

    def __post_init__(self):
        if self.constrained and not self.transform:
            raise ConfigurationError("constrained gates compute C = 1 - T and need the transform gate")

    @property
    def has_carry_weights(self):
        return self.carry and not self.constrained

    @property
    def has_transform_weights(self):
        return self.transform


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int
    num_layers: int
    output_dim: int
    architecture: str = "highway"
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers", "output_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.is_highway and not (self.gate.transform or self.gate.carry or self.gate.constrained):
            raise ConfigurationError("a highway network needs the transform gate, the carry gate, or both")

    @property
    def is_highway(self):
        return self.architecture == "highway"

    @property
    def has_transform_weights(self):
        return self.is_highway and self.gate.has_transform_weights

    @property
    def has_carry_weights(self):
        return self.is_highway and self.gate.has_carry_weights

    def describe(self):
        prefix = "HDNN" if self.is_highway else "DNN"
        return f"{prefix}-H{self.hidden_dim}L{self.num_layers}"


GATE_VARIANTS = {
    "both": GateConfig(transform=True, carry=True),
    "transform": GateConfig(transform=True, carry=False),
    "carry": GateConfig(transform=False, carry=True),
    "constrained": GateConfig(transform=True, carry=False, constrained=True),
}


class Layer(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Parameters:
    """Hidden layers, the shared gate pair and the output layer.

    The gate matrices are tied across layers 2..L and carry no bias. A gate
    matrix is None when the configuration does not allocate it.
    """

    hidden: list
    output: Layer
    transform_gate: Optional[np.ndarray] = None
    carry_gate: Optional[np.ndarray] = None

    def named_arrays(self):
        """Yield (group, name, array) in declaration order."""
        for l, layer in enumerate(self.hidden, start=1):
            yield "hidden", f"W{l}", layer.weight
            yield "hidden", f"b{l}", layer.bias
        if self.transform_gate is not None:
            yield "gates", "W_T", self.transform_gate
        if self.carry_gate is not None:
            yield "gates", "W_C", self.carry_gate
        yield "output", "W_out", self.output.weight
        yield "output", "b_out", self.output.bias

    def arrays(self):
        return [a for _, _, a in self.named_arrays()]

    def group_arrays(self, group):
        if group not in GROUPS:
            raise ParameterError(f"unknown parameter group {group!r}")
        return [a for g, _, a in self.named_arrays() if g == group]

    def size(self):
        return int(sum(a.size for a in self.arrays()))

    def rebuild(self, arrays):
        """Same structure, new arrays (given in declaration order)."""
        it = iter(arrays)
        hidden = [Layer(next(it), next(it)) for _ in self.hidden]
        transform = next(it) if self.transform_gate is not None else None
        carry = next(it) if self.carry_gate is not None else None
        output = Layer(next(it), next(it))
        return Parameters(hidden, output, transform, carry)

    def map(self, fn):
        return self.rebuild(fn(a) for a in self.arrays())

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def identical_to(self, other):
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


@dataclass(frozen=True)
class ParamMask:
    update_hidden: bool = True
    update_gates: bool = True
    update_output: bool = True

    def __post_init__(self):
        if not (self.update_hidden or self.update_gates or self.update_output):
            raise ConfigurationError("at least one parameter group must be updated")

    @classmethod
    def everything(cls):
        return cls(True, True, True)

    @classmethod
    def gates_only(cls):
        return cls(False, True, False)

    @classmethod
    def parse(cls, text):
        """'hidden,gates,output' style list, or 'all' / 'gates'."""
        text = text.strip().lower()
        if text == "all":
            return cls.everything()
        names = {part.strip() for part in text.split(",") if part.strip()}
        unknown = names - set(GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups: {sorted(unknown)}")
        return cls("hidden" in names, "gates" in names, "output" in names)

    def updates(self, group):
        return {"hidden": self.update_hidden, "gates": self.update_gates, "output": self.update_output}[group]

    def describe(self):
        return ",".join(g for g in GROUPS if self.updates(g))


@dataclass
class ForwardTrace:
    inputs: list          # h_0 (the batch) .. h_L
    pre_activations: list  # a_l per layer
    activations: list     # sigmoid(a_l) per layer
    transform: list       # T_l per layer, None where the gate is absent
    carry: list           # C_l per layer, None where the gate is absent
    logits: np.ndarray
    posteriors: np.ndarray
    temperature: float
    forced_gates: bool = False

    @property
    def batch_size(self):
        return self.inputs[0].shape[0]


def param_count(config):
    H, D, J, L = config.hidden_dim, config.input_dim, config.output_dim, config.num_layers
    total = D * H + H + (L - 1) * (H * H + H) + H * J + J
    if config.has_transform_weights:
        total += H * H
    if config.has_carry_weights:
        total += H * H
    return total


def init_params(config, seed):
    rng = np.random.default_rng(seed)
    H = config.hidden_dim

    def uniform(shape):
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)

    hidden = []
    prev = config.input_dim
    for _ in range(config.num_layers):
        hidden.append(Layer(uniform((H, prev)), np.zeros(H)))
        prev = H
    transform = uniform((H, H)) if config.has_transform_weights else None
    carry = uniform((H, H)) if config.has_carry_weights else None
    output = Layer(uniform((config.output_dim, H)), np.zeros(config.output_dim))
    return Parameters(hidden, output, transform, carry)


def check_params(params, config):
    """Raise ConsistencyError unless `params` has exactly the shapes `config` implies."""
    expected = init_shapes(config)
    actual = [a.shape for a in params.arrays()]
    if actual != expected:
        raise ConsistencyError(f"parameters {actual} do not match {config.describe()} shapes {expected}")


def init_shapes(config):
    H = config.hidden_dim
    shapes = []
    prev = config.input_dim
    for _ in range(config.num_layers):
        shapes += [(H, prev), (H,)]
        prev = H
    if config.has_transform_weights:
        shapes.append((H, H))
    if config.has_carry_weights:
        shapes.append((H, H))
    shapes += [(config.output_dim, H), (config.output_dim,)]
    return shapes


def pack_weights(params, config, layer):
    """Stack [W_l; W_T; W_C] so one product yields all three pre-activations."""
    if not config.is_highway:
        raise ConfigurationError("weight packing needs a highway network")
    if not (config.has_transform_weights and config.has_carry_weights):
        raise ConfigurationError("weight packing needs both transform and carry gate matrices")
    if not 2 <= layer <= config.num_layers:
        raise ConfigurationError(f"layer {layer} has no gates; packing applies to layers 2..{config.num_layers}")
    return np.ascontiguousarray(
        np.vstack([params.hidden[layer - 1].weight, params.transform_gate, params.carry_gate])
    )


def split_packed(pre, hidden_dim):
    H = hidden_dim
    return pre[:, :H], pre[:, H:2 * H], pre[:, 2 * H:3 * H]


def forward(params, config, batch, temperature=1.0, packed=False, force_gates=None):
    """Run the network on a B x input_dim batch and keep what backprop needs.

    `force_gates=(t, c)` replaces every gate value with constants; it exists so
    the highway path can be checked against an ungated network.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if batch.ndim != 2 or batch.shape[1] != config.input_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input_dim {config.input_dim}")
    check_params(params, config)
    if packed and not (config.has_transform_weights and config.has_carry_weights):
        raise ConfigurationError("the packed route needs both transform and carry gate matrices")

    H = config.hidden_dim
    inputs, pres, acts, transforms, carries = [batch], [], [], [], []
    h = batch
    for l, layer in enumerate(params.hidden, start=1):
        t_val = c_val = None
        if l == 1 or not config.is_highway:
            a = linalg.matmul_t(h, layer.weight) + layer.bias
            s = linalg.sigmoid(a)
            h_next = s
        else:
            if packed:
                a_raw, t_pre, c_pre = split_packed(linalg.matmul_t(h, pack_weights(params, config, l)), H)
                a = a_raw + layer.bias
            else:
                a = linalg.matmul_t(h, layer.weight) + layer.bias
                t_pre = linalg.matmul_t(h, params.transform_gate) if config.has_transform_weights else None
                c_pre = linalg.matmul_t(h, params.carry_gate) if config.has_carry_weights else None
            s = linalg.sigmoid(a)
            if t_pre is not None:
                t_val = linalg.sigmoid(t_pre)
            if config.gate.constrained:
                c_val = 1.0 - t_val
            elif c_pre is not None:
                c_val = linalg.sigmoid(c_pre)
            if force_gates is not None:
                t_val = np.full_like(s, force_gates[0])
                c_val = np.full_like(s, force_gates[1])
            h_next = s * t_val if t_val is not None else s
            if c_val is not None:
                h_next = h_next + h * c_val
        if not np.all(np.isfinite(h_next)):
            raise NumericError(f"non-finite activation in layer {l}", layer=l)
        pres.append(a)
        acts.append(s)
        transforms.append(t_val)
        carries.append(c_val)
        inputs.append(h_next)
        h = h_next

    logits = linalg.matmul_t(h, params.output.weight) + params.output.bias
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in output layer", layer=config.num_layers + 1)
    posteriors = softmax_temperature(logits, temperature)
    return ForwardTrace(
        inputs, pres, acts, transforms, carries, logits, posteriors,
        float(temperature), forced_gates=force_gates is not None,
    )


def _check_trace(params, config, trace, d_logits):
    check_params(params, config)
    B = trace.batch_size
    if len(trace.inputs) != config.num_layers + 1:
        raise ConsistencyError(
            f"trace holds {len(trace.inputs) - 1} layers, config has {config.num_layers}"
        )
    if trace.inputs[0].shape[1] != config.input_dim or any(
        h.shape != (B, config.hidden_dim) for h in trace.inputs[1:]
    ):
        raise ConsistencyError("trace activations do not match the model dimensions")
    if d_logits.shape != (B, config.output_dim):
        raise ConsistencyError(f"dLogits shape {d_logits.shape} does not match ({B}, {config.output_dim})")


def backward(params, config, trace, d_logits):
    """Exact gradients of the loss whose logit gradient is `d_logits`."""
    _check_trace(params, config, trace, d_logits)
    L = config.num_layers
    grad_hidden = [None] * L
    grad_t = np.zeros_like(params.transform_gate) if params.transform_gate is not None else None
    grad_c = np.zeros_like(params.carry_gate) if params.carry_gate is not None else None
    gates_live = not trace.forced_gates

    grad_out = Layer(linalg.matmul(d_logits.T, trace.inputs[L]), d_logits.sum(axis=0))
    dh = linalg.matmul(d_logits, params.output.weight)

    for idx in range(L - 1, -1, -1):
        h_prev = trace.inputs[idx]
        s = trace.activations[idx]
        t_val, c_val = trace.transform[idx], trace.carry[idx]
        if idx > 0 and config.is_highway:
            ds = dh * t_val if t_val is not None else dh
            dh_prev = dh * c_val if c_val is not None else np.zeros_like(h_prev)
            if gates_live and grad_t is not None:
                d_t = dh * s
                if config.gate.constrained:
                    d_t = d_t - dh * h_prev
                d_t_pre = d_t * t_val * (1.0 - t_val)
                grad_t += linalg.matmul(d_t_pre.T, h_prev)
                dh_prev = dh_prev + linalg.matmul(d_t_pre, params.transform_gate)
            if gates_live and grad_c is not None:
                d_c_pre = dh * h_prev * c_val * (1.0 - c_val)
                grad_c += linalg.matmul(d_c_pre.T, h_prev)
                dh_prev = dh_prev + linalg.matmul(d_c_pre, params.carry_gate)
        else:
            ds = dh
            dh_prev = None
        da = ds * s * (1.0 - s)
        grad_hidden[idx] = Layer(linalg.matmul(da.T, h_prev), da.sum(axis=0))
        if idx > 0:
            through = linalg.matmul(da, params.hidden[idx].weight)
            dh = through if dh_prev is None else dh_prev + through

    return Parameters(grad_hidden, grad_out, grad_t, grad_c)


def gate_summary(trace):
    """Mean transform / carry gate value per gated layer."""
    rows = []
    for l, (t_val, c_val) in enumerate(zip(trace.transform, trace.carry), start=1):
        if t_val is None and c_val is None:
            continue
        rows.append({
            "layer": l,
            "transform_mean": float(t_val.mean()) if t_val is not None else 1.0,
            "carry_mean": float(c_val.mean()) if c_val is not None else 0.0,
        })
    return pd.DataFrame(rows, columns=["layer", "transform_mean", "carry_mean"])
