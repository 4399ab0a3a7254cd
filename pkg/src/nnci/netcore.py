"""A small dense-network engine with exact reverse-mode gradients.

Networks here are plain stacks of affine layers. One optional auxiliary input
vector can be concatenated to the activations entering a chosen layer, which
is how the neighbor features join the outcome heads. Everything runs in
float64 on row-major batches of shape (n_samples, width).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "DenseLayer",
    "Network",
    "Trace",
    "GradientBundle",
    "ShapeError",
    "StaleTraceError",
    "forward",
    "backward",
    "init",
    "activate",
    "network_to_dict",
    "network_from_dict",
    "save_network",
    "load_network",
]

ACTIVATIONS = ("elu", "linear", "sigmoid")


class ShapeError(ValueError):
    pass


class StaleTraceError(RuntimeError):
    """A trace was replayed against a network that changed after the forward pass."""


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation at ``z`` given its output ``h``."""
    if kind == "linear":
        return np.ones_like(z)
    if kind == "elu":
        return np.where(z > 0, 1.0, h + 1.0)
    if kind == "sigmoid":
        return h * (1.0 - h)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(eq=False)
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"
    l2: float = 0.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @classmethod
    def zeros(cls, n_in: int, n_out: int, activation="linear", l2=0.0) -> "DenseLayer":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out), activation, l2)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass(eq=False)
class Network:
    """Ordered dense layers, with an optional auxiliary input.

    ``aux_width`` extra columns are appended to the activations that enter
    layer ``aux_at`` (0 means the raw input).
    """

    layers: list
    aux_width: int = 0
    aux_at: int = 0
    name: str = ""
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        if not 0 <= self.aux_at < len(self.layers):
            raise ShapeError("aux_at must index an existing layer")
        for i in range(1, len(self.layers)):
            expected = self.layers[i - 1].n_out + (self.aux_width if i == self.aux_at else 0)
            if self.layers[i].n_in != expected:
                raise ShapeError(
                    f"{self.name or 'network'}: layer {i} takes {self.layers[i].n_in} inputs, "
                    f"previous layer provides {expected}")
        if self.layers[0].n_in < (self.aux_width if self.aux_at == 0 else 0):
            raise ShapeError("first layer narrower than the auxiliary input")

    @property
    def input_width(self) -> int:
        return self.layers[0].n_in - (self.aux_width if self.aux_at == 0 else 0)

    @property
    def output_width(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> dict:
        """Parameter arrays keyed ``"{i}.W"`` / ``"{i}.b"``; arrays are live views."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.W"] = layer.W
            out[f"{i}.b"] = layer.b
        return out

    def n_parameters(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def penalty(self) -> float:
        return float(sum(layer.l2 * np.sum(layer.W * layer.W) for layer in self.layers if layer.l2))

    def touch(self) -> None:
        """Mark parameters as modified; traces taken before this become stale."""
        self.version += 1

    def copy(self) -> "Network":
        layers = [DenseLayer(l.W.copy(), l.b.copy(), l.activation, l.l2) for l in self.layers]
        return Network(layers, self.aux_width, self.aux_at, self.name)


@dataclass(eq=False)
class Trace:
    net: Network
    version: int
    inputs: list  # activations entering each layer (after any concatenation)
    pre: list  # pre-activations
    post: list  # layer outputs


@dataclass(eq=False)
class GradientBundle:
    """Gradients for every parameter of a network plus the scalar loss.

    ``input_grad``/``aux_grad`` are the gradients with respect to the forward
    inputs, for chaining networks together.
    """

    grads: dict
    loss: float = 0.0
    input_grad: Optional[np.ndarray] = None
    aux_grad: Optional[np.ndarray] = None

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()]) if self.grads else np.empty(0)


def _as_batch(v, width: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1) if width != 1 or a.shape[0] == 1 else a.reshape(-1, 1)
    if a.ndim != 2 or a.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got shape {np.shape(v)}")
    return a


def forward(net: Network, x, aux=None):
    """Evaluate ``net`` on a batch.

    ``x`` is (n, input_width) or a single vector. Returns the (n, output_width)
    outputs and the trace needed by :func:`backward`.
    """
    x = _as_batch(x, net.input_width, "input")
    if net.aux_width:
        if aux is None:
            raise ShapeError(f"{net.name or 'network'} requires an auxiliary input of width {net.aux_width}")
        aux = _as_batch(aux, net.aux_width, "aux")
        if aux.shape[0] != x.shape[0]:
            raise ShapeError("input and aux batch sizes differ")
    elif aux is not None:
        raise ShapeError(f"{net.name or 'network'} takes no auxiliary input")
    inputs, pre, post = [], [], []
    a = x
    for i, layer in enumerate(net.layers):
        if net.aux_width and i == net.aux_at:
            a = np.concatenate([a, aux], axis=1)
        z = a @ layer.W.T + layer.b
        h = activate(z, layer.activation)
        inputs.append(a)
        pre.append(z)
        post.append(h)
        a = h
    return a, Trace(net, net.version, inputs, pre, post)


def backward(net: Network, trace: Trace, upstream, loss: float = 0.0,
             need_input_grad: bool = True) -> GradientBundle:
    """Reverse-mode gradients of ``loss + sum(l2 * ||W||^2)``.

    ``upstream`` is d(loss)/d(output), shaped like the forward output. The
    L2 penalty on weights is added to both the returned loss and the weight
    gradients; biases are not penalized.
    """
    if trace.net is not net or trace.version != net.version:
        raise StaleTraceError("trace does not belong to the current state of this network")
    g = np.asarray(upstream, dtype=float)
    out = trace.post[-1]
    if g.ndim == 1 and out.shape[1] == 1 and g.shape[0] == out.shape[0]:
        g = g.reshape(-1, 1)
    if g.shape != out.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output {out.shape}")
    grads = {}
    aux_grad = None
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_grad(trace.pre[i], trace.post[i], layer.activation)
        dW = dz.T @ trace.inputs[i]
        if layer.l2:
            dW = dW + 2.0 * layer.l2 * layer.W
        grads[f"{i}.W"] = dW
        grads[f"{i}.b"] = dz.sum(axis=0)
        if i == 0 and not need_input_grad and not (net.aux_width and net.aux_at == 0):
            g = None
            break
        g = dz @ layer.W
        if net.aux_width and i == net.aux_at:
            aux_grad = g[:, -net.aux_width:]
            g = g[:, :-net.aux_width]
    ordered = {k: grads[k] for k in sorted(grads, key=lambda s: (int(s.split(".")[0]), s))}
    return GradientBundle(ordered, float(loss) + net.penalty(), input_grad=g, aux_grad=aux_grad)


def init(net: Network, scheme: str = "glorot-uniform", seed=0) -> Network:
    """Fill weights from the chosen uniform scheme; zero all biases.

    glorot-uniform draws from U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    he-uniform uses a = sqrt(6 / fan_in). Modifies ``net`` in place and
    returns it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for layer in net.layers:
        fan_out, fan_in = layer.W.shape
        if scheme == "glorot-uniform":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        elif scheme == "he-uniform":
            bound = math.sqrt(6.0 / fan_in)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
        layer.b[...] = 0.0
    net.touch()
    return net


# -- serialization --------------------------------------------------------------

def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "aux_width": net.aux_width,
        "aux_at": net.aux_at,
        "layers": [
            {
                "shape": list(layer.W.shape),
                "activation": layer.activation,
                "l2": layer.l2,
                # row-major payloads; repr round-trips float64 exactly
                "W": [float(v) for v in layer.W.ravel(order="C")],
                "b": [float(v) for v in layer.b],
            }
            for layer in net.layers
        ],
    }


def network_from_dict(d: dict) -> Network:
    layers = []
    for spec in d["layers"]:
        shape = tuple(spec["shape"])
        W = np.array(spec["W"], dtype=float).reshape(shape)
        layers.append(DenseLayer(W, np.array(spec["b"], dtype=float), spec["activation"], spec["l2"]))
    return Network(layers, d.get("aux_width", 0), d.get("aux_at", 0), d.get("name", ""))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)), encoding="utf-8")


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
