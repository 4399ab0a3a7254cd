"""Three-head treatment-effect networks and their neighbor-augmented variants.

Topology shared by all families::

    x -> [200 ELU] -> [200 ELU] -> [200 ELU] = Z(x)
    concat(Z, ybar0) -> [100 ELU, l2] -> [100 ELU, l2] -> [1 linear] = Q(0, x)
    concat(Z, ybar1) -> [100 ELU, l2] -> [100 ELU, l2] -> [1 linear] = Q(1, x)
    Z -> [1 sigmoid] = g(x)

Baselines drop the ybar inputs (heads take 200 columns). TARnet has no
propensity head. NEDnet has the same layers as Dragonnet and differs only in
how it is trained.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import netcore
from .losses import LossConfig, factual, objective_with_grads
from .neighbors import NeighborFeatures
from .netcore import DenseLayer, GradientBundle, Network, ShapeError

__all__ = [
    "FAMILIES",
    "ArchConfig",
    "ThreeHeadModel",
    "build",
    "predict",
    "estimate_effects",
    "model_label",
    "save_model",
    "load_model",
]

FAMILIES = ("dragonnet", "tarnet", "nednet")
_DISPLAY = {"dragonnet": "Dragonnet", "tarnet": "TARnet", "nednet": "NEDnet"}


def model_label(family: str, nn_variant: bool, metric: Optional[str] = None) -> str:
    """Display name, e.g. ``NN-Dragonnet (Manhattan)`` or ``TARnet``."""
    base = _DISPLAY[family]
    if not nn_variant:
        return base
    return f"NN-{base} ({metric.capitalize()})" if metric else f"NN-{base}"


@dataclass(frozen=True)
class ArchConfig:
    family: str = "dragonnet"
    use_neighbor_features: bool = True
    rep_layers: tuple = (200, 200, 200)
    head_layers: tuple = (100, 100)
    head_l2: float = 1e-2
    init_scheme: str = "glorot-uniform"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "rep_layers", tuple(int(v) for v in self.rep_layers))
        object.__setattr__(self, "head_layers", tuple(int(v) for v in self.head_layers))
        if not self.rep_layers or any(v <= 0 for v in self.rep_layers + self.head_layers):
            raise ValueError("layer sizes must be positive and the representation non-empty")

    @property
    def has_propensity_head(self) -> bool:
        return self.family != "tarnet"

    @property
    def representation_width(self) -> int:
        return self.rep_layers[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rep_layers"] = list(self.rep_layers)
        d["head_layers"] = list(self.head_layers)
        return d


def _head(arch: ArchConfig, name: str) -> Network:
    aux = 1 if arch.use_neighbor_features else 0
    widths = (arch.representation_width + aux,) + arch.head_layers
    layers = [DenseLayer.zeros(widths[i], widths[i + 1], "elu", arch.head_l2)
              for i in range(len(arch.head_layers))]
    layers.append(DenseLayer.zeros(widths[-1], 1, "linear"))
    return Network(layers, aux_width=aux, aux_at=0, name=name)


@dataclass(eq=False)
class ThreeHeadModel:
    arch: ArchConfig
    rep: Network
    head0: Network
    head1: Network
    prop: Optional[Network]
    epsilon: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def input_width(self) -> int:
        return self.rep.input_width

    def networks(self) -> dict:
        nets = {"rep": self.rep, "head0": self.head0, "head1": self.head1}
        if self.prop is not None:
            nets["prop"] = self.prop
        return nets

    def parameters(self) -> dict:
        """Live parameter arrays keyed like ``"head0.1.W"``, plus ``"epsilon"``."""
        out = {}
        for prefix, net in self.networks().items():
            for k, v in net.parameters().items():
                out[f"{prefix}.{k}"] = v
        out["epsilon"] = self.epsilon
        return out

    def n_parameters(self) -> int:
        """Network weights and biases (epsilon excluded)."""
        return sum(net.n_parameters() for net in self.networks().values())

    def penalty(self) -> float:
        return sum(net.penalty() for net in self.networks().values())

    def touch(self) -> None:
        for net in self.networks().values():
            net.touch()

    def copy(self) -> "ThreeHeadModel":
        return ThreeHeadModel(self.arch, self.rep.copy(), self.head0.copy(), self.head1.copy(),
                              None if self.prop is None else self.prop.copy(), self.epsilon.copy())

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore(self, state: dict) -> None:
        params = self.parameters()
        for k, v in state.items():
            params[k][...] = v
        self.touch()

    # -- batched evaluation ---------------------------------------------------

    def _aux(self, ybar, n, which):
        if not self.arch.use_neighbor_features:
            return None
        if ybar is None:
            raise ValueError(f"this model uses neighbor features; {which} is required")
        a = np.asarray(ybar, dtype=float).reshape(-1, 1)
        if a.shape[0] != n:
            raise ShapeError(f"{which} has {a.shape[0]} rows, expected {n}")
        return a

    def forward(self, X, ybar0=None, ybar1=None):
        """Batched outputs ``(q0, q1, g)`` plus traces for :meth:`backward`."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.input_width:
            raise ShapeError(f"expected {self.input_width} covariates, got {X.shape[1]}")
        n = X.shape[0]
        Z, tr_rep = netcore.forward(self.rep, X)
        q0, tr0 = netcore.forward(self.head0, Z, self._aux(ybar0, n, "ybar0"))
        q1, tr1 = netcore.forward(self.head1, Z, self._aux(ybar1, n, "ybar1"))
        g, trg = (None, None)
        if self.prop is not None:
            g, trg = netcore.forward(self.prop, Z)
            g = g[:, 0]
        return q0[:, 0], q1[:, 0], g, (tr_rep, tr0, tr1, trg)

    def backward(self, traces, d_q0, d_q1, d_g=None, d_eps=0.0, loss=0.0,
                 frozen=()) -> GradientBundle:
        """Gradients for every parameter given output gradients.

        Networks named in ``frozen`` (``"rep"``, ``"head0"``, ...) receive
        exact zeros and contribute no penalty. The returned loss is ``loss``
        plus the L2 penalty of the non-frozen networks.
        """
        tr_rep, tr0, tr1, trg = traces
        grads = {}
        total = float(loss)
        need_rep = "rep" not in frozen
        dZ = np.zeros_like(tr_rep.post[-1])
        for name, net, tr, d in (("head0", self.head0, tr0, d_q0), ("head1", self.head1, tr1, d_q1),
                                 ("prop", self.prop, trg, d_g)):
            if net is None:
                continue
            if d is None:
                d = np.zeros(tr.post[-1].shape[0])
            if name in frozen:
                b = netcore.backward(net, tr, d, need_input_grad=need_rep)
                if need_rep:
                    dZ += b.input_grad
                grads.update({f"{name}.{k}": np.zeros_like(v) for k, v in b.grads.items()})
                continue
            b = netcore.backward(net, tr, d, need_input_grad=need_rep)
            total += b.loss
            if need_rep:
                dZ += b.input_grad
            grads.update({f"{name}.{k}": v for k, v in b.grads.items()})
        if need_rep:
            b = netcore.backward(self.rep, tr_rep, dZ, need_input_grad=False)
            total += b.loss
            rep_grads = {f"rep.{k}": v for k, v in b.grads.items()}
        else:
            rep_grads = {f"rep.{k}": np.zeros_like(v) for k, v in self.rep.parameters().items()}
        ordered = dict(rep_grads)
        for name in ("head0", "head1", "prop"):
            ordered.update({k: v for k, v in grads.items() if k.startswith(name + ".")})
        ordered["epsilon"] = np.array([0.0 if "epsilon" in frozen else float(d_eps)])
        return GradientBundle(ordered, total)

    def objective_gradients(self, X, t, y, features: Optional[NeighborFeatures], cfg: LossConfig,
                            frozen=()) -> GradientBundle:
        """Objective value (with L2 penalty) and gradients on one batch.

        Each sample's outcome error flows only into the head matching its
        treatment.
        """
        ybar0 = ybar1 = None
        if features is not None:
            ybar0, ybar1 = features.ybar0, features.ybar1
        q0, q1, g, traces = self.forward(X, ybar0, ybar1)
        t = np.asarray(t, dtype=float).ravel()
        value, d_q, d_g, d_eps = objective_with_grads(
            factual(q0, q1, t), y, t, g, cfg, float(self.epsilon[0]))
        return self.backward(traces, d_q * (1.0 - t), d_q * t, d_g, d_eps, value, frozen)


def build(arch: ArchConfig, input_width: int, seed=0) -> ThreeHeadModel:
    """Construct and initialize a model for ``input_width`` covariates."""
    widths = (int(input_width),) + arch.rep_layers
    rep = Network([DenseLayer.zeros(widths[i], widths[i + 1], "elu")
                   for i in range(len(arch.rep_layers))], name="rep")
    prop = None
    if arch.has_propensity_head:
        prop = Network([DenseLayer.zeros(arch.representation_width, 1, "sigmoid")], name="prop")
    model = ThreeHeadModel(arch, rep, _head(arch, "head0"), _head(arch, "head1"), prop,
                           np.zeros(1))
    rng = np.random.default_rng(seed)
    for net in model.networks().values():
        netcore.init(net, arch.init_scheme, rng)
    return model


def reinit_heads(model: ThreeHeadModel, seed=0) -> None:
    rng = np.random.default_rng(seed)
    for net in (model.head0, model.head1):
        netcore.init(net, model.arch.init_scheme, rng)


def predict(model: ThreeHeadModel, x, ybar0=None, ybar1=None):
    """Predicted outcomes under control and treatment, and the propensity.

    Accepts a single covariate vector (scalars out) or a batch (arrays out).
    ``g`` is ``None`` for models without a propensity head.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if model.arch.use_neighbor_features and (ybar0 is None or ybar1 is None):
        raise ValueError("this model uses neighbor features; ybar0 and ybar1 are required")
    q0, q1, g, _ = model.forward(x.reshape(1, -1) if single else x,
                                 None if ybar0 is None else np.atleast_1d(ybar0),
                                 None if ybar1 is None else np.atleast_1d(ybar1))
    if single:
        return float(q0[0]), float(q1[0]), None if g is None else float(g[0])
    return q0, q1, g


def estimate_effects(model: ThreeHeadModel, test_X, features: Optional[NeighborFeatures] = None):
    """``(ate_hat, ite_hat)`` with ite_hat = q1 - q0 on every test row."""
    test_X = np.atleast_2d(np.asarray(test_X, dtype=float))
    if test_X.shape[0] == 0:
        raise ValueError("empty test set")
    ybar0 = ybar1 = None
    if model.arch.use_neighbor_features:
        if features is None:
            raise ValueError("this model uses neighbor features; features are required")
        ybar0, ybar1 = features.ybar0, features.ybar1
    q0, q1, _, _ = model.forward(test_X, ybar0, ybar1)
    ite = q1 - q0
    return float(np.mean(ite)), ite


# -- checkpoints ------------------------------------------------------------------

def model_to_dict(model: ThreeHeadModel) -> dict:
    return {
        "arch": model.arch.to_dict(),
        "input_width": model.input_width,
        "epsilon": float(model.epsilon[0]),
        "networks": {k: netcore.network_to_dict(v) for k, v in model.networks().items()},
    }


def model_from_dict(d: dict) -> ThreeHeadModel:
    arch = ArchConfig(**d["arch"])
    nets = {k: netcore.network_from_dict(v) for k, v in d["networks"].items()}
    return ThreeHeadModel(arch, nets["rep"], nets["head0"], nets["head1"], nets.get("prop"),
                          np.array([float(d.get("epsilon", 0.0))]))


def save_model(model: ThreeHeadModel, path, extra: Optional[dict] = None) -> None:
    payload = model_to_dict(model)
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path):
    """Returns ``(model, extra)``."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(d), d.get("extra", {})
