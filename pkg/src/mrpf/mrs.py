"""Module Robustness Sensitivity: how much the adversarial loss rises when one
layer's weights are pushed uphill inside a relative l2 ball."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AdversarialSet
from .data import Dataset
from .network import Network, NetworkError


class MrsError(ValueError):
    pass


@dataclass(frozen=True)
class MrsConfig:
    eta: float = 0.01
    epochs: int = 1
    epsilon: float = 8 / 255
    delta: float = 1e-6
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise MrsError("eta must be positive")
        if self.epochs < 0:
            raise MrsError("epochs must be nonnegative")
        if self.epsilon < 0:
            raise MrsError("epsilon must be nonnegative")
        if self.delta <= 0:
            raise MrsError("delta must be positive")
        if self.batch_size < 1:
            raise MrsError("batch_size must be positive")


@dataclass(frozen=True)
class MrsEntry:
    layer: int
    name: str
    perturbed_loss: float
    raw: float
    mrs: float
    norm_ratio: float
    weight_norm: float
    steps: int


@dataclass
class MrsReport:
    baseline_loss: float
    entries: list[MrsEntry]
    delta: float
    config: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return [e.layer for e in self.entries]

    @property
    def values(self) -> np.ndarray:
        return np.array([e.mrs for e in self.entries], dtype=np.float64)

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        return {
            "baseline_loss": self.baseline_loss,
            "delta": self.delta,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d) -> "MrsReport":
        return cls(
            baseline_loss=d["baseline_loss"],
            entries=[MrsEntry(**e) for e in d["entries"]],
            delta=d["delta"],
            config=d.get("config", {}),
        )

    @classmethod
    def from_values(cls, values: Sequence[float], delta: float = 1e-6, layers=None) -> "MrsReport":
        """Report holding only MRS values; for ratio allocation experiments."""
        layers = list(range(len(values))) if layers is None else list(layers)
        entries = [
            MrsEntry(l, f"layer{l}", float("nan"), float(v), float(v), 0.0, 0.0, 0)
            for l, v in zip(layers, values)
        ]
        return cls(float("nan"), entries, delta)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "name", "mrs", "raw_mrs", "perturbed_loss", "baseline_loss", "norm_ratio", "weight_norm"])
            for e in self.entries:
                w.writerow([e.layer, e.name, repr(e.mrs), repr(e.raw), repr(e.perturbed_loss),
                            repr(self.baseline_loss), repr(e.norm_ratio), repr(e.weight_norm)])


def _pairs(ae) -> Dataset:
    if isinstance(ae, AdversarialSet):
        ae = ae.as_dataset()
    if len(ae) == 0:
        raise MrsError("adversarial set is empty")
    return ae


def _mean_ce(net: Network, data: Dataset) -> float:
    g = ad.ExprGraph(
        ad.cross_entropy(net.logits_node(ad.leaf("x", frozen=True), net.param_leaves(())), ad.leaf("y", frozen=True))
    )
    return float(ad.evaluate(g, {"x": data.x, "y": data.y, **net.params()}))


def baseline_adv_loss(net: Network, ae) -> float:
    """Mean cross-entropy of the unmodified network over the adversarial pairs."""
    return _mean_ce(net, _pairs(ae))


def project_weight_delta(w: np.ndarray, w_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale ``w - w_orig`` onto the ball of radius ``epsilon * ||w_orig||``."""
    d = w - w_orig
    norm = np.linalg.norm(d)
    radius = epsilon * np.linalg.norm(w_orig)
    if norm > radius:
        return w_orig + d * (radius / norm) if norm > 0 else w_orig.copy()
    return w


def _norm_ratio(w, w_orig) -> float:
    base = np.linalg.norm(w_orig)
    d = np.linalg.norm(w - w_orig)
    return float(d / base) if base > 0 else 0.0


def ascend_layer(net: Network, layer: int, ae, cfg: MrsConfig) -> tuple[Network, list[float]]:
    """Gradient ascent on one layer's weights; returns the clone and per-step norm ratios."""
    data = _pairs(ae)
    if layer not in net.weighted_layers:
        raise NetworkError(f"layer {layer} has no weights")
    name = f"W{layer}"
    leaves = net.param_leaves([name])
    graph = ad.ExprGraph(
        ad.cross_entropy(net.logits_node(ad.leaf("x", frozen=True), leaves), ad.leaf("y", frozen=True))
    )
    params = dict(net.params())
    w_orig = params[name]
    w = w_orig.copy()
    ratios: list[float] = []
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for xb, yb in data.batches(cfg.batch_size, rng):
            params[name] = w
            g = ad.gradient(graph, {"x": xb, "y": yb, **params}, [name])[name]
            w = project_weight_delta(w + cfg.eta * g, w_orig, cfg.epsilon)
            ratios.append(_norm_ratio(w, w_orig))
    return net.with_params({name: w}), ratios


def perturb_layer_weights(net: Network, layer: int, ae, cfg: MrsConfig) -> Network:
    """Clone of ``net`` where only layer ``layer``'s weight has been pushed uphill."""
    return ascend_layer(net, layer, ae, cfg)[0]


def compute_mrs(net: Network, ae, cfg: MrsConfig, layers: Iterable[int] | None = None) -> MrsReport:
    """MRS for each layer (prunable layers by default), each from a fresh clone.

    Raw values at or below ``delta`` are reported as ``delta``.
    """
    data = _pairs(ae)
    layers = list(net.prunable_layers if layers is None else layers)
    if not layers:
        raise MrsError("network has no layers to score")
    base = _mean_ce(net, data)
    entries = []
    for layer in sorted(layers):
        pert, ratios = ascend_layer(net, layer, data, cfg)
        loss = _mean_ce(pert, data)
        raw = loss - base
        entries.append(
            MrsEntry(
                layer=layer,
                name=net.layer_name(layer),
                perturbed_loss=loss,
                raw=raw,
                mrs=max(raw, cfg.delta),
                norm_ratio=max(ratios, default=0.0),
                weight_norm=float(np.linalg.norm(net.weights[layer])),
                steps=len(ratios),
            )
        )
    return MrsReport(base, entries, cfg.delta, asdict(cfg))
