"""Channel importance, MRS-driven per-layer ratios, and pruning plans."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .mrs import MrsReport
from .network import Network, SurgeryMap, remove_channels

VARIANTS = ("deviation", "inv_mrs")
CRITERIA = ("magnitude", "taylor")


class PruningError(ValueError):
    pass


@dataclass
class ImportanceScores:
    scores: dict[int, np.ndarray]
    criterion: str
    normalization: str = "none"
    degenerate: list[int] = field(default_factory=list)

    def __getitem__(self, layer):
        return self.scores[layer]

    @property
    def layers(self) -> list[int]:
        return sorted(self.scores)


def _row_sums(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).sum(axis=1)


def magnitude_importance(net: Network, p: float = 2.0, layers=None) -> ImportanceScores:
    """Sum of |w|^p over each output channel's weights (biases excluded)."""
    if p <= 0:
        raise PruningError("norm degree p must be positive")
    layers = net.prunable_layers if layers is None else layers
    return ImportanceScores({i: _row_sums(np.abs(net.weights[i]) ** p) for i in layers}, "magnitude")


def taylor_importance(net: Network, x, y, layers=None) -> ImportanceScores:
    """Sum of |w * dL/dw| per output channel, L the mean cross-entropy on the batch."""
    x = net.check_batch(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise PruningError("taylor importance needs a nonempty batch")
    layers = list(net.prunable_layers if layers is None else layers)
    names = [f"W{i}" for i in layers]
    leaves = net.param_leaves(names)
    graph = ad.ExprGraph(
        ad.cross_entropy(net.logits_node(ad.leaf("x", frozen=True), leaves), ad.leaf("y", frozen=True))
    )
    grads = ad.gradient(graph, {"x": x, "y": np.asarray(y), **net.params()}, names)
    return ImportanceScores(
        {i: _row_sums(np.abs(net.weights[i] * grads[f"W{i}"])) for i in layers}, "taylor"
    )


def normalize_importance(scores: ImportanceScores) -> ImportanceScores:
    """Divide each layer's scores by their mean; all-zero layers pass through."""
    out, degenerate = {}, []
    for layer, s in scores.scores.items():
        m = s.mean() if s.size else 0.0
        if m > 0:
            out[layer] = s / m
        else:
            out[layer] = s.copy()
            degenerate.append(layer)
    return ImportanceScores(out, scores.criterion, "mean", degenerate)


# --- ratio allocation -------------------------------------------------------------


@dataclass(frozen=True)
class RatioConfig:
    r_g: float = 0.5
    r_min: float = 0.1
    r_max: float = 0.8
    delta: float = 1e-6
    variant: str = "deviation"

    def __post_init__(self):
        for name in ("r_g", "r_min", "r_max"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PruningError(f"{name} must lie in [0, 1]")
        if self.r_min > self.r_max:
            raise PruningError("r_min must not exceed r_max")
        if self.delta <= 0:
            raise PruningError("delta must be positive")
        if self.variant not in VARIANTS:
            raise PruningError(f"unknown ratio variant {self.variant!r}")


@dataclass(frozen=True)
class Allocation:
    ratios: dict[int, float]
    variant: str
    achieved_mean: float

    @property
    def values(self) -> np.ndarray:
        return np.array(list(self.ratios.values()))

    def __getitem__(self, layer):
        return self.ratios[layer]


def _check_report(report: MrsReport):
    if len(report) == 0:
        raise PruningError("MRS report is empty")


def allocate_ratios_invmrs(report: MrsReport, cfg: RatioConfig) -> Allocation:
    """p_i = min(r_g * w_i, r_max) with w_i the normalised inverse MRS."""
    _check_report(report)
    inv = 1.0 / (report.values + cfg.delta)
    w = inv / inv.sum()
    p = np.minimum(w * cfg.r_g, cfg.r_max)
    return Allocation(dict(zip(report.layers, p.tolist())), "inv_mrs", float(p.mean()))


def allocate_ratios_deviation(report: MrsReport, cfg: RatioConfig) -> Allocation:
    """Ratios from normalised MRS deviations, rescaled toward mean r_g.

    Higher MRS gives a smaller ratio.  After the rescale the ratios are clipped
    to [r_min, r_max] again, so the mean can fall short of r_g when a bound binds.
    """
    _check_report(report)
    mrs = report.values
    dev = mrs - mrs.mean()
    span = np.abs(dev).max()
    dev = dev / span if span > 0 else np.zeros_like(dev)
    p = np.clip(cfg.r_g - dev * (cfg.r_max - cfg.r_min), cfg.r_min, cfg.r_max)
    actual = p.mean()
    if actual > 0:
        p = np.clip(p * (cfg.r_g / actual), cfg.r_min, cfg.r_max)
    return Allocation(dict(zip(report.layers, p.tolist())), "deviation", float(p.mean()))


def allocate_ratios(report: MrsReport, cfg: RatioConfig) -> Allocation:
    if cfg.variant == "deviation":
        return allocate_ratios_deviation(report, cfg)
    return allocate_ratios_invmrs(report, cfg)


# --- plans ------------------------------------------------------------------------


@dataclass
class PruningPlan:
    ratios: dict[int, float]
    channels: dict[int, int]
    counts: dict[int, int]
    pruned: dict[int, tuple[int, ...]]
    clamped: list[int] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    retained_channels: int = 0
    retained_parameters: int = 0

    def surgery(self) -> SurgeryMap:
        retained = {}
        for layer, drop in self.pruned.items():
            if drop:
                dropped = set(drop)
                retained[layer] = tuple(j for j in range(self.channels[layer]) if j not in dropped)
        return SurgeryMap(retained)

    def apply(self, net: Network) -> Network:
        return remove_channels(net, self.surgery())

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("ratios", "channels", "counts", "pruned"):
            d[key] = {str(k): (list(v) if isinstance(v, tuple) else v) for k, v in d[key].items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "PruningPlan":
        conv = lambda m, f=lambda v: v: {int(k): f(v) for k, v in m.items()}
        return cls(
            ratios=conv(d["ratios"], float),
            channels=conv(d["channels"], int),
            counts=conv(d["counts"], int),
            pruned=conv(d["pruned"], lambda v: tuple(int(i) for i in v)),
            clamped=[int(v) for v in d.get("clamped", [])],
            provenance=d.get("provenance", {}),
            retained_channels=d.get("retained_channels", 0),
            retained_parameters=d.get("retained_parameters", 0),
        )

    def __eq__(self, other):
        if not isinstance(other, PruningPlan):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def plan_pruning(
    scores: ImportanceScores,
    ratios: Mapping[int, float] | Allocation,
    net: Network,
    provenance: dict | None = None,
) -> PruningPlan:
    """Drop the floor(p_i * k_i) least important channels of each layer.

    Ties go to the smaller channel index.  The classifier is never pruned, and
    a ratio that would empty a layer keeps one channel (the layer is flagged).
    """
    if isinstance(ratios, Allocation):
        ratios = ratios.ratios
    if set(ratios) != set(scores.scores):
        raise PruningError("ratios and scores cover different layers")
    if net.classifier in ratios:
        raise PruningError("the classifier's output channels cannot be pruned")
    norm = scores if scores.normalization == "mean" else normalize_importance(scores)
    counts, pruned, channels, clamped = {}, {}, {}, []
    for layer in sorted(ratios):
        p = float(ratios[layer])
        k = net.channels(layer)
        s = norm.scores[layer]
        if s.shape != (k,):
            raise PruningError(f"layer {layer}: {s.shape[0]} scores for {k} channels")
        n = math.floor(p * k)
        if n >= k:
            n = k - 1
            clamped.append(layer)
        order = np.argsort(s, kind="stable")
        pruned[layer] = tuple(sorted(int(j) for j in order[:n]))
        counts[layer] = n
        channels[layer] = k
    plan = PruningPlan(
        ratios={l: float(ratios[l]) for l in sorted(ratios)},
        channels=channels,
        counts=counts,
        pruned=pruned,
        clamped=clamped,
        provenance=dict(provenance or {}, criterion=scores.criterion),
    )
    pruned_net = plan.apply(net)
    plan.retained_channels = int(sum(pruned_net.channels(l) for l in net.prunable_layers))
    plan.retained_parameters = pruned_net.num_parameters()
    return plan
