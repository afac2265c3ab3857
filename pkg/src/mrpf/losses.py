"""Adversarial training objectives: PGD-AT, TRADES and MART.

Each objective first generates its adversarial inputs, then builds an
expression graph in which those inputs are constants.  The graph is what
training differentiates, so no gradient flows through the inner attack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .network import Network

LOSS_METHODS = ("trades", "mart", "pgd_at", "ce")

# TRADES starts its KL ascent from x + N(0, 0.001^2): the KL gradient is exactly
# zero at x' = x, so a deterministic start would never move.
TRADES_START_STD = 0.001


@dataclass(frozen=True)
class LossConfig:
    """``weight`` is the TRADES lambda/beta or the MART lambda."""

    method: str = "trades"
    weight: float = 6.0
    inner: AttackConfig = field(default_factory=lambda: AttackConfig(iterations=10))

    def __post_init__(self):
        if self.method not in LOSS_METHODS:
            raise ValueError(f"unknown loss method {self.method!r}")
        if self.weight < 0:
            raise ValueError("loss weight must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inner"] = self.inner.to_dict()
        return d


def _inner_for_trades(cfg: LossConfig) -> AttackConfig:
    inner = replace(cfg.inner, loss="kl")
    if inner.random_start == 0:
        inner = replace(inner, random_start=TRADES_START_STD)
    return inner


def _inner_for_ce(cfg: LossConfig) -> AttackConfig:
    return replace(cfg.inner, loss="ce")


def build_loss(
    net: Network,
    x,
    y,
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
    trainable=None,
) -> tuple[ad.ExprGraph, dict]:
    """Graph and bindings for the training loss on one batch.

    ``trainable`` limits which parameters are differentiable (default: all).
    """
    x = net.check_batch(np.asarray(x, dtype=np.float64))
    y = np.asarray(y).astype(np.int64)
    leaves = net.param_leaves(trainable)
    ylf = ad.leaf("y", frozen=True)
    bindings = {"x": x, "y": y, **net.params()}
    clean = net.logits_node(ad.leaf("x", frozen=True), leaves)

    if cfg.method == "ce":
        root = ad.cross_entropy(clean, ylf)
    elif cfg.method == "pgd_at":
        x_adv = pgd(net, x, y, _inner_for_ce(cfg), rng)
        adv = net.logits_node(ad.leaf("x_adv", frozen=True), leaves)
        root = ad.cross_entropy(adv, ylf)
        bindings["x_adv"] = x_adv
    elif cfg.method == "trades":
        x_adv = pgd(net, x, y, _inner_for_trades(cfg), rng)
        adv = net.logits_node(ad.leaf("x_adv", frozen=True), leaves)
        kl = ad.kl_div(ad.softmax(clean), ad.softmax(adv))
        root = ad.add(ad.cross_entropy(clean, ylf), ad.scale(kl, cfg.weight))
        bindings["x_adv"] = x_adv
    else:  # mart
        x_adv = pgd(net, x, y, _inner_for_ce(cfg), rng)
        adv = net.logits_node(ad.leaf("x_adv", frozen=True), leaves)
        clean_pred = ad.evaluate(ad.ExprGraph(clean), bindings).argmax(axis=-1)
        gate = (clean_pred != y).astype(np.float64) * cfg.weight / len(y)
        kl = ad.kl_div(ad.softmax(clean), ad.softmax(adv), reduction="none")
        root = ad.add(ad.cross_entropy(adv, ylf), ad.reduce_sum(ad.scale(kl, gate)))
        bindings["x_adv"] = x_adv
    return ad.ExprGraph(root), bindings


def loss_and_grads(net: Network, x, y, cfg: LossConfig, rng=None, trainable=None):
    graph, bindings = build_loss(net, x, y, cfg, rng, trainable)
    names = graph.differentiable
    return ad.value_and_gradient(graph, bindings, names)


def _value(net, x, y, cfg, rng):
    graph, bindings = build_loss(net, x, y, cfg, rng)
    return float(ad.evaluate(graph, bindings))


def clean_ce(net: Network, x, y) -> float:
    return _value(net, x, y, LossConfig(method="ce"), None)


def pgd_at_loss(net: Network, x, y, cfg: LossConfig, rng=None) -> float:
    """Cross-entropy at the PGD point of the inner attack."""
    return _value(net, x, y, replace(cfg, method="pgd_at"), rng)


def trades_loss(net: Network, x, y, cfg: LossConfig, rng=None) -> float:
    """Clean cross-entropy plus weight * KL(N(x) || N(x')), x' from KL ascent."""
    return _value(net, x, y, replace(cfg, method="trades"), rng)


def mart_loss(net: Network, x, y, cfg: LossConfig, rng=None) -> float:
    """Adversarial cross-entropy plus a KL penalty gated on clean misclassification."""
    return _value(net, x, y, replace(cfg, method="mart"), rng)
