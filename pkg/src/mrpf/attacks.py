"""l-infinity adversarial examples: FGSM, PGD and the APGD core of AutoAttack."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .data import Dataset
from .network import Network, forward

METHODS = ("fgsm", "pgd", "apgd")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Threat model and optimiser settings shared by all attacks.

    ``loss`` is ``ce`` (cross-entropy against the labels) or ``kl``
    (KL divergence from the clean prediction, as in TRADES).  ``random_start``
    is the std of Gaussian noise added to the starting point; 0 starts at x.
    """

    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 10
    momentum: float = 0.75
    valid_range: tuple[float, float] = (0.0, 1.0)
    loss: str = "ce"
    random_start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "valid_range", tuple(float(v) for v in self.valid_range))
        if self.epsilon < 0:
            raise AttackError("epsilon must be nonnegative")
        if self.iterations < 0:
            raise AttackError("iterations must be nonnegative")
        if self.iterations > 0 and self.alpha <= 0:
            raise AttackError("step size alpha must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise AttackError("momentum must lie in [0, 1]")
        lo, hi = self.valid_range
        if lo > hi:
            raise AttackError("valid_range must be (low, high) with low <= high")
        if self.loss not in ("ce", "kl"):
            raise AttackError(f"unknown attack loss {self.loss!r}")
        if self.random_start < 0:
            raise AttackError("random_start must be nonnegative")

    @classmethod
    def preset(cls, name: str, epsilon: float = 8 / 255, iterations: int = 20, **kw) -> "AttackConfig":
        """Named step-size conventions.

        ``eval``: step epsilon/4 (2/255 at epsilon 8/255), 20 iterations.
        ``uniform``: step epsilon/T.  ``fgsm``: one step of size epsilon.
        """
        if name == "eval":
            return cls(epsilon=epsilon, alpha=epsilon / 4 if epsilon > 0 else 1.0, iterations=iterations, **kw)
        if name == "uniform":
            return cls(
                epsilon=epsilon,
                alpha=epsilon / iterations if epsilon > 0 and iterations else 1.0,
                iterations=iterations,
                **kw,
            )
        if name == "fgsm":
            return cls(epsilon=epsilon, alpha=epsilon if epsilon > 0 else 1.0, iterations=1, **kw)
        raise AttackError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["valid_range"] = list(self.valid_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "AttackConfig":
        return cls(**d)


def project(x_adv: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Project onto the epsilon box around ``x0`` intersected with the valid range."""
    out = np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
    return np.clip(out, *cfg.valid_range)


class _LossOracle:
    """Per-example attack loss and its input gradient for a fixed batch."""

    def __init__(self, net: Network, x0: np.ndarray, y: np.ndarray, loss: str):
        self.net = net
        xleaf = ad.leaf("x")
        logits = net.logits_node(xleaf, net.param_leaves(()))
        if loss == "ce":
            per = ad.cross_entropy(logits, ad.leaf("y", frozen=True), reduction="none")
            self.extra = {"y": np.asarray(y)}
        else:
            per = ad.kl_div(ad.leaf("ref", frozen=True), ad.softmax(logits), reduction="none")
            ref = ad.evaluate(ad.ExprGraph(ad.softmax(logits)), {"x": x0, **net.params()})
            self.extra = {"ref": ref}
        self.per = per
        self.graph = ad.ExprGraph(ad.reduce_sum(per))
        self.params = net.params()

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, grads, (per,) = ad.trace(
            self.graph, {"x": x, **self.params, **self.extra}, ["x"], watch=[self.per]
        )
        return per, grads["x"]

    def losses(self, x: np.ndarray) -> np.ndarray:
        per, _ = self(x)
        return per


def _start(x0, cfg, rng):
    if cfg.random_start > 0 and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        return project(x0 + cfg.random_start * rng.standard_normal(x0.shape), x0, cfg)
    return x0.copy()


def _prepare(net, x, y):
    x0 = net.check_batch(np.asarray(x, dtype=np.float64))
    y = np.asarray(y).astype(np.int64)
    if y.shape != (x0.shape[0],):
        raise AttackError(f"labels {y.shape} do not match batch {x0.shape}")
    return x0, y


def fgsm(net: Network, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """One signed-gradient step of size epsilon; sign(0) = 0."""
    x0, y = _prepare(net, x, y)
    if cfg.epsilon == 0:
        return x0.copy()
    oracle = _LossOracle(net, x0, y, cfg.loss)
    start = _start(x0, cfg, rng)
    _, g = oracle(start)
    return project(start + cfg.epsilon * np.sign(g), x0, cfg)


def pgd(net: Network, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """``iterations`` projected signed-gradient steps of size ``alpha``."""
    x0, y = _prepare(net, x, y)
    xk = _start(x0, cfg, rng)
    if cfg.iterations == 0 or cfg.epsilon == 0:
        return xk
    oracle = _LossOracle(net, x0, y, cfg.loss)
    for _ in range(cfg.iterations):
        _, g = oracle(xk)
        xk = project(xk + cfg.alpha * np.sign(g), x0, cfg)
    return xk


def apgd_checkpoints(iterations: int) -> list[int]:
    """Iterations after which the step size may be halved.

    First checkpoint at ceil(0.22 T); each later gap shrinks by 0.03 T down
    to a floor of 0.06 T, following the AutoAttack schedule.
    """
    gap = max(math.ceil(0.22 * iterations), 1)
    shrink = max(math.ceil(0.03 * iterations), 1)
    floor = max(math.ceil(0.06 * iterations), 1)
    points, t = [], gap
    while t <= iterations:
        points.append(t)
        gap = max(gap - shrink, floor)
        t += gap
    return points


def apgd(net: Network, x, y, cfg: AttackConfig, rng=None, rho: float = 0.75) -> np.ndarray:
    """Adaptive-step PGD with momentum; returns the best iterate per example.

    Each example starts with step 2*epsilon and x^{-1} = x^0, so the first
    update has no momentum term.  At a checkpoint the step is
    halved, and the iterate reset to the best point so far, when fewer than
    ``rho`` of the steps since the last checkpoint increased the loss, or when
    the best loss did not improve and the step was not halved last time.
    """
    x0, y = _prepare(net, x, y)
    if cfg.iterations < 1:
        raise AttackError("apgd needs at least one iteration")
    xk = _start(x0, cfg, rng)
    if cfg.epsilon == 0:
        return xk
    oracle = _LossOracle(net, x0, y, cfg.loss)
    bshape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
    eta = np.full(bshape, 2.0 * cfg.epsilon)
    a = cfg.momentum

    loss_k, g_k = oracle(xk)
    x_prev = xk.copy()
    x_best, g_best, loss_best = xk.copy(), g_k.copy(), loss_k.copy()
    checkpoints = set(apgd_checkpoints(cfg.iterations))
    last_ckpt = 0
    increases = np.zeros(x0.shape[0])
    best_at_ckpt = loss_best.copy()
    reduced_last = np.zeros(x0.shape[0], dtype=bool)

    for k in range(cfg.iterations):
        z = project(xk + eta * np.sign(g_k), x0, cfg)
        x_new = project(xk + a * (z - xk) + (1 - a) * (xk - x_prev), x0, cfg)
        loss_new, g_new = oracle(x_new)
        increases += loss_new > loss_k
        better = loss_new > loss_best
        x_best[better], g_best[better], loss_best[better] = x_new[better], g_new[better], loss_new[better]
        x_prev, xk, g_k, loss_k = xk, x_new, g_new, loss_new

        if k + 1 in checkpoints:
            span = k + 1 - last_ckpt
            oscillating = increases < rho * span
            stalled = ~reduced_last & (best_at_ckpt >= loss_best)
            reduce = oscillating | stalled
            eta[reduce] /= 2.0
            xk = xk.copy()
            xk[reduce], g_k[reduce], loss_k[reduce] = x_best[reduce], g_best[reduce], loss_best[reduce]
            reduced_last = reduce
            best_at_ckpt = loss_best.copy()
            increases[:] = 0
            last_ckpt = k + 1
    return x_best


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "apgd": apgd}


def attack(net: Network, x, y, method: str, cfg: AttackConfig, rng=None) -> np.ndarray:
    try:
        fn = ATTACKS[method]
    except KeyError:
        raise AttackError(f"unknown attack method {method!r}") from None
    return fn(net, x, y, cfg, rng)


def attack_loss(net: Network, x, y) -> float:
    """Mean cross-entropy, the quantity every CE attack ascends."""
    g = ad.ExprGraph(
        ad.cross_entropy(net.logits_node(ad.leaf("x", frozen=True), net.param_leaves(())), ad.leaf("y", frozen=True))
    )
    return float(ad.evaluate(g, {"x": np.asarray(x), "y": np.asarray(y), **net.params()}))


# --- dataset level --------------------------------------------------------------


@dataclass
class AdversarialSet:
    x: np.ndarray
    y: np.ndarray
    clean: np.ndarray
    method: str
    config: AttackConfig
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.y.shape[0])

    @property
    def perturbations(self) -> np.ndarray:
        return self.x - self.clean

    def as_dataset(self) -> Dataset:
        return Dataset(self.x, self.y)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensorio.save(directory / "inputs.mrpt", self.x, precision=64)
        tensorio.save(directory / "labels.mrpt", self.y.astype(np.float64), precision=64)
        tensorio.save(directory / "perturbations.mrpt", self.perturbations, precision=64)
        tensorio.save(directory / "clean.mrpt", self.clean, precision=64)
        manifest = {
            "method": self.method,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "size": len(self),
            "tensors": {
                "inputs": "inputs.mrpt",
                "labels": "labels.mrpt",
                "perturbations": "perturbations.mrpt",
                "clean": "clean.mrpt",
            },
            "meta": self.meta,
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, directory) -> "AdversarialSet":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        t = m["tensors"]
        return cls(
            x=tensorio.load(directory / t["inputs"]),
            y=tensorio.load(directory / t["labels"]).astype(np.int64),
            clean=tensorio.load(directory / t["clean"]),
            method=m["method"],
            config=AttackConfig.from_dict(m["config"]),
            seed=m["seed"],
            meta=m.get("meta", {}),
        )


def generate_adversarial_set(
    net: Network,
    dataset: Dataset,
    method: str,
    cfg: AttackConfig,
    seed: int = 0,
    batch_size: int = 256,
) -> AdversarialSet:
    """Attack every example of ``dataset`` in order (AE = AT(D))."""
    if len(dataset) == 0:
        raise AttackError("cannot attack an empty dataset")
    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        rng = np.random.default_rng([seed, start])
        chunks.append(attack(net, dataset.x[sl], dataset.y[sl], method, cfg, rng))
    return AdversarialSet(np.concatenate(chunks), dataset.y.copy(), dataset.x.copy(), method, cfg, seed)


def accuracy(net: Network, x, y) -> float:
    return float(np.mean(forward(net, x).argmax(axis=-1) == np.asarray(y)))
