"""MRPF orchestration: adversarial examples, MRS, ratio allocation, pruning and
adversarial fine-tuning, plus the optimiser, LR schedules and metrics."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .attacks import METHODS, AttackConfig, attack, generate_adversarial_set
from .data import Dataset, DatasetSpec
from .losses import LOSS_METHODS, LossConfig, loss_and_grads
from .mrs import MrsConfig, MrsReport, baseline_adv_loss, compute_mrs
from .network import Network, flops_reduction, forward, mlp
from .pruning import (
    CRITERIA,
    PruningPlan,
    RatioConfig,
    allocate_ratios,
    magnitude_importance,
    plan_pruning,
    taylor_importance,
)

SCHEDULES = ("cosine", "step", "constant")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``partial`` holds what finished."""

    def __init__(self, stage: str, cause: BaseException, partial: dict | None = None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial or {}


# --- optimiser and schedules -------------------------------------------------------


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: Mapping[str, np.ndarray] | None,
    lr: float,
    momentum: float = 0.9,
) -> tuple[dict, dict]:
    """v <- momentum * v + g; w <- w - lr * v.  Parameters without a gradient are untouched."""
    state = dict(state or {})
    out = dict(params)
    for name, g in grads.items():
        w = params[name]
        if np.shape(g) != np.shape(w):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(w)}")
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        out[name] = w - lr * v
    return out, state


def lr_schedule(kind: str, epoch: int, total_epochs: int, lr0: float, lr_floor: float = 0.0) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if kind == "step":
        return lr0 * 0.1 ** (epoch // 10)
    if kind == "cosine":
        return lr_floor + 0.5 * (lr0 - lr_floor) * (1 + math.cos(math.pi * epoch / total_epochs))
    if kind == "constant":
        return lr0
    raise ValueError(f"unknown schedule {kind!r}")


# --- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; every field is one key of the JSON config file.

    Attack keys: ``epsilon`` with step ``alpha`` (default epsilon/4) drives the
    training attack (``attack_iterations`` steps) and the PGD evaluation
    (``eval_iterations`` steps).  ``ae_method`` generates AE for MRS and AE'
    for fine-tuning augmentation.
    """

    seed: int = 0
    # data and architecture
    dataset: str = "rings"
    classes: int = 2
    n_train: int = 2000
    n_test: int = 500
    dims: int = 2
    image_size: int = 8
    noise: float = 0.05
    data_seed: int = 0
    arch: str = "mlp"
    hidden: tuple = (64, 64)
    kernel: int = 3
    # optimisation
    batch_size: int = 256
    epochs: int = 90
    train_epochs: int = 90
    lr: float = 0.02
    lr_floor: float = 1e-4
    schedule: str = "cosine"
    momentum: float = 0.9
    loss: str = "trades"
    loss_weight: float = 6.0
    train_loss: str = "trades"
    r_at: float = 0.2
    # attacks
    epsilon: float = 8 / 255
    alpha: float | None = None
    attack_iterations: int = 10
    eval_iterations: int = 20
    ae_method: str = "fgsm"
    # MRS
    mrs_eta: float = 0.01
    mrs_epochs: int = 1
    mrs_epsilon: float = 8 / 255
    mrs_batch_size: int = 256
    delta: float = 1e-6
    # allocation and pruning
    r_g: float = 0.5
    r_min: float = 0.1
    r_max: float = 0.8
    variant: str = "deviation"
    criterion: str = "magnitude"
    magnitude_p: float = 2.0
    taylor_adversarial: bool = False
    # evaluation
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.r_at <= 1.0:
            raise ConfigError("r_at must lie in [0, 1]")
        if self.epochs < 0 or self.train_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for key in ("loss", "train_loss"):
            if getattr(self, key) not in LOSS_METHODS:
                raise ConfigError(f"unknown loss method {getattr(self, key)!r}")
        if self.ae_method not in METHODS:
            raise ConfigError(f"unknown attack {self.ae_method!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.arch not in ("mlp", "cnn"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be nonnegative")
        try:
            self.mrs_config()
            self.ratio_config()
            self.attack_config()
            self.dataset_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / 4 if self.epsilon > 0 else 1.0

    def attack_config(self, iterations: int | None = None) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            alpha=self.step_size(),
            iterations=self.attack_iterations if iterations is None else iterations,
        )

    def ae_config(self) -> AttackConfig:
        if self.ae_method == "fgsm":
            return AttackConfig.preset("fgsm", self.epsilon)
        return self.attack_config()

    def eval_configs(self) -> tuple[AttackConfig, AttackConfig]:
        return self.attack_config(self.eval_iterations), AttackConfig.preset("fgsm", self.epsilon)

    def loss_config(self, method: str | None = None) -> LossConfig:
        return LossConfig(method=method or self.loss, weight=self.loss_weight, inner=self.attack_config())

    def mrs_config(self) -> MrsConfig:
        return MrsConfig(
            eta=self.mrs_eta,
            epochs=self.mrs_epochs,
            epsilon=self.mrs_epsilon,
            delta=self.delta,
            batch_size=self.mrs_batch_size,
            seed=self.seed,
        )

    def ratio_config(self) -> RatioConfig:
        return RatioConfig(r_g=self.r_g, r_min=self.r_min, r_max=self.r_max, delta=self.delta, variant=self.variant)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self.dataset,
            classes=self.classes,
            n_train=self.n_train,
            n_test=self.n_test,
            dims=self.dims,
            image_size=self.image_size,
            noise=self.noise,
            seed=self.data_seed,
        )

    def layer_specs(self):
        from .network import conv2d, dense, relu

        spec = self.dataset_spec()
        if self.arch == "mlp":
            return mlp([int(np.prod(spec.input_shape)), *self.hidden, self.classes]), spec.input_shape
        c, h, w = spec.input_shape
        layers, prev = [], c
        for width in self.hidden[:-1]:
            layers += [conv2d(prev, width, self.kernel), relu()]
            prev = width
        layers += [dense(prev * h * w, self.hidden[-1]), relu(), dense(self.hidden[-1], self.classes)]
        return layers, spec.input_shape


TOY_PRESET = dict(
    epochs=30,
    train_epochs=60,
    lr=0.1,
    lr_floor=1e-3,
    epsilon=0.1,
    mrs_epsilon=0.1,
    eval_iterations=20,
    r_g=0.5,
    noise=0.03,
)


def toy_config(**overrides) -> RunConfig:
    """Desk-scale settings for the rings MLP benchmark."""
    return RunConfig(**{**TOY_PRESET, **overrides})


# --- metrics -----------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    sacc: float
    adv_pgd: float
    adv_fgsm: float

    def to_dict(self) -> dict:
        return asdict(self)


def _correct(net, x, y) -> np.ndarray:
    return forward(net, x).argmax(axis=-1) == y


def evaluate_metrics(
    net: Network,
    testset: Dataset,
    pgd_cfg: AttackConfig,
    fgsm_cfg: AttackConfig | None = None,
    seed: int = 0,
    batch_size: int = 512,
) -> Metrics:
    """Clean accuracy and accuracy under PGD and FGSM."""
    if len(testset) == 0:
        raise ValueError("test set is empty")
    fgsm_cfg = fgsm_cfg or AttackConfig.preset("fgsm", pgd_cfg.epsilon)
    hits = np.zeros(3)
    for start in range(0, len(testset), batch_size):
        x = testset.x[start : start + batch_size]
        y = testset.y[start : start + batch_size]
        rng = np.random.default_rng([seed, start])
        hits[0] += _correct(net, x, y).sum()
        hits[1] += _correct(net, attack(net, x, y, "pgd", pgd_cfg, rng), y).sum()
        hits[2] += _correct(net, attack(net, x, y, "fgsm", fgsm_cfg, rng), y).sum()
    n = len(testset)
    return Metrics(*(float(h / n) for h in hits))


# --- fine-tuning -------------------------------------------------------------------


def augment(net: Network, data: Dataset, cfg: RunConfig, epoch: int) -> Dataset:
    """D' = D plus adversarial versions of a uniform floor(r_at * |D|) subset."""
    n = math.floor(cfg.r_at * len(data))
    if n == 0:
        return data
    rng = np.random.default_rng([cfg.seed, 11, epoch])
    idx = np.sort(rng.choice(len(data), size=n, replace=False))
    ae = generate_adversarial_set(net, data.subset(idx), cfg.ae_method, cfg.ae_config(), seed=cfg.seed * 1000 + epoch)
    return data.concat(ae.as_dataset())


def finetune(
    net: Network,
    data: Dataset,
    cfg: RunConfig,
    testset: Dataset | None = None,
    epochs: int | None = None,
    loss: str | None = None,
    augment_data: bool = True,
) -> tuple[Network, list[dict]]:
    """Train on the augmented set with SGD + momentum; returns the network and per-epoch history.

    Each history row holds the mean training loss and, every ``cfg.eval_every``
    epochs when a test set is given, SAcc / Adv_PGD / Adv_FGSM.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    epochs = cfg.epochs if epochs is None else epochs
    lcfg = cfg.loss_config(loss)
    pgd_cfg, fgsm_cfg = cfg.eval_configs()
    params, state = net.params(), None
    history = []
    for epoch in range(epochs):
        train = augment(net, data, cfg, epoch) if augment_data else data
        lr = lr_schedule(cfg.schedule, epoch, epochs, cfg.lr, cfg.lr_floor)
        order_rng = np.random.default_rng([cfg.seed, 17, epoch])
        total, count = 0.0, 0
        for b, (xb, yb) in enumerate(train.batches(cfg.batch_size, order_rng)):
            rng = np.random.default_rng([cfg.seed, 23, epoch, b])
            value, grads = loss_and_grads(net, xb, yb, lcfg, rng)
            params, state = sgd_momentum_step(params, grads, state, lr, cfg.momentum)
            net = net.with_params(params)
            total += value * len(yb)
            count += len(yb)
        row = {"epoch": epoch, "lr": lr, "loss": total / count, "size": len(train)}
        last = epoch == epochs - 1
        if testset is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            row.update(evaluate_metrics(net, testset, pgd_cfg, fgsm_cfg, seed=cfg.seed).to_dict())
        history.append(row)
    return net, history


def build_network(cfg: RunConfig) -> Network:
    from .network import build

    specs, shape = cfg.layer_specs()
    return build(specs, seed=cfg.seed, input_shape=shape)


def train_dense(net: Network, data: Dataset, cfg: RunConfig, testset: Dataset | None = None):
    """Adversarially train the unpruned model (no augmentation)."""
    return finetune(net, data, cfg, testset, epochs=cfg.train_epochs, loss=cfg.train_loss, augment_data=False)


# --- the full pipeline -------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    history: list[dict]
    mrs: MrsReport | None
    plan: PruningPlan | None
    flops_reduction: float | None
    seeds: dict
    baseline_loss: float | None = None
    allocation_mean: float | None = None
    metrics: dict = field(default_factory=dict)
    checkpoints: dict[str, Network] = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict, compare=False)

    @property
    def final_metrics(self) -> dict:
        return self.metrics.get("final", {})


def importance(net: Network, cfg: RunConfig, data: Dataset, ae=None):
    if cfg.criterion == "magnitude":
        return magnitude_importance(net, cfg.magnitude_p)
    src = ae.as_dataset() if (cfg.taylor_adversarial and ae is not None) else data
    return taylor_importance(net, src.x, src.y)


def mrpf_run(
    net: Network,
    data: Dataset,
    cfg: RunConfig,
    testset: Dataset | None = None,
) -> tuple[Network, RunRecord]:
    """Generate AE, score layers by MRS, allocate ratios, prune, fine-tune."""
    if not net.prunable_layers:
        raise ValueError("network has no prunable layer")
    partial: dict = {"config": cfg.to_dict(), "checkpoints": {"original": net}}
    clock: dict = {}

    def stage(name, fn):
        t = time.perf_counter()
        try:
            out = fn()
        except Exception as e:
            raise StageError(name, e, partial) from e
        clock[name] = time.perf_counter() - t
        partial[name] = out
        return out

    ae = stage("ae", lambda: generate_adversarial_set(net, data, cfg.ae_method, cfg.ae_config(), seed=cfg.seed))
    base = stage("baseline", lambda: baseline_adv_loss(net, ae))
    report = stage("mrs", lambda: compute_mrs(net, ae, cfg.mrs_config()))
    alloc = stage("allocate", lambda: allocate_ratios(report, cfg.ratio_config()))

    def prune():
        scores = importance(net, cfg, data, ae)
        prov = {"mrs_digest": report.digest(), "ratio_config": asdict(cfg.ratio_config())}
        plan = plan_pruning(scores, alloc, net, prov)
        return plan, plan.apply(net)

    plan, pruned = stage("prune", prune)
    partial["checkpoints"]["pruned"] = pruned
    final, history = stage("finetune", lambda: finetune(pruned, data, cfg, testset))

    metrics = {}
    if testset is not None:
        pgd_cfg, fgsm_cfg = cfg.eval_configs()
        metrics = stage(
            "evaluate",
            lambda: {
                name: evaluate_metrics(m, testset, pgd_cfg, fgsm_cfg, seed=cfg.seed).to_dict()
                for name, m in (("original", net), ("pruned", pruned), ("final", final))
            },
        )
    record = RunRecord(
        config=cfg.to_dict(),
        history=history,
        mrs=report,
        plan=plan,
        flops_reduction=flops_reduction(net, pruned),
        seeds={"run": cfg.seed, "data": cfg.data_seed, "mrs": cfg.mrs_config().seed},
        baseline_loss=base,
        allocation_mean=alloc.achieved_mean,
        metrics=metrics,
        checkpoints={"original": net, "pruned": pruned, "final": final},
        wall_clock=clock,
    )
    return final, record


def prune_like(net: Network, plan: PruningPlan) -> Network:
    """Apply an existing plan (for baselines pruned identically to an MRPF run)."""
    return plan.apply(net)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
