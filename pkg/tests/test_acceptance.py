"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from mrpf import autodiff as ad
from mrpf import pipeline as pl
from mrpf.attacks import AttackConfig, attack, attack_loss, generate_adversarial_set
from mrpf.data import DatasetSpec, make_synthetic_dataset
from mrpf.mrs import MrsConfig, MrsReport, ascend_layer, compute_mrs
from mrpf.network import build, flops_reduction, forward, mlp
from mrpf.pruning import (
    RatioConfig,
    allocate_ratios_deviation,
    allocate_ratios_invmrs,
    magnitude_importance,
    plan_pruning,
)
from mrpf.runstore import load_run, persist_run

from .helpers import NODE_TYPES, graph_ops, linear_net, max_rel_error, random_graph, small_cnn_specs

SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return report


def test_criterion_1_gradient_correctness(verdict):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, seen = 0.0, set()
    for i in range(100):
        g, b, wrt = random_graph(rng, "cnn" if i % 2 else "mlp")
        seen |= graph_ops(g)
        worst = max(worst, max_rel_error(ad.gradient(g, b, wrt), ad.finite_diff_gradient(g, b, wrt, h=1e-5)))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-4 and NODE_TYPES <= seen and elapsed <= 60
    verdict(1, ok, f"100 graphs, max rel err {worst:.2e} (<= 1e-4), all node types {NODE_TYPES <= seen}, {elapsed:.1f}s")


def test_criterion_2_attack_constraints(verdict):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    bound_viol = range_viol = pgd_fgsm_gap = apgd_deficit = 0.0
    methods = ("fgsm", "pgd", "apgd")
    for i in range(1000):
        d = int(rng.integers(2, 6))
        eps = float(rng.uniform(0.0, 0.3))
        linear = i % 2 == 0
        if linear:
            net = linear_net(rng.normal(size=(2, d)), rng.normal(size=2))
            y = rng.integers(0, 2, size=int(rng.integers(1, 6)))
        else:
            c = int(rng.integers(2, 4))
            net = build(mlp([d, int(rng.integers(2, 8)), c]), seed=int(rng.integers(10_000)))
            y = rng.integers(0, c, size=int(rng.integers(1, 6)))
        x = rng.uniform(size=(len(y), d))
        iters = int(rng.integers(2, 11))
        alpha = max(float(rng.uniform(0.01, 0.2)), eps / iters)
        cfg = AttackConfig(epsilon=eps, alpha=alpha, iterations=iters,
                           random_start=0.0 if linear else float(rng.choice([0.0, 0.05])))
        outs = {}
        for m in methods:
            outs[m] = attack(net, x, y, m, cfg, np.random.default_rng(i))
            bound_viol = max(bound_viol, np.abs(outs[m] - x).max() - eps)
            range_viol = max(range_viol, -outs[m].min(), outs[m].max() - 1.0)
        if linear:
            pgd_loss = attack_loss(net, outs["pgd"], y)
            pgd_fgsm_gap = max(pgd_fgsm_gap, abs(pgd_loss - attack_loss(net, outs["fgsm"], y)))
            apgd_deficit = max(apgd_deficit, pgd_loss - attack_loss(net, outs["apgd"], y))
    elapsed = time.perf_counter() - t
    ok = bound_viol <= 1e-12 and range_viol <= 0 and pgd_fgsm_gap <= 1e-6 and apgd_deficit <= 1e-9 and elapsed <= 60
    verdict(2, ok, f"1000 cases x 3 attacks, max excess over eps {bound_viol:.1e}, range excess {range_viol:.1e}, "
                   f"linear |PGD-FGSM| {pgd_fgsm_gap:.1e}, PGD-APGD {apgd_deficit:.1e}, {elapsed:.1f}s")


def test_criterion_3_mrs_contract(verdict):
    t = time.perf_counter()
    split = make_synthetic_dataset(DatasetSpec(kind="blobs", classes=3, dims=4, n_train=200, n_test=10, noise=0.1))
    net = build(mlp([4, 8, 8, 6, 3]), seed=5)
    ae = generate_adversarial_set(net, split.train, "fgsm", AttackConfig.preset("fgsm", 0.1))
    floor = compute_mrs(net, ae, MrsConfig(epochs=0))
    floor_ok = all(v == 1e-6 for v in floor.values)

    ratio_ok, suite_ok = True, True
    for seed in range(10):
        cfg = MrsConfig(eta=float(10.0 ** (seed % 4 - 2)), epochs=1 + seed % 3, epsilon=0.05 + 0.02 * seed,
                        batch_size=32, seed=seed)
        report = compute_mrs(net, ae, cfg)
        for layer in net.prunable_layers:
            _, ratios = ascend_layer(net, layer, ae, cfg)
            ratio_ok &= all(r <= cfg.epsilon + 1e-12 for r in ratios)
        ratio_ok &= all(e.norm_ratio <= cfg.epsilon + 1e-12 for e in report.entries)
        suite_ok &= report.layers == net.prunable_layers
        suite_ok &= all(e.mrs == max(e.raw, cfg.delta) and e.mrs >= cfg.delta for e in report.entries)
        suite_ok &= MrsReport.from_dict(report.to_dict()) == report
        suite_ok &= compute_mrs(net, ae, cfg).digest() == report.digest()
        suite_ok &= compute_mrs(net, ae, cfg, layers=list(reversed(net.prunable_layers))) == report
    elapsed = time.perf_counter() - t
    ok = floor_ok and ratio_ok and suite_ok and elapsed <= 120
    verdict(3, ok, f"E=0 floor exact {floor_ok}, norm ratios within eps {ratio_ok}, "
                   f"4-layer invariant suite {suite_ok}, {elapsed:.1f}s")


def _deviation_oracle(mrs, r_g, r_min, r_max):
    mu = sum(mrs) / len(mrs)
    dev = [m - mu for m in mrs]
    span = max(abs(d) for d in dev)
    dev = [d / span if span else 0.0 for d in dev]
    p = [min(max(r_g - d * (r_max - r_min), r_min), r_max) for d in dev]
    mean = sum(p) / len(p)
    rescaled = [v * r_g / mean for v in p] if mean > 0 else p
    return [min(max(v, r_min), r_max) for v in rescaled], rescaled


def test_criterion_4_ratio_allocation(verdict):
    hand = allocate_ratios_deviation(MrsReport.from_values([1, 2, 3]), RatioConfig(0.5, 0.1, 0.8)).values
    oracle, _ = _deviation_oracle([1, 2, 3], 0.5, 0.1, 0.8)
    hand_ok = np.allclose(hand, [0.8, 0.5357, 0.1071], atol=1e-4, rtol=0) and np.allclose(hand, oracle, atol=1e-4)

    rng = np.random.default_rng(11)
    bounds_ok = decreasing_ok = True
    mean_err, mean_cases = 0.0, 0
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        mrs = rng.uniform(1e-6, 10.0, size=n).tolist()
        r_min, r_max = sorted(rng.uniform(0, 1, size=2))
        r_g = float(rng.uniform(0, 1))
        cfg = RatioConfig(r_g=r_g, r_min=r_min, r_max=r_max)
        rep = MrsReport.from_values(mrs)
        p = allocate_ratios_deviation(rep, cfg).values
        bounds_ok &= bool(np.all(p >= r_min) and np.all(p <= r_max))
        q = allocate_ratios_invmrs(rep, cfg).values
        bounds_ok &= bool(np.all(q >= 0) and np.all(q <= r_max))
        # inv_mrs before the cap: strictly decreasing in MRS
        pre = allocate_ratios_invmrs(rep, RatioConfig(r_g=r_g, r_min=0.0, r_max=1.0)).values
        order = np.argsort(mrs)
        strict = np.diff(np.asarray(mrs)[order]) > 0
        decreasing_ok &= bool(np.all(np.diff(pre[order])[strict] < 0) or r_g == 0)
        _, rescaled = _deviation_oracle(mrs, r_g, r_min, r_max)
        if all(r_min <= v <= r_max for v in rescaled):
            mean_cases += 1
            mean_err = max(mean_err, abs(p.mean() - r_g))
    ok = hand_ok and bounds_ok and decreasing_ok and mean_err <= 1e-9 and mean_cases > 0
    verdict(4, ok, f"hand case {np.round(hand, 4).tolist()}, inv_mrs strictly decreasing {decreasing_ok}, "
                   f"mean error {mean_err:.1e} over {mean_cases} unclipped cases, bounds over 10000 reports {bounds_ok}")


def _independent_flops(net):
    total = 0
    for i, s in enumerate(net.layers):
        w = net.weights[i]
        if w is None:
            continue
        spatial = int(np.prod(net.shapes[i][1:])) if w.ndim == 4 else 1
        total += w.size * spatial
    return total


def test_criterion_5_surgery_equivalence(verdict):
    rng = np.random.default_rng(5)
    max_logit_diff = 0.0
    counts_ok = True
    flops_err = 0.0
    for case in range(100):
        if case % 4 == 3:
            specs, shape = small_cnn_specs(o=int(rng.integers(2, 6)), hidden=int(rng.integers(2, 7)))
            net = build(specs, seed=case, input_shape=shape)
        else:
            sizes = [3] + [int(rng.integers(2, 10)) for _ in range(int(rng.integers(1, 4)))] + [2]
            net = build(mlp(sizes), seed=case)
        ratios = {l: float(rng.uniform(0, 0.9)) for l in net.prunable_layers}
        plan = plan_pruning(magnitude_importance(net), ratios, net)

        # make the planned channels dead: their bias and every downstream weight reading them are zero
        updates = {}
        for layer, drop in plan.pruned.items():
            if not drop:
                continue
            b = net.biases[layer].copy()
            b[list(drop)] = 0.0
            nxt = net.next_weighted(layer)
            w = updates.get(f"W{nxt}", net.weights[nxt]).copy()
            if w.ndim == 2 and len(net.shapes[layer]) > 1:
                hw = int(np.prod(net.shapes[layer][1:]))
                for j in drop:
                    w[:, j * hw:(j + 1) * hw] = 0.0
            else:
                w[:, list(drop)] = 0.0
            updates[f"b{layer}"], updates[f"W{nxt}"] = b, w
        dead = net.with_params(updates)
        pruned = plan.apply(dead)
        x = rng.uniform(size=(6,) + net.input_shape)
        max_logit_diff = max(max_logit_diff, float(np.abs(forward(pruned, x) - forward(dead, x)).max()))

        for l in net.prunable_layers:
            k = net.channels(l)
            n = min(math.floor(ratios[l] * k), k - 1)
            counts_ok &= plan.counts[l] == n and pruned.channels(l) == k - n
        recorded = flops_reduction(net, pruned)
        flops_err = max(flops_err, abs(recorded - (1 - _independent_flops(pruned) / _independent_flops(net))))
    ok = max_logit_diff <= 1e-12 and counts_ok and flops_err <= 1e-12
    verdict(5, ok, f"100 plans, max logit change {max_logit_diff:.1e}, counts = floor(p*k) {counts_ok}, "
                   f"P' recomputation error {flops_err:.1e}")


@pytest.fixture(scope="module")
def toy_runs():
    """Three seeds of the rings benchmark: dense model, MRPF (magnitude and Taylor), clean-CE baseline."""
    rows = []
    for seed in SEEDS:
        t = time.perf_counter()
        cfg = pl.toy_config(seed=seed, data_seed=seed, eval_every=0)
        split = make_synthetic_dataset(cfg.dataset_spec())
        dense_net, _ = pl.train_dense(pl.build_network(cfg), split.train, cfg)
        pgd_cfg, fgsm_cfg = cfg.eval_configs()
        dense_m = pl.evaluate_metrics(dense_net, split.test, pgd_cfg, fgsm_cfg, seed=seed)
        _, rec = pl.mrpf_run(dense_net, split.train, cfg, split.test)
        baseline, _ = pl.finetune(rec.checkpoints["pruned"], split.train, cfg, loss="ce", augment_data=False)
        base_m = pl.evaluate_metrics(baseline, split.test, pgd_cfg, fgsm_cfg, seed=seed)
        elapsed = time.perf_counter() - t
        _, rec_t = pl.mrpf_run(dense_net, split.train, pl.with_overrides(cfg, criterion="taylor"), split.test)
        rows.append(dict(
            seed=seed,
            dense_sacc=dense_m.sacc,
            mrpf_sacc=rec.metrics["final"]["sacc"],
            mrpf_adv=rec.metrics["final"]["adv_pgd"],
            ce_adv=base_m.adv_pgd,
            taylor_adv=rec_t.metrics["final"]["adv_pgd"],
            seconds=elapsed,
            flops=rec.flops_reduction,
        ))
    return rows


def _median(rows, key):
    return float(np.median([r[key] for r in rows]))


def test_criterion_6_toy_end_to_end(verdict, toy_runs):
    gap = 100 * (_median(toy_runs, "mrpf_adv") - _median(toy_runs, "ce_adv"))
    sacc_drop = 100 * abs(_median(toy_runs, "dense_sacc") - _median(toy_runs, "mrpf_sacc"))
    slowest = max(r["seconds"] for r in toy_runs)
    ok = gap >= 10 and sacc_drop <= 5 and slowest <= 300
    verdict(6, ok, f"median robust acc MRPF {_median(toy_runs, 'mrpf_adv'):.3f} vs clean-CE "
                   f"{_median(toy_runs, 'ce_adv'):.3f} (gap {gap:.1f} pts >= 10), SAcc dense "
                   f"{_median(toy_runs, 'dense_sacc'):.3f} vs MRPF {_median(toy_runs, 'mrpf_sacc'):.3f} "
                   f"(diff {sacc_drop:.1f} pts <= 5), P' {_median(toy_runs, 'flops'):.3f}, slowest seed {slowest:.1f}s")


def test_criterion_7_criterion_insensitivity(verdict, toy_runs):
    diff = 100 * abs(_median(toy_runs, "mrpf_adv") - _median(toy_runs, "taylor_adv"))
    verdict(7, diff <= 3, f"median robust acc magnitude {_median(toy_runs, 'mrpf_adv'):.3f} vs taylor "
                          f"{_median(toy_runs, 'taylor_adv'):.3f} (diff {diff:.1f} pts <= 3)")


def test_criterion_8_determinism_and_persistence(verdict, tmp_path):
    cfg = pl.toy_config(n_train=400, n_test=100, epochs=3, train_epochs=5, eval_every=1)
    split = make_synthetic_dataset(cfg.dataset_spec())
    dense_net, _ = pl.train_dense(pl.build_network(cfg), split.train, cfg)
    fa, a = pl.mrpf_run(dense_net, split.train, cfg, split.test)
    fb, b = pl.mrpf_run(dense_net, split.train, cfg, split.test)
    identical = a == b and fa == fb and all(
        a.checkpoints[k].params()[p].tobytes() == b.checkpoints[k].params()[p].tobytes()
        for k in a.checkpoints for p in a.checkpoints[k].params())
    persist_run(a, tmp_path / "run")
    back = load_run(tmp_path / "run")
    round_trip = back == a and all(
        back.checkpoints[k].params()[p].tobytes() == a.checkpoints[k].params()[p].tobytes()
        for k in a.checkpoints for p in a.checkpoints[k].params())
    verdict(8, identical and round_trip, f"repeat runs bit-identical {identical}, persist/load exact {round_trip}")
