"""Command-line front end.

Every subcommand reads a flat JSON config (``--config``) and works inside a run
directory (``--run``, else the config's ``run_dir`` key, else ``runs/<config
name>``).  Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline as pl
from .attacks import generate_adversarial_set
from .data import Split, make_synthetic_dataset, read_csv
from .mrs import MrsReport, compute_mrs
from .network import flops_reduction, load_checkpoint, save_checkpoint
from .pruning import Allocation, allocate_ratios, plan_pruning
from .runstore import load_run, persist_partial, persist_run

COMMANDS = ("train", "attack-eval", "mrs", "allocate", "prune", "finetune", "mrpf", "report")

# Keys understood by the CLI on top of the RunConfig fields.
CLI_KEYS = ("preset", "run_dir", "train_csv", "test_csv", "sweep_ratios")
PRESETS = {"toy": pl.TOY_PRESET, "default": {}}
DEFAULT_SWEEP = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class ConfigFileError(ValueError):
    pass


class CommandError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrpf", description="Module robust pruning and fine-tuning on synthetic benchmarks.")
    p.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--run", help="run directory (default: config run_dir or runs/<config name>)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--variant", choices=("inv_mrs", "deviation"))
    p.add_argument("--loss", choices=("trades", "mart", "pgd_at"))
    p.add_argument("--criterion", choices=("magnitude", "taylor"))
    return p


def load_config(path, overrides: dict | None = None) -> tuple[pl.RunConfig, dict]:
    """Parse a config file into a RunConfig and the CLI-only extras."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigFileError(f"cannot read {path}: {e}") from e
        except ValueError as e:
            raise ConfigFileError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
    extras = {k: raw.pop(k) for k in CLI_KEYS if k in raw}
    preset = extras.get("preset", "default")
    if preset not in PRESETS:
        raise ConfigFileError(f"unknown preset {preset!r}")
    merged = {**PRESETS[preset], **raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    try:
        return pl.RunConfig.from_dict(merged), extras
    except (pl.ConfigError, ValueError, TypeError) as e:
        raise ConfigFileError(str(e)) from e


def load_data(cfg: pl.RunConfig, extras: dict) -> Split:
    if "train_csv" in extras:
        shape = cfg.dataset_spec().input_shape
        test = extras.get("test_csv", extras["train_csv"])
        return Split(read_csv(extras["train_csv"], shape), read_csv(test, shape))
    return make_synthetic_dataset(cfg.dataset_spec())


def _run_dir(args, extras) -> Path:
    if args.run:
        return Path(args.run)
    if "run_dir" in extras:
        return Path(extras["run_dir"])
    stem = Path(args.config).stem if args.config else "default"
    return Path("runs") / stem


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


def _checkpoint(run: Path, *names):
    for name in names:
        path = run / "checkpoints" / f"{name}.json"
        if path.exists():
            return name, load_checkpoint(path)
    raise CommandError("load", f"{run}: no checkpoint among {', '.join(names)}; run the earlier stages first")


def _dense(run: Path, cfg, split):
    path = run / "checkpoints" / "dense.json"
    if path.exists():
        return load_checkpoint(path)
    return cmd_train(run, cfg, split)


# --- subcommands -------------------------------------------------------------------


def cmd_train(run, cfg, split):
    net, history = pl.train_dense(pl.build_network(cfg), split.train, cfg, split.test)
    save_checkpoint(net, run / "checkpoints", "dense")
    _write_json(run / "train.json", {"history": history})
    return net


def cmd_attack_eval(run, cfg, split):
    name, net = _checkpoint(run, "final", "pruned", "dense", "original")
    pgd_cfg, fgsm_cfg = cfg.eval_configs()
    m = pl.evaluate_metrics(net, split.test, pgd_cfg, fgsm_cfg, seed=cfg.seed)
    _write_json(run / "attack_eval.json", {"checkpoint": name, "metrics": m.to_dict()})
    return m


def mrs_for(net, cfg, split) -> MrsReport:
    ae = generate_adversarial_set(net, split.train, cfg.ae_method, cfg.ae_config(), seed=cfg.seed)
    return compute_mrs(net, ae, cfg.mrs_config())


def cmd_mrs(run, cfg, split):
    report = mrs_for(_dense(run, cfg, split), cfg, split)
    _write_json(run / "mrs.json", report.to_dict())
    return report


def _report(run, cfg, split) -> MrsReport:
    path = run / "mrs.json"
    if path.exists():
        return MrsReport.from_dict(json.loads(path.read_text()))
    return cmd_mrs(run, cfg, split)


def cmd_allocate(run, cfg, split):
    alloc = allocate_ratios(_report(run, cfg, split), cfg.ratio_config())
    _write_json(
        run / "allocation.json",
        {"ratios": {str(k): v for k, v in alloc.ratios.items()}, "variant": alloc.variant,
         "achieved_mean": alloc.achieved_mean, "ratio_config": asdict(cfg.ratio_config())},
    )
    return alloc


def cmd_prune(run, cfg, split):
    net = _dense(run, cfg, split)
    report = _report(run, cfg, split)
    path = run / "allocation.json"
    if path.exists():
        d = json.loads(path.read_text())
        alloc = Allocation({int(k): v for k, v in d["ratios"].items()}, d["variant"], d["achieved_mean"])
    else:
        alloc = cmd_allocate(run, cfg, split)
    scores = pl.importance(net, cfg, split.train)
    plan = plan_pruning(scores, alloc, net, {"mrs_digest": report.digest(), "ratio_config": asdict(cfg.ratio_config())})
    pruned = plan.apply(net)
    _write_json(run / "plan.json", plan.to_dict())
    save_checkpoint(pruned, run / "checkpoints", "pruned")
    return plan, pruned


def cmd_finetune(run, cfg, split):
    _, pruned = _checkpoint(run, "pruned")
    final, history = pl.finetune(pruned, split.train, cfg, split.test)
    save_checkpoint(final, run / "checkpoints", "final")
    _write_json(run / "finetune.json", {"history": history})
    return final


def cmd_mrpf(run, cfg, split):
    dense = _dense(run, cfg, split)
    try:
        _, record = pl.mrpf_run(dense, split.train, cfg, split.test)
    except pl.StageError as e:
        persist_partial(e.partial, e.stage, e.cause, run)
        raise
    persist_run(record, run)
    return record


def sparsity_sweep(record, cfg, split, ratios=DEFAULT_SWEEP) -> list[dict]:
    """Re-prune the stored original network at several r_g (no fine-tuning),
    plus the run's own fine-tuned result."""
    net = record.checkpoints["original"]
    pgd_cfg, fgsm_cfg = cfg.eval_configs()
    scores = pl.importance(net, cfg, split.train)
    rows = []
    for r in ratios:
        rc = pl.with_overrides(cfg, r_g=float(r), r_min=min(cfg.r_min, float(r)))
        alloc = allocate_ratios(record.mrs, rc.ratio_config())
        pruned = plan_pruning(scores, alloc, net).apply(net)
        m = pl.evaluate_metrics(pruned, split.test, pgd_cfg, fgsm_cfg, seed=cfg.seed)
        rows.append({"r_g": float(r), "achieved_ratio": alloc.achieved_mean,
                     "parameters": pruned.num_parameters(), "flops_reduction": flops_reduction(net, pruned),
                     "finetuned": 0, **m.to_dict()})
    final = record.checkpoints["final"]
    m = record.metrics.get("final") or pl.evaluate_metrics(final, split.test, pgd_cfg, fgsm_cfg, seed=cfg.seed).to_dict()
    rows.append({"r_g": record.config["r_g"], "achieved_ratio": record.allocation_mean,
                 "parameters": final.num_parameters(), "flops_reduction": record.flops_reduction,
                 "finetuned": 1, **m})
    return rows


def cmd_report(run, cfg, split, extras=None):
    record = load_run(run)
    record.mrs.write_csv(run / "mrs_table.csv")
    rows = sparsity_sweep(record, cfg, split, (extras or {}).get("sweep_ratios", DEFAULT_SWEEP))
    with open(run / "sparsity_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


HANDLERS = {
    "train": cmd_train,
    "attack-eval": cmd_attack_eval,
    "mrs": cmd_mrs,
    "allocate": cmd_allocate,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "mrpf": cmd_mrpf,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg, extras = load_config(
            args.config,
            {"seed": args.seed, "variant": args.variant, "loss": args.loss, "criterion": args.criterion},
        )
        split = load_data(cfg, extras)
    except (ConfigFileError, OSError, ValueError) as e:
        print(f"mrpf: config error: {e}", file=sys.stderr)
        return 2
    run = _run_dir(args, extras)
    run.mkdir(parents=True, exist_ok=True)
    stage = args.command
    try:
        if args.command == "report":
            cmd_report(run, cfg, split, extras)
        else:
            HANDLERS[args.command](run, cfg, split)
    except pl.StageError as e:
        print(f"mrpf: stage {e.stage} failed: {e.cause}", file=sys.stderr)
        return 3
    except CommandError as e:
        print(f"mrpf: stage {e.stage} failed: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # any other runtime failure is reported against the subcommand
        print(f"mrpf: stage {stage} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    print(f"mrpf: {args.command} finished; outputs in {run}")
    return 0


def main(argv=None) -> None:
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
