"""Run directories: a manifest, JSON records and network checkpoints.

Layout::

    manifest.json      format version, completion flag, file index
    record.json        config, history, metrics, seeds, P', timings
    mrs.json           MRS report
    plan.json          pruning plan
    checkpoints/       original / pruned / final networks (JSON + MRPT)
"""

from __future__ import annotations

import json
from pathlib import Path

from .mrs import MrsReport
from .network import CheckpointError, Network, load_checkpoint, save_checkpoint
from .pipeline import RunRecord
from .pruning import PruningPlan
from .tensorio import TensorFormatError

FORMAT_VERSION = 1


class RunFormatError(ValueError):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise RunFormatError(f"{path}: missing") from exc
    except (OSError, ValueError) as exc:
        raise RunFormatError(f"{path}: corrupt JSON ({exc})") from exc


def _write_checkpoints(directory: Path, checkpoints: dict[str, Network]) -> dict[str, str]:
    out = {}
    for name, net in checkpoints.items():
        path = save_checkpoint(net, directory / "checkpoints", name)
        out[name] = str(path.relative_to(directory))
    return out


def persist_run(record: RunRecord, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"record": "record.json"}
    _dump(
        directory / "record.json",
        {
            "config": record.config,
            "history": record.history,
            "flops_reduction": record.flops_reduction,
            "seeds": record.seeds,
            "baseline_loss": record.baseline_loss,
            "allocation_mean": record.allocation_mean,
            "metrics": record.metrics,
            "wall_clock": record.wall_clock,
        },
    )
    if record.mrs is not None:
        _dump(directory / "mrs.json", record.mrs.to_dict())
        files["mrs"] = "mrs.json"
    if record.plan is not None:
        _dump(directory / "plan.json", record.plan.to_dict())
        files["plan"] = "plan.json"
    files["checkpoints"] = _write_checkpoints(directory, record.checkpoints)
    manifest = {"format_version": FORMAT_VERSION, "complete": True, "files": files}
    path = directory / "manifest.json"
    _dump(path, manifest)
    return path


def persist_partial(partial: dict, stage: str, error: BaseException, directory) -> Path:
    """Write whatever a failed run produced, marked incomplete, for diagnosis."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    if "mrs" in partial:
        _dump(directory / "mrs.json", partial["mrs"].to_dict())
        files["mrs"] = "mrs.json"
    if "prune" in partial:
        _dump(directory / "plan.json", partial["prune"][0].to_dict())
        files["plan"] = "plan.json"
    files["checkpoints"] = _write_checkpoints(directory, partial.get("checkpoints", {}))
    _dump(directory / "failure.json", {"stage": stage, "error": str(error), "config": partial.get("config")})
    files["failure"] = "failure.json"
    path = directory / "manifest.json"
    _dump(path, {"format_version": FORMAT_VERSION, "complete": False, "files": files})
    return path


def read_manifest(directory) -> dict:
    directory = Path(directory)
    manifest = _read_json(directory / "manifest.json")
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise RunFormatError(f"{directory / 'manifest.json'}: no format_version field")
    if manifest["format_version"] != FORMAT_VERSION:
        raise RunFormatError(
            f"{directory}: run format version {manifest['format_version']} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    return manifest


def load_checkpoints(directory, manifest: dict) -> dict[str, Network]:
    directory = Path(directory)
    out = {}
    for name, rel in manifest["files"].get("checkpoints", {}).items():
        try:
            out[name] = load_checkpoint(directory / rel)
        except (CheckpointError, TensorFormatError) as exc:
            raise RunFormatError(str(exc)) from exc
    return out


def load_run(directory) -> RunRecord:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if not manifest.get("complete", False):
        raise RunFormatError(f"{directory}: run is incomplete (see failure.json)")
    files = manifest["files"]
    try:
        rec = _read_json(directory / files["record"])
        mrs = MrsReport.from_dict(_read_json(directory / files["mrs"])) if "mrs" in files else None
        plan = PruningPlan.from_dict(_read_json(directory / files["plan"])) if "plan" in files else None
        return RunRecord(
            config=rec["config"],
            history=rec["history"],
            mrs=mrs,
            plan=plan,
            flops_reduction=rec["flops_reduction"],
            seeds=rec["seeds"],
            baseline_loss=rec.get("baseline_loss"),
            allocation_mean=rec.get("allocation_mean"),
            metrics=rec.get("metrics", {}),
            checkpoints=load_checkpoints(directory, manifest),
            wall_clock=rec.get("wall_clock", {}),
        )
    except (KeyError, TypeError) as exc:
        raise RunFormatError(f"{directory}: malformed run record ({exc})") from exc
