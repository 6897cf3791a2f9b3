# dafar/artifacts.py
# On-disk formats: run directories, manifests, curve/log/outcome CSVs,
# calibration records, adversarial-set containers.
#
# CONTRACT:
# - Create timestamped run directories, one per run.
# - Manifests are JSON with a format_version field and are written once.
# - Every write goes through a temp file + os.replace, so readers never see
#   a half-written file.
# - CSV schemas carry a schema_version column and fixed headers.

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from dafar.attacks import AdversarialSet
from dafar.config import AttackConfig
from dafar.data import ImageBatch
from dafar.detection import ThresholdCalibration
from dafar.harness import CurveResult
from dafar.pipeline import DefenseOutcome
from dafar.training import DetectorEpochLog, EpochLog


MANIFEST_FORMAT_VERSION = 1
CURVE_SCHEMA_VERSION = 1
ADVERSARIAL_FORMAT_VERSION = 1

CURVE_FIELDS = ["schema_version", "kind", "axis_name", "axis_value", "series", "value", "count"]
LOSS_FIELDS = ["epoch", "joint_loss", "ce_term", "recon_term", "clean_accuracy"]
DETECTOR_LOSS_FIELDS = ["epoch", "detector_loss"]
OUTCOME_FIELDS = ["sample_id", "verdict", "score", "label", "mode"]


# ----------------------------
# Atomic writes
# ----------------------------

def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())
    return path


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------
# Run directory + manifest
# ----------------------------

def create_run_directory(base_path: Path, now: Optional[datetime] = None) -> Path:
    """
    Create a fresh timestamped run directory.

    Format: runs/YYYY-MM-DD_HHMMSS/ (suffixed _1, _2, ... if taken).
    """
    stamp = (now or datetime.now()).strftime("%Y-%m-%d_%H%M%S")
    base_path.mkdir(parents=True, exist_ok=True)
    candidate = base_path / stamp
    suffix = 0
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            suffix += 1
            candidate = base_path / f"{stamp}_{suffix}"


@dataclass
class RunManifest:
    run_id: str
    command: str
    dataset: str
    seed: int
    config: Dict[str, Any]
    dataset_hashes: Dict[str, str] = field(default_factory=dict)
    checkpoint_hashes: Dict[str, str] = field(default_factory=dict)
    calibration: Optional[Dict[str, Any]] = None
    outputs: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    format_version: int = MANIFEST_FORMAT_VERSION

    def add_output(self, run_dir: Path, path: Path) -> None:
        rel = str(path.relative_to(run_dir))
        if rel not in self.outputs:
            self.outputs.append(rel)


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = run_dir / "manifest.json"
    if path.exists():
        raise FileExistsError(f"manifest already written: {path}")
    atomic_write_text(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: Path) -> RunManifest:
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    if raw.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported manifest format_version {raw.get('format_version')!r}")
    return RunManifest(**raw)


# ----------------------------
# Curve CSV
# ----------------------------

def curve_filename(result: CurveResult) -> str:
    method = result.extras.get("method")
    scorer = result.extras.get("scorer_suffix")
    parts = [result.kind] + ([str(method)] if method else []) + ([str(scorer)] if scorer else [])
    return "_".join(parts) + ".csv"


def write_curve_csv(run_dir: Path, result: CurveResult) -> Path:
    """
    Long format, one row per (axis value, series):
    schema_version, kind, axis_name, axis_value, series, value, count
    """
    rows: List[Dict[str, Any]] = []
    for i, axis_value in enumerate(result.axis):
        for series in sorted(result.series):
            rows.append({
                "schema_version": CURVE_SCHEMA_VERSION,
                "kind": result.kind,
                "axis_name": result.axis_name,
                "axis_value": axis_value,
                "series": series,
                "value": result.series[series][i],
                "count": result.counts[series][i],
            })
    return _write_csv(run_dir / curve_filename(result), CURVE_FIELDS, rows)


def read_curve_csv(path: Path) -> CurveResult:
    with path.open("r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: empty curve file")
    if int(rows[0]["schema_version"]) != CURVE_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {rows[0]['schema_version']}")

    axis: List[Any] = []
    for row in rows:
        value = _parse_axis(row["axis_value"])
        if value not in axis:
            axis.append(value)
    names = sorted({row["series"] for row in rows})
    series = {name: [float("nan")] * len(axis) for name in names}
    counts = {name: [0] * len(axis) for name in names}
    for row in rows:
        i = axis.index(_parse_axis(row["axis_value"]))
        series[row["series"]][i] = float(row["value"])
        counts[row["series"]][i] = int(row["count"])
    return CurveResult(
        kind=rows[0]["kind"],
        axis_name=rows[0]["axis_name"],
        axis=tuple(axis),
        series={k: tuple(v) for k, v in series.items()},
        counts={k: tuple(v) for k, v in counts.items()},
    )


def _parse_axis(raw: str) -> Any:
    try:
        return float(raw)
    except ValueError:
        return raw


def write_extras(run_dir: Path, result: CurveResult) -> Path:
    """Scalars that do not fit the long schema (α, means, normality, ratios) as JSON."""
    path = run_dir / curve_filename(result).replace(".csv", ".json")
    atomic_write_text(path, json.dumps(result.extras, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ----------------------------
# Training logs
# ----------------------------

def write_loss_log(path: Path, log: Sequence[EpochLog]) -> Path:
    rows = [{k: getattr(e, k) for k in LOSS_FIELDS} for e in log]
    return _write_csv(path, LOSS_FIELDS, rows)


def write_detector_log(path: Path, log: Sequence[DetectorEpochLog]) -> Path:
    rows = [{k: getattr(e, k) for k in DETECTOR_LOSS_FIELDS} for e in log]
    return _write_csv(path, DETECTOR_LOSS_FIELDS, rows)


# ----------------------------
# Outcomes
# ----------------------------

def write_outcomes_csv(path: Path, outcomes: Sequence[DefenseOutcome], mode: str) -> Path:
    rows = [
        {
            "sample_id": i,
            "verdict": o.verdict,
            "score": o.anomaly_score,
            "label": "" if o.label is None else o.label,
            "mode": mode,
        }
        for i, o in enumerate(outcomes)
    ]
    return _write_csv(path, OUTCOME_FIELDS, rows)


# ----------------------------
# Calibration
# ----------------------------

def save_calibration(path: Path, cal: ThresholdCalibration) -> Path:
    atomic_write_text(path, json.dumps(cal.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_calibration(path: Path) -> ThresholdCalibration:
    if not path.is_file():
        raise FileNotFoundError(f"calibration record not found: {path}; run calibrate first")
    return ThresholdCalibration.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ----------------------------
# Adversarial sets
# ----------------------------

def save_adversarial_set(path: Path, adv: AdversarialSet) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    targets = adv.targets.cpu().numpy() if adv.targets is not None else np.empty(0, dtype=np.int64)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".npz", dir=path.parent)
    os.close(fd)
    try:
        np.savez(
            tmp,
            format_version=np.array(ADVERSARIAL_FORMAT_VERSION),
            originals=adv.originals.pixels.cpu().numpy(),
            adversarials=adv.adversarials.pixels.cpu().numpy(),
            labels=adv.originals.labels.cpu().numpy(),
            success=adv.success_mask.cpu().numpy(),
            targets=targets,
            has_targets=np.array(adv.targets is not None),
            provenance=np.array(adv.adversarials.provenance),
            config=np.array(json.dumps(adv.config.to_dict(), sort_keys=True)),
        )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_adversarial_set(path: Path) -> AdversarialSet:
    if not path.is_file():
        raise FileNotFoundError(f"adversarial set not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if int(data["format_version"]) != ADVERSARIAL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported adversarial-set format_version {int(data['format_version'])}")
        labels = torch.from_numpy(data["labels"].astype(np.int64))
        originals = ImageBatch(torch.from_numpy(data["originals"]), labels)
        adversarials = ImageBatch(torch.from_numpy(data["adversarials"]), labels.clone(), str(data["provenance"]))
        targets = torch.from_numpy(data["targets"].astype(np.int64)) if bool(data["has_targets"]) else None
        return AdversarialSet(
            originals=originals,
            adversarials=adversarials,
            config=AttackConfig.from_dict(json.loads(str(data["config"]))),
            success_mask=torch.from_numpy(data["success"].astype(bool)),
            targets=targets,
        )
