# dafar/report.py
# Static plots from a run directory: one PNG per curve CSV, the training loss
# curves, and a gallery of reconstructions for a saved adversarial set.

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from dafar.artifacts import CURVE_FIELDS, load_adversarial_set, read_manifest
from dafar.attacks import AdversarialSet
from dafar.models import DefendedModel


matplotlib.use("Agg")
logger = logging.getLogger(__name__)

CATEGORICAL_KINDS = {"detection_vs_method", "feature_interference_table", "fpr_report"}
GALLERY_COLUMNS = 8


def render_report(run_dir: Path, model: Optional[DefendedModel] = None) -> List[Path]:
    """Render every plot the run's outputs support; returns the written files."""
    manifest = read_manifest(run_dir)
    plots_dir = run_dir / "plots"
    plots_dir.mkdir(exist_ok=True)
    written: List[Path] = []

    for rel in manifest.outputs:
        path = run_dir / rel
        if path.suffix != ".csv" or not path.is_file():
            continue
        df = pd.read_csv(path)
        if list(df.columns) == CURVE_FIELDS:
            written.append(plot_curve(df, path, plots_dir))
        elif "joint_loss" in df.columns:
            written.append(plot_loss_log(df, plots_dir / f"{path.stem}.png"))

    adv_rel = manifest.extras.get("adversarial_set")
    if model is not None and adv_rel:
        adv = load_adversarial_set(run_dir / adv_rel)
        written.append(render_gallery(model, adv, plots_dir / "gallery.png"))

    for p in written:
        logger.info("wrote %s", p)
    return written


def plot_curve(df: pd.DataFrame, csv_path: Path, plots_dir: Path) -> Path:
    kind = str(df["kind"].iloc[0])
    axis_name = str(df["axis_name"].iloc[0])
    table = df.pivot(index="axis_value", columns="series", values="value")
    extras_path = csv_path.with_suffix(".json")
    extras = json.loads(extras_path.read_text(encoding="utf-8")) if extras_path.is_file() else {}

    fig, ax = plt.subplots(figsize=(7, 4.5))
    if kind in CATEGORICAL_KINDS:
        table.plot.bar(ax=ax, rot=0)
    else:
        table = table.sort_index()
        for series in table.columns:
            style = "-" if kind == "score_distribution" else "-o"
            ax.plot(table.index.astype(float), table[series], style, label=series)
        ax.legend()
    if kind == "score_distribution":
        alpha = extras.get("alpha")
        if alpha is not None and np.isfinite(alpha):
            ax.axvline(alpha, color="black", linestyle="--", label=f"α = {alpha:.3f}")
            ax.legend()
        ax.set_ylabel("density")
    elif kind == "feature_interference_table":
        ax.set_ylabel("‖E(x) − E(x')‖₂")
    else:
        ax.set_ylabel("accuracy / rate")
        ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel(axis_name)
    title = kind if not extras.get("method") else f"{kind} ({extras['method']})"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()

    out = plots_dir / f"{csv_path.stem}.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_loss_log(df: pd.DataFrame, out: Path) -> Path:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for column in ("joint_loss", "ce_term", "recon_term"):
        ax_loss.plot(df["epoch"], df[column], "-o", label=column)
    ax_loss.set_xlabel("epoch")
    ax_loss.legend()
    ax_acc.plot(df["epoch"], df["clean_accuracy"], "-o")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("clean accuracy")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _to_image(pixels: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W[, C]) in [0, 1]."""
    arr = ((pixels.detach().cpu().float() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))


def render_gallery(model: DefendedModel, adv: AdversarialSet, out: Path, columns: int = GALLERY_COLUMNS) -> Path:
    """
    Rows: clean, D(E(clean)), error, adversarial, D(E(adversarial)), error.
    Errors are drawn around mid-gray.
    """
    n = min(columns, len(adv))
    clean = adv.originals.pixels[:n]
    attacked = adv.adversarials.pixels[:n]
    with torch.no_grad():
        clean_rec = model.reconstruct(clean)
        adv_rec = model.reconstruct(attacked)
    rows = [
        ("clean", clean),
        ("reconstruction", clean_rec),
        ("error", (clean - clean_rec) / 2.0),
        (adv.adversarials.provenance, attacked),
        ("reconstruction", adv_rec),
        ("error", (attacked - adv_rec) / 2.0),
    ]

    fig, axes = plt.subplots(len(rows), max(n, 1), figsize=(1.4 * max(n, 1), 1.5 * len(rows)), squeeze=False)
    for r, (label, images) in enumerate(rows):
        for c in range(max(n, 1)):
            ax = axes[r][c]
            ax.axis("off")
            if c < n:
                img = _to_image(images[c])
                ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0.0, vmax=1.0)
        axes[r][0].set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
