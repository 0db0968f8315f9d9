"""Charts rendered from JSON artifacts written by train / eval / probe-noise.

The input kind is detected from its keys:

* training history (``epochs`` + ``instability_log``): loss curve and IS curve
* noise probe (``probes``): mAP change against noise magnitude
* eval results (``fn_buckets``): false-negative rate by instance length
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keep PNG bytes independent of the matplotlib build
PNG_META = {"Software": None}


class SchemaError(ValueError):
    pass


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def _require(obj: dict, keys, what: str) -> None:
    missing = [k for k in keys if k not in obj]
    if missing:
        raise SchemaError(f"{what}: missing key(s) {missing}")


def is_curve_points(history: dict) -> List[tuple]:
    """``(epoch, IS)`` points; IS for epoch ``i`` compares epochs ``i-1`` and ``i``."""
    _require(history, ["epochs"], "history")
    pts = []
    for rec in history["epochs"]:
        if not isinstance(rec, dict) or "epoch" not in rec:
            raise SchemaError("history: every epoch record needs an 'epoch' field")
        if rec.get("instability") is not None:
            pts.append((int(rec["epoch"]), float(rec["instability"])))
    return pts


def plot_history(history: dict, out_dir) -> List[Path]:
    _require(history, ["epochs"], "history")
    epochs = history["epochs"]
    if len(epochs) < 2:
        raise SchemaError(f"history: need at least 2 epochs for an IS curve, found {len(epochs)}")
    for rec in epochs:
        if "loss" not in rec or "total" not in rec.get("loss", {}):
            raise SchemaError("history: epoch record without loss.total")
    out = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["epoch"] for r in epochs], [r["loss"]["total"] for r in epochs], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    written.append(_save(fig, out / "loss_curve.png"))

    pts = is_curve_points(history)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("instability (IS)")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    written.append(_save(fig, out / "is_curve.png"))
    return written


def plot_noise_probe(payload: dict, path) -> Path:
    _require(payload, ["probes"], "probe file")
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for target in ("center", "width"):
        rows = sorted((p["noise_alpha"], p["delta_map"]) for p in payload["probes"] if p.get("target") == target)
        if rows:
            ax.plot([r[0] for r in rows], [100 * r[1] for r in rows], marker="o", label=target)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xlabel("noise magnitude")
    ax.set_ylabel("change in mAP@AVG (points)")
    ax.set_title(payload.get("expression", ""))
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_fn_buckets(results: dict, path) -> Path:
    _require(results, ["fn_buckets"], "results file")
    rates = results["fn_buckets"].get("rates")
    if not isinstance(rates, dict):
        raise SchemaError("results file: fn_buckets.rates must be a mapping")
    names = list(rates)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(names, [0.0 if rates[n] is None else rates[n] for n in names])
    ax.set_xlabel("instance length")
    ax.set_ylabel("false-negative rate")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_file(path, out_dir) -> List[Path]:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    out = Path(out_dir)
    if "probes" in data:
        return [plot_noise_probe(data, out / "noise_probe.png")]
    if "fn_buckets" in data:
        return [plot_fn_buckets(data, out / "fn_buckets.png")]
    if "epochs" in data:
        return plot_history(data, out)
    raise SchemaError(f"{path}: not a history, probe or results file")
