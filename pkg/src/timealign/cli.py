"""Command-line entry point.

    timealign generate-data --config gen.cfg --out data/
    timealign train --data data/ --config exp.cfg --out runs/full
    timealign eval --data data/ --checkpoint runs/full/epoch_30.pt [--nms 0.5] [--fixed-topk 40]
    timealign ablate --data data/ --grid grid.cfg --out runs/ablate
    timealign probe-noise --data data/ --checkpoint runs/full/epoch_30.pt --alphas 0.01,0.1,0.3
    timealign plot --history runs/full/history.json --out figs/

Errors print one line ``error[<kind>]: <reason>`` to stderr and exit with
2 (config), 3 (data) or 4 (runtime / numeric).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_flat, load_config, parse_flat, set_key, KEY_MAP
from .synth import DatasetError, Dataset, dataset_summary, generate, load_dataset, save_dataset

logger = logging.getLogger("timealign")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
GRID_EVAL_KEYS = ("nms",)


class DataError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_floats(text: str, what: str) -> list:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{what}: empty list")
    return values


def _load_data(path) -> Dataset:
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise DataError(str(exc)) from None


# -- commands ------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["gen.seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    dataset = generate(cfg.gen)
    save_dataset(dataset, out)
    summary = dataset_summary(dataset)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _train_one(cfg: ExperimentConfig, dataset: Dataset, out: Path):
    from .train import build_model, model_config_for, train, write_history

    train_set, val_set = dataset.split("train"), dataset.split("val")
    if len(train_set) == 0:
        raise DataError("dataset has no training videos")
    cfg.train.checkpoint_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_flat(cfg))
    model = build_model(model_config_for(cfg, dataset), seed=cfg.train.seed)
    model, history = train(model, train_set, cfg, val=val_set if len(val_set) else None)
    write_history(out / "history.json", history)
    return model, history


def cmd_train(args) -> int:
    from .train import TrainingError

    overrides = _overrides(args.set)
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    dataset = _load_data(args.data)
    try:
        _, history = _train_one(cfg, dataset, Path(args.out))
    except TrainingError as exc:
        raise RuntimeError(str(exc)) from None
    last = history.epochs[-1]
    print(json.dumps({"epochs": len(history.epochs), "final_loss": last["loss"]["total"],
                      "final_instability": last.get("instability")}, sort_keys=True))
    return 0


def _load_model(checkpoint, dataset: Dataset):
    from .train import CheckpointError, load_checkpoint

    try:
        state = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    model, cfg = state["model"], state["experiment"]
    if model.cfg.in_channels != dataset.channels:
        raise ConfigError(
            f"checkpoint expects {model.cfg.in_channels} feature channels, dataset has {dataset.channels}"
        )
    if model.cfg.num_classes < dataset.num_classes:
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes, dataset has {dataset.num_classes}")
    return model, cfg


def evaluate_predictions(preds: dict, gts: dict, cfg: ExperimentConfig) -> dict:
    from .metrics import false_negative_buckets, mean_ap

    return {"map": mean_ap(preds, gts, cfg.eval), "fn_buckets": false_negative_buckets(preds, gts, cfg.eval)}


def _summary_text(title: str, result: dict) -> str:
    table = result["map"]
    head = " ".join(f"{t:>6.2f}" for t in table["thresholds"])
    row = " ".join(f"{100 * v:6.2f}" for v in table["map"])
    rates = result["fn_buckets"]["rates"]
    fn = " ".join(f"{k}={'-' if v is None else f'{v:.3f}'}" for k, v in rates.items())
    return f"{title}\nIoU   {head}   avg\nmAP   {row} {100 * table['average']:6.2f}\nFN    {fn}\n"


def cmd_eval(args) -> int:
    from .metrics import nms
    from .train import predict_dataset

    dataset = _load_data(args.data)
    model, cfg = _load_model(args.checkpoint, dataset)
    if args.iou:
        cfg.eval.iou_thresholds = _parse_floats(args.iou, "--iou")
    cfg.eval.validate()
    if args.fixed_topk is not None:
        if args.fixed_topk < 1:
            raise ConfigError("--fixed-topk must be >= 1")
        model.cfg.select_mode, model.cfg.fixed_n = "fixed", args.fixed_topk
    split = dataset.split(args.split) if args.split != "all" else dataset
    if len(split) == 0:
        raise DataError(f"no videos in split {args.split!r}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    preds = predict_dataset(model, split, cfg.eval.top_n_cap)
    gts = split.ground_truth()
    result = evaluate_predictions(preds, gts, cfg)
    result["setting"] = {"nms": None, "fixed_topk": args.fixed_topk, "split": args.split}
    _write_json(out / "results.json", result)
    _write_json(out / "predictions.json", {vid: d.to_records() for vid, d in sorted(preds.items())})
    text = _summary_text("no post-processing", result)
    if args.nms is not None:
        if not 0 < args.nms < 1:
            raise ConfigError("--nms threshold must lie in (0, 1)")
        kept = {vid: nms(d, args.nms) for vid, d in preds.items()}
        with_nms = evaluate_predictions(kept, gts, cfg)
        with_nms["setting"] = {"nms": args.nms, "fixed_topk": args.fixed_topk, "split": args.split}
        with_nms["delta_vs_no_nms"] = with_nms["map"]["average"] - result["map"]["average"]
        _write_json(out / f"results_nms{args.nms:g}.json", with_nms)
        text += _summary_text(f"NMS @ {args.nms:g}", with_nms)
        text += f"delta mAP@AVG (nms - none) = {100 * with_nms['delta_vs_no_nms']:+.2f}\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def parse_grid(text: str) -> list:
    """Grid file: ``key = v1, v2, ...`` per line; returns the list of cells."""
    axes = []
    for key, values in parse_flat(text).items():
        if key not in KEY_MAP and key not in GRID_EVAL_KEYS:
            raise ConfigError(f"grid references unknown config key {key!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid key {key!r} has no values")
        axes.append((key, vals))
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*[v for _, v in axes])]


def cmd_ablate(args) -> int:
    from .metrics import instability_curve, nms
    from .train import predict_dataset

    try:
        grid_text = Path(args.grid).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read grid {args.grid}: {exc}") from None
    cells = parse_grid(grid_text)
    base_overrides = _overrides(args.set)
    if args.epochs is not None:
        base_overrides["train.epochs"] = str(args.epochs)
    dataset = _load_data(args.data)
    out = Path(args.out)
    val = dataset.split("val")
    if len(val) == 0:
        raise DataError("ablation needs a val split")
    trained = {}
    rows = []
    for cell in cells:
        train_keys = {k: v for k, v in cell.items() if k not in GRID_EVAL_KEYS}
        nms_flag = cell.get("nms", "off").lower()
        if nms_flag not in ("on", "off", "true", "false"):
            raise ConfigError(f"grid value nms={nms_flag!r} must be on|off")
        use_nms = nms_flag in ("on", "true")
        cfg = load_config(args.config, {**base_overrides, **train_keys})
        name = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in sorted(train_keys.items())) or "base"
        if name not in trained:
            model, history = _train_one(cfg, dataset, out / name)
            trained[name] = (model, history, predict_dataset(model, val, cfg.eval.top_n_cap))
        model, history, preds = trained[name]
        if use_nms:
            preds = {vid: nms(d, args.nms_thr) for vid, d in preds.items()}
        result = evaluate_predictions(preds, val.ground_truth(), cfg)
        curve = instability_curve(history.is_log)
        rows.append({
            "cell": cell,
            "run": name,
            "map": result["map"],
            "map_avg": result["map"]["average"],
            "final_instability": curve[-1] if curve else None,
            "instability_curve": curve,
        })
    _write_json(out / "ablation.json", {"rows": rows})
    keys = list(cells[0].keys()) if cells else []
    lines = [" | ".join(f"{k:>16}" for k in keys) + " | mAP@AVG |   IS"]
    for r in rows:
        is_txt = "   -" if r["final_instability"] is None else f"{r['final_instability']:.3f}"
        lines.append(" | ".join(f"{r['cell'][k]:>16}" for k in keys) + f" | {100 * r['map_avg']:7.2f} | {is_txt}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_probe(args) -> int:
    from .metrics import collect_final_layer, noise_probe
    from .plots import plot_noise_probe

    alphas = _parse_floats(args.alphas, "--alphas")
    if any(a < 0 for a in alphas):
        raise ConfigError("--alphas must be >= 0")
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    dataset = _load_data(args.data)
    model, cfg = _load_model(args.checkpoint, dataset)
    split = dataset.split(args.split) if args.split != "all" else dataset
    caches = collect_final_layer(model, split.videos)
    gts = split.ground_truth()
    probes = []
    for target in ("center", "width"):
        for alpha in alphas:
            res = noise_probe(model, split.videos, alpha, target, args.trials, args.seed, gts=gts,
                              cfg=cfg.eval, caches=caches)
            probes.append(res)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "probe"
    payload = {"expression": model.cfg.expression, "probes": probes}
    _write_json(out / "probe.json", payload)
    plot_noise_probe(payload, out / "probe.png")
    for p in probes:
        print(f"{p['target']:>6} alpha={p['noise_alpha']:<6g} dmAP@AVG={100 * p['delta_map']:+.2f}")
    return 0


def cmd_plot(args) -> int:
    from .plots import SchemaError, plot_file

    try:
        written = plot_file(args.history, args.out)
    except SchemaError as exc:
        raise DataError(str(exc)) from None
    for path in written:
        print(path)
    return 0


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timealign", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (no post-processing by default)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nms", type=float)
    p.add_argument("--fixed-topk", type=int)
    p.add_argument("--iou")
    p.add_argument("--split", default="val", choices=["train", "val", "all"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a config grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--nms-thr", type=float, default=0.5)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe-noise", help="mAP sensitivity to noise on final predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alphas", default="0.01,0.1,0.3")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="val", choices=["train", "val", "all"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="render charts from a history/probe/results JSON file")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
