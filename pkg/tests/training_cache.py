"""Train-once cache for the expensive acceptance experiments.

Models are keyed by a hash of the complete experiment configuration, so a
changed default retrains automatically.  The wall-clock training time is
stored with the model because the learnability budget is checked against it.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import torch

from timealign.config import ExperimentConfig
from timealign.synth import generate
from timealign.train import History, build_model, load_checkpoint, model_config_for, save_checkpoint, train

CACHE = Path(os.environ.get("TIMEALIGN_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))

_datasets = {}


def dataset_for(cfg: ExperimentConfig):
    key = json.dumps(vars(cfg.gen), sort_keys=True)
    if key not in _datasets:
        _datasets[key] = generate(cfg.gen)
    return _datasets[key]


def config_key(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def trained(cfg: ExperimentConfig, tag: str):
    """Return ``(model, history, train_seconds, from_cache)``."""
    torch.set_num_threads(1)
    cfg = cfg.copy()
    cfg.train.checkpoint_dir = None
    path = CACHE / f"{tag}-{config_key(cfg)}.pt"
    meta_path = path.with_suffix(".json")
    if path.exists() and meta_path.exists():
        state = load_checkpoint(path)
        meta = json.loads(meta_path.read_text())
        return state["model"], History.from_json(state["history"]), meta["train_seconds"], True
    ds = dataset_for(cfg)
    model = build_model(model_config_for(cfg, ds), seed=cfg.train.seed)
    t0 = time.perf_counter()
    model, history = train(model, ds.split("train"), cfg)
    seconds = time.perf_counter() - t0
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, cfg, epoch=cfg.train.epochs, history=history)
    meta_path.write_text(json.dumps({"tag": tag, "train_seconds": seconds, "config": cfg.to_dict()}, indent=1))
    return model, history, seconds, False
