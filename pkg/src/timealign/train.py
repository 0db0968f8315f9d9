"""Deterministic training driver and checkpoint I/O.

Every video is processed whole (no windows, no cropping).  A step
accumulates gradients over ``batch_size`` videos of similar length, clips
the global gradient norm and applies AdamW.  Batch order is a pure function
of ``(seed, epoch)`` so runs and resumed runs are reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import ExperimentConfig, LossWeights, ModelConfig, TrainConfig
from .losses import model_loss
from .metrics import InstabilityLog, instability, mean_ap
from .model import TemporalDetector
from .synth import Dataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "timealign-checkpoint"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class History:
    epochs: List[dict] = field(default_factory=list)
    is_log: InstabilityLog = field(default_factory=InstabilityLog)

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "instability_log": self.is_log.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> "History":
        return cls(list(data["epochs"]), InstabilityLog.from_json(data.get("instability_log", [])))

    def losses(self) -> List[float]:
        return [e["loss"]["total"] for e in self.epochs]


def model_config_for(cfg: ExperimentConfig, dataset: Dataset) -> ModelConfig:
    model_cfg = ModelConfig(**vars(cfg.model))
    model_cfg.in_channels = dataset.channels
    model_cfg.num_classes = dataset.num_classes
    return model_cfg


def build_model(model_cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> TemporalDetector:
    torch.manual_seed(seed)
    return TemporalDetector(model_cfg).to(dtype)


def make_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    """Group videos of similar length, then shuffle the groups by (seed, epoch)."""
    order = sorted(range(len(dataset)), key=lambda i: (dataset.videos[i].meta.num_features, dataset.videos[i].video_id))
    groups = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    perm = np.random.default_rng([seed, epoch]).permutation(len(groups))
    return [groups[p] for p in perm]


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)).item()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g.mul_(scale)
    return norm


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_drop_epoch and epoch >= cfg.lr_drop_epoch:
        return cfg.learning_rate * 0.1
    return cfg.learning_rate


def train(
    model: TemporalDetector,
    dataset: Dataset,
    cfg: ExperimentConfig,
    val: Optional[Dataset] = None,
    resume_from: Optional[str | Path] = None,
    stop_after: Optional[int] = None,
):
    """Train in place; returns ``(model, history)``.

    ``stop_after`` ends the run after that many epochs (for resume tests).
    """
    tcfg, lw = cfg.train, cfg.loss
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    optimizer = make_optimizer(model, tcfg)
    history = History()
    start_epoch = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from, model)
        optimizer.load_state_dict(state["optimizer"])
        history = History.from_json(state["history"])
        start_epoch = state["epoch"]
    params = [p for p in model.parameters() if p.requires_grad]
    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    end_epoch = tcfg.epochs if stop_after is None else min(tcfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        for group in optimizer.param_groups:
            group["lr"] = _lr_for_epoch(tcfg, epoch)
        model.train()
        log_epoch = history.is_log.new_epoch()
        sums, count, grad_norms = {}, 0, []
        for batch in make_batches(dataset, tcfg.batch_size, tcfg.seed, epoch):
            optimizer.zero_grad(set_to_none=True)
            for i in batch:
                video = dataset.videos[i]
                out = model(video.features)
                try:
                    breakdown = model_loss(out, video.instances, lw)
                except ValueError as exc:  # non-finite matching costs
                    raise TrainingError(f"{exc} on video {video.video_id} (epoch {epoch + 1})") from None
                if not math.isfinite(breakdown.terms["total"]):
                    raise TrainingError(f"non-finite loss on video {video.video_id} (epoch {epoch + 1})")
                (breakdown.total / len(batch)).backward()
                # a query's identity is the pyramid position it was selected from
                slots = breakdown.matches[-1].gt_to_query()
                log_epoch[video.video_id] = {
                    g: (int(out.queries.index[slots[g]]) if g in slots else None)
                    for g in range(len(video.instances))
                }
                for k, v in breakdown.terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
            grad_norms.append(clip_grad_norm(params, tcfg.grad_clip_norm))
            optimizer.step()
        record = {
            "epoch": epoch + 1,
            "loss": {k: v / count for k, v in sorted(sums.items())},
            "grad_norm_mean": float(np.mean(grad_norms)),
            "lr": _lr_for_epoch(tcfg, epoch),
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if epoch >= 1 and len(history.is_log.epochs) >= 2:
            record["instability"] = instability(history.is_log, len(history.is_log.epochs) - 1)
        if val is not None and tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0:
            record["eval"] = evaluate(model, val, cfg)
        history.epochs.append(record)
        logger.info("epoch %d loss %.4f IS %s (%.1fs)", epoch + 1, record["loss"]["total"],
                    record.get("instability"), record["seconds"])
        if ckpt_dir is not None and ((epoch + 1) % max(tcfg.checkpoint_every, 1) == 0 or epoch + 1 == tcfg.epochs):
            save_checkpoint(ckpt_dir / f"epoch_{epoch + 1}.pt", model, cfg, optimizer, epoch + 1, history)
            write_history(ckpt_dir / "history.json", history)
    model.eval()
    return model, history


def predict_dataset(model: TemporalDetector, dataset: Dataset, top_n: Optional[int] = None) -> dict:
    model.eval()
    return {v.video_id: model.predict(v.features, top_n=top_n) for v in dataset.videos}


def evaluate(model: TemporalDetector, dataset: Dataset, cfg: ExperimentConfig, thresholds=None) -> dict:
    preds = predict_dataset(model, dataset, cfg.eval.top_n_cap)
    return mean_ap(preds, dataset.ground_truth(), cfg.eval, thresholds=thresholds)


def write_history(path: str | Path, history: History) -> None:
    Path(path).write_text(json.dumps(history.to_json(), indent=1, sort_keys=True) + "\n")


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(path, model: TemporalDetector, cfg: ExperimentConfig, optimizer=None, epoch: int = 0,
                    history: Optional[History] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": cfg.to_dict(),
        "model_config": dict(vars(model.cfg)),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "history": history.to_json() if history is not None else None,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a timealign checkpoint")
    return payload


def load_checkpoint(path, model: Optional[TemporalDetector] = None) -> dict:
    """Load parameters into ``model`` (or build one from the stored config).

    Every stored tensor is shape-checked against the model before loading.
    """
    payload = read_checkpoint(path)
    if model is None:
        model = TemporalDetector(ModelConfig(**payload["model_config"]))
        dtype = next(iter(payload["params"].values())).dtype
        model = model.to(dtype)
    own = model.state_dict()
    stored = payload["params"]
    missing = sorted(set(own) - set(stored))
    extra = sorted(set(stored) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, tensor in stored.items():
        if tuple(tensor.shape) != tuple(own[name].shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(tensor.shape)} != model shape {tuple(own[name].shape)}"
            )
    model.load_state_dict(stored)
    model.eval()
    payload["model"] = model
    payload["experiment"] = ExperimentConfig.from_dict(payload["config"])
    return payload
