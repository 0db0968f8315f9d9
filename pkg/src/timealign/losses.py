"""One-to-one matching and the set-prediction loss.

Per decoder layer the queries are matched to ground truth with the
Hungarian algorithm on a cost of focal-style classification, ``1 - DIoU``
and the absolute log-ratio of half-widths; the same three terms are then
applied as losses on the matched pairs.  The encoder proposals receive the
same treatment with a binary foreground target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .timeline import ActionInstance, Segment

LOG_EPS = 1e-8


@dataclass
class MatchResult:
    pairs: List[tuple]  # (query index, gt index)
    unmatched: List[int]

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def gt_to_query(self) -> dict:
        return {int(g): int(q) for q, g in self.pairs}


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    matches: List[MatchResult] = field(default_factory=list)  # per decoder layer
    encoder_match: Optional[MatchResult] = None


def focal_loss(prob: float, is_positive: bool, gamma: float = 2.0, alpha: float = 0.25) -> float:
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {prob}")
    if is_positive:
        return -alpha * (1.0 - prob) ** gamma * math.log(prob)
    return -(1.0 - alpha) * prob ** gamma * math.log(1.0 - prob)


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float, alpha: float) -> torch.Tensor:
    """Elementwise focal loss from logits (numerically stable form)."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def diou_1d(c1, w1, c2, w2):
    """1D distance-IoU between ``(center, half-width)`` intervals (broadcasting)."""
    s1, e1, s2, e2 = c1 - w1, c1 + w1, c2 - w2, c2 + w2
    if isinstance(c1, torch.Tensor):
        inter = (torch.minimum(e1, e2) - torch.maximum(s1, s2)).clamp(min=0)
        enclose = torch.maximum(e1, e2) - torch.minimum(s1, s2)
    else:
        inter = np.maximum(np.minimum(e1, e2) - np.maximum(s1, s2), 0.0)
        enclose = np.maximum(e1, e2) - np.minimum(s1, s2)
    # lengths from the same endpoints as the intersection so identical segments give exactly 1
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union - (c1 - c2) ** 2 / enclose ** 2


def log_width_gap(w_pred, w_gt):
    if isinstance(w_pred, torch.Tensor):
        return (torch.log(w_pred) - torch.log(w_gt)).abs()
    return np.abs(np.log(w_pred) - np.log(w_gt))


def focal_class_cost(probs, gamma: float, alpha: float):
    """Positive minus negative focal cost per class (lower is better)."""
    lib = torch if isinstance(probs, torch.Tensor) else np
    pos = alpha * (1 - probs) ** gamma * (-lib.log(probs + LOG_EPS))
    neg = (1 - alpha) * probs ** gamma * (-lib.log(1 - probs + LOG_EPS))
    return pos - neg


def match_cost(pred: Segment, class_probs: Sequence[float], gt: ActionInstance, w: LossWeights) -> float:
    if not gt.end > gt.start:
        raise ValueError("ground truth has zero length")
    probs = np.asarray(class_probs, dtype=np.float64)
    g = gt.segment
    cls = float(focal_class_cost(probs[gt.label], w.focal_gamma, w.focal_alpha))
    d = float(diou_1d(pred.center, pred.width, g.center, g.width))
    lw = abs(math.log(pred.width) - math.log(g.width))
    return w.w_cls * cls + w.w_diou * (1.0 - d) + w.w_logwidth * lw


def cost_matrix(centers, widths, probs, gt_c, gt_w, gt_labels, w: LossWeights) -> torch.Tensor:
    """``(N_q, N_gt)`` matching costs; inputs are treated as constants."""
    with torch.no_grad():
        cls = focal_class_cost(probs[:, gt_labels], w.focal_gamma, w.focal_alpha)
        diou = diou_1d(centers[:, None], widths[:, None], gt_c[None], gt_w[None])
        lw = log_width_gap(widths[:, None], gt_w[None])
        return w.w_cls * cls + w.w_diou * (1 - diou) + w.w_logwidth * lw


def hungarian_match(cost) -> MatchResult:
    cost = np.asarray(cost.detach().cpu() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    n_q, n_gt = cost.shape
    if n_gt == 0 or n_q == 0:
        return MatchResult([], list(range(n_q)))
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching costs must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    matched = set(rows.tolist())
    return MatchResult(pairs, [q for q in range(n_q) if q not in matched])


def gt_tensors(gt: Sequence[ActionInstance], dtype=torch.float64):
    if len(gt) == 0:
        empty = torch.zeros(0, dtype=dtype)
        return empty, empty, torch.zeros(0, dtype=torch.long)
    starts = torch.tensor([a.start for a in gt], dtype=dtype)
    ends = torch.tensor([a.end for a in gt], dtype=dtype)
    labels = torch.tensor([a.label for a in gt], dtype=torch.long)
    return 0.5 * (starts + ends), 0.5 * (ends - starts), labels


def set_loss(centers, widths, logits, gt_c, gt_w, gt_labels, w: LossWeights, match: Optional[MatchResult] = None):
    """Matched focal + DIoU + log-width loss for one prediction set.

    ``logits`` is ``(N, C)``; pass ``C = 1`` with all-zero labels for the
    binary foreground case.  Returns ``(loss, terms, match)``.
    """
    probs = torch.sigmoid(logits)
    if match is None:
        match = hungarian_match(cost_matrix(centers, widths, probs, gt_c, gt_w, gt_labels, w))
    qi = torch.as_tensor(match.query_indices, dtype=torch.long)
    gi = torch.as_tensor(match.gt_indices, dtype=torch.long)
    n_matched = max(len(match.pairs), 1)
    targets = torch.zeros_like(logits)
    if len(qi):
        targets[qi, gt_labels[gi]] = 1.0
    cls = sigmoid_focal_loss(logits, targets, w.focal_gamma, w.focal_alpha).sum() / n_matched
    if len(qi):
        diou = diou_1d(centers[qi], widths[qi], gt_c[gi], gt_w[gi])
        reg_diou = (1 - diou).mean()
        reg_lw = log_width_gap(widths[qi], gt_w[gi]).mean()
    else:
        reg_diou = reg_lw = logits.sum() * 0.0
    loss = w.w_cls * cls + w.w_diou * reg_diou + w.w_logwidth * reg_lw
    return loss, {"cls": cls, "diou": reg_diou, "logwidth": reg_lw}, match


def total_loss(layers, enc, gt: Sequence[ActionInstance], w: LossWeights) -> LossBreakdown:
    """Sum of per-layer set losses plus the encoder proposal loss.

    ``layers`` is a list of ``(centers, widths, class_logits)`` per decoder
    layer (last = final prediction).  ``enc`` is an EncoderOutput or None.
    """
    if len(layers) < 1:
        raise ValueError("need at least one decoder layer")
    dtype = layers[-1][2].dtype
    gt_c, gt_w, gt_labels = gt_tensors(gt, dtype)
    total = layers[-1][2].sum() * 0.0
    terms = {}
    matches = []
    active = range(len(layers)) if w.aux else [len(layers) - 1]
    for n in active:
        c, wd, logits = layers[n]
        loss, parts, match = set_loss(c, wd, logits, gt_c, gt_w, gt_labels, w)
        total = total + loss
        matches.append(match)
        for k, v in parts.items():
            terms[f"dec{n}_{k}"] = float(v.detach())
    enc_match = None
    if enc is not None:
        logits = enc.fg_logits.unsqueeze(-1)
        labels = torch.zeros_like(gt_labels)
        loss, parts, enc_match = set_loss(
            enc.proposal_centers, enc.proposal_widths, logits, gt_c, gt_w, labels, w
        )
        total = total + loss
        for k, v in parts.items():
            terms[f"enc_{k}"] = float(v.detach())
    terms["total"] = float(total.detach())
    return LossBreakdown(total, terms, matches, enc_match)


def model_loss(output, gt: Sequence[ActionInstance], w: LossWeights) -> LossBreakdown:
    dec = output.decoder
    layers = [(dec.centers[n + 1], dec.widths[n + 1], dec.class_logits[n]) for n in range(dec.num_layers)]
    return total_loss(layers, output.encoder, gt, w)
