"""Shared test utilities: finite differences and brute-force oracles."""

import itertools
from types import SimpleNamespace

import numpy as np
import torch

from timealign.timeline import interval_iou


def fd_check_params(model, closure, n_coords=100, eps=1e-6, seed=0):
    """Compare autograd against central differences on random parameter coordinates.

    Returns a list of ``(name, index, analytic, numeric, rel_err)``.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    closure().backward()
    grads = {n: p.grad.detach().clone() for n, p in params}
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            i = int(flat - offsets[k])
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = closure().item()
            view[i] = orig - eps
            down = closure().item()
            view[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].view(-1)[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            out.append((name, i, analytic, numeric, rel))
    return out


def brute_force_assignment(cost):
    """Minimum total cost over injective maps from columns (gt) to rows (queries)."""
    cost = np.asarray(cost)
    n_q, n_gt = cost.shape
    best = np.inf
    if n_gt <= n_q:
        for rows in itertools.permutations(range(n_q), n_gt):
            best = min(best, sum(cost[r, g] for g, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(n_gt), n_q):
            best = min(best, sum(cost[q, c] for q, c in enumerate(cols)))
    return best


def reference_ap(preds, gts, label, thr):
    """Direct AP: greedy TP flags, then sum of recall steps times max precision to the right."""
    flat = sorted(((d.score, d.segment.start, vid, d.segment.end) for vid, ds in preds.items() for d in ds.items
                   if d.label == label), key=lambda r: (-r[0], r[1], r[2]))
    gt = {vid: [(a.start, a.end) for a in insts if a.label == label] for vid, insts in gts.items()}
    n_gt = sum(map(len, gt.values()))
    if n_gt == 0:
        return None
    taken = set()
    flags = []
    for _, s, vid, e in flat:
        best, best_iou = None, -1.0
        for j, (gs, ge) in enumerate(gt.get(vid, [])):
            iou = interval_iou(s, e, gs, ge)
            if (vid, j) not in taken and iou >= thr and iou > best_iou:
                best, best_iou = j, iou
        # a higher-IoU gt that is already taken blocks nothing; match the best free one
        if best is not None:
            taken.add((vid, best))
        flags.append(best is not None)
    ap, prev_recall, tp = 0.0, 0.0, 0
    prec, rec = [], []
    for i, f in enumerate(flags):
        tp += f
        prec.append(tp / (i + 1))
        rec.append(tp / n_gt)
    for i in range(len(flags)):
        if rec[i] > prev_recall:
            ap += (rec[i] - prev_recall) * max(prec[i:])
            prev_recall = rec[i]
    return ap


def fake_encoder(scores, times=None, levels=None, snippet=1.0):
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    times = np.arange(n) + 0.5 if times is None else np.asarray(times, dtype=np.float64)
    levels = np.ones(n, dtype=int) if levels is None else np.asarray(levels)
    return SimpleNamespace(scores=scores, levels=levels, t_index=np.arange(n), position_times=times,
                           proposal_centers=times.copy(), proposal_widths=np.ones(n), snippet_sec=snippet)


def pyramid_encoder(T1, levels, rng, ties=False):
    lv, ti, times = [], [], []
    n = T1
    for l in range(1, levels + 1):
        t = np.arange(n)
        lv.append(np.full(n, l))
        ti.append(t)
        times.append((t + 0.5) * 2 ** (l - 1))
        n = -(-n // 2)
    total = sum(len(t) for t in ti)
    scores = rng.integers(0, 4, total) / 4 if ties else rng.random(total)
    enc = fake_encoder(scores, np.concatenate(times), np.concatenate(lv))
    enc.t_index = np.concatenate(ti)
    return enc
