"""Two-stage temporal deformable detector with time-aligned refinement.

Pipeline per video: projection + pyramid -> deformable encoder -> per
position foreground score and offsets -> query selection -> decoder layers
that each refine the query segments and emit class logits.

Two coordinate expressions are supported through ``ModelConfig.expression``:
``time_aligned`` (segments in seconds, offsets scaled by the width) and
``normalized`` (logit-space refinement in ``[0, 1]`` times the duration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from . import coords
from .attention import MLP, DecoderLayer, EncoderLayer, sine_embedding
from .config import ModelConfig
from .coords import ReferenceGrid, make_reference_grid, time_to_index
from .pyramid import FeaturePyramidNet, PyramidConfig
from .query_select import QuerySet, plan_sectors, select_adaptive, select_fixed_topk
from .timeline import Detection, DetectionSet, FeatureSequence, Segment, VideoMeta, clip_to_video

NORM_EPS = 1e-4
PRIOR_PROB = 0.01


@dataclass(eq=False)
class EncoderOutput:
    memory: List[torch.Tensor]
    fg_logits: torch.Tensor  # (N,)
    offsets: torch.Tensor  # (N, 2): d_center, d_logwidth
    levels: np.ndarray
    t_index: np.ndarray
    position_times: np.ndarray
    proposal_centers: torch.Tensor
    proposal_widths: torch.Tensor
    snippet_sec: float
    duration: float
    attn_weights: Optional[List[torch.Tensor]] = None

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.fg_logits)

    def __len__(self):
        return len(self.fg_logits)


@dataclass(eq=False)
class DecoderState:
    query_embeddings: torch.Tensor
    centers: List[torch.Tensor]  # layer 0..L_D, seconds
    widths: List[torch.Tensor]  # half-widths, seconds
    class_logits: List[torch.Tensor]  # layer 1..L_D
    last_prev: tuple = ()  # coordinates fed to the final refinement (mode-specific)
    last_offsets: Optional[torch.Tensor] = None

    @property
    def num_layers(self) -> int:
        return len(self.class_logits)


@dataclass(eq=False)
class ModelOutput:
    meta: VideoMeta
    encoder: EncoderOutput
    queries: QuerySet
    decoder: DecoderState


class TemporalDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D, L = cfg.dim, cfg.num_levels
        self.pyramid = FeaturePyramidNet(cfg.in_channels, PyramidConfig(D, L, cfg.kernel_size))
        self.level_embed = nn.Parameter(torch.zeros(L, D))
        nn.init.normal_(self.level_embed, std=0.02)
        self.encoder = nn.ModuleList(
            EncoderLayer(D, cfg.ffn_dim, cfg.heads, L, cfg.points, self_attn=not cfg.ablate_enc_self)
            for _ in range(cfg.enc_layers)
        )
        # proposal heads shared across levels
        self.enc_score = nn.Linear(D, 1)
        self.enc_offset = MLP(D, D, 2, num_layers=2, zero_last=True)
        self.query_pos = MLP(2 * D, D, D, num_layers=2)
        self.query_content = nn.Sequential(nn.Linear(D, D), nn.LayerNorm(D))
        self.decoder = nn.ModuleList(
            DecoderLayer(D, cfg.ffn_dim, cfg.heads, L, cfg.points,
                         self_attn=not cfg.ablate_dec_self, cross_attn=not cfg.ablate_dec_cross)
            for _ in range(cfg.dec_layers)
        )
        self.class_heads = nn.ModuleList(nn.Linear(D, cfg.num_classes) for _ in range(cfg.dec_layers))
        self.offset_heads = nn.ModuleList(
            MLP(D, D, 2, num_layers=2, zero_last=True) for _ in range(cfg.dec_layers)
        )
        prior_bias = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        nn.init.constant_(self.enc_score.bias, prior_bias)
        for head in self.class_heads:
            nn.init.constant_(head.bias, prior_bias)

    @property
    def normalized(self) -> bool:
        return self.cfg.expression == "normalized"

    # -- geometry -----------------------------------------------------------------

    def reference_grids(self, meta: VideoMeta) -> List[ReferenceGrid]:
        L = self.cfg.num_levels
        return [
            make_reference_grid(meta, l, self.cfg.base_scale, self.cfg.grid_mode, num_levels=L)
            for l in range(1, L + 1)
        ]

    def _positions(self, meta: VideoMeta, lengths: List[int]):
        levels, t_index, times = [], [], []
        for l, n in enumerate(lengths, start=1):
            t = np.arange(n)
            levels.append(np.full(n, l))
            t_index.append(t)
            times.append((t + 0.5) * meta.snippet_sec * 2 ** (l - 1))
        return np.concatenate(levels), np.concatenate(t_index), np.concatenate(times)

    def query_position_embedding(self, centers, widths, meta: VideoMeta) -> torch.Tensor:
        D = self.cfg.dim
        if self.normalized:
            dur = meta.duration_sec
            emb = torch.cat([
                sine_embedding(centers / dur, D, scale=2 * math.pi),
                sine_embedding(widths / dur, D, scale=2 * math.pi),
            ], dim=-1)
        else:
            emb = torch.cat([sine_embedding(centers, D), sine_embedding(widths, D)], dim=-1)
        return self.query_pos(emb)

    # -- stages -------------------------------------------------------------------

    def encode(self, x, meta: VideoMeta, return_weights: bool = False) -> EncoderOutput:
        levels = self.pyramid(x)
        return self.encoder_forward(levels, meta, return_weights=return_weights)

    def encoder_forward(self, levels: List[torch.Tensor], meta: VideoMeta, return_weights=False) -> EncoderOutput:
        cfg = self.cfg
        lengths = [z.shape[0] for z in levels]
        lv, ti, times = self._positions(meta, lengths)
        dtype = levels[0].dtype
        pos = torch.cat([
            sine_embedding(torch.arange(n, dtype=dtype), cfg.dim) + self.level_embed[l]
            for l, n in enumerate(lengths)
        ])
        times_t = torch.as_tensor(times, dtype=dtype)
        ref_index = torch.stack(
            [time_to_index(times_t, meta.snippet_sec, l) for l in range(1, cfg.num_levels + 1)], dim=1
        )  # (N, L)

        def locate(raw):
            loc = ref_index[:, None, :, None] + raw
            return [loc[:, :, l] for l in range(cfg.num_levels)]

        src = torch.cat(levels)
        weights = [] if return_weights else None
        for layer in self.encoder:
            if return_weights and layer.self_attn is not None:
                q = src + pos
                _, w = layer.self_attn(q, list(torch.split(src, lengths)), locate, return_weights=True)
                weights.append(w)
            src = layer(src, pos, lengths, locate)

        fg_logits = self.enc_score(src).squeeze(-1)
        offsets = self.enc_offset(src)
        grids = self.reference_grids(meta)
        ref_c = torch.as_tensor(np.concatenate([g.centers for g in grids]), dtype=dtype)
        ref_w = torch.as_tensor(np.concatenate([np.full(len(g), g.width) for g in grids]), dtype=dtype)
        if self.normalized:
            dur = meta.duration_sec
            c0 = (ref_c / dur).clamp(NORM_EPS, 1 - NORM_EPS)
            d0 = (ref_w / dur).clamp(NORM_EPS, 1 - NORM_EPS)
            cn, dn = coords.normalized_update(c0, d0, offsets[:, 0], offsets[:, 1])
            centers, widths = cn * dur, dn * dur
        else:
            centers, widths = coords.time_aligned_update(ref_c, ref_w, offsets[:, 0], offsets[:, 1])
        return EncoderOutput(
            memory=list(torch.split(src, lengths)),
            fg_logits=fg_logits,
            offsets=offsets,
            levels=lv,
            t_index=ti,
            position_times=times,
            proposal_centers=centers,
            proposal_widths=widths,
            snippet_sec=meta.snippet_sec,
            duration=meta.duration_sec,
            attn_weights=weights,
        )

    def select_queries(self, enc: EncoderOutput, meta: VideoMeta) -> QuerySet:
        grids = self.reference_grids(meta)
        if self.cfg.select_mode == "fixed":
            return select_fixed_topk(enc, grids, min(self.cfg.fixed_n, len(enc)))
        plan = plan_sectors(meta.num_features, self.cfg.t_sector)
        return select_adaptive(enc, grids, plan, self.cfg.select_k)

    def decoder_forward(self, enc: EncoderOutput, queries: QuerySet, meta: VideoMeta) -> DecoderState:
        cfg = self.cfg
        dur = meta.duration_sec
        stop = (lambda t: t.detach()) if cfg.detach_refs else (lambda t: t)
        c = stop(queries.centers)
        w = stop(queries.widths)
        if self.normalized:
            cn = (c / dur).clamp(NORM_EPS, 1 - NORM_EPS)
            dn = (w / dur).clamp(NORM_EPS, 1 - NORM_EPS)
            c, w = cn * dur, dn * dur
        centers, widths, logits = [c], [w], []
        tgt = None
        prev, offsets = (), None
        for n, layer in enumerate(self.decoder):
            c_prev, w_prev = stop(centers[-1]), stop(widths[-1])
            query_pos = self.query_position_embedding(c_prev, w_prev, meta)
            if tgt is None and cfg.query_content == "memory":
                idx = torch.as_tensor(queries.index, device=query_pos.device)
                tgt = self.query_content(stop(torch.cat(enc.memory).index_select(0, idx)))
            elif tgt is None:
                tgt = self.query_content(query_pos)

            def locate(raw, c_prev=c_prev, w_prev=w_prev):
                t = c_prev[:, None, None, None] + raw * w_prev[:, None, None, None]
                return [time_to_index(t[:, :, l], meta.snippet_sec, l + 1) for l in range(cfg.num_levels)]

            tgt = layer(tgt, query_pos, enc.memory, locate)
            offsets = self.offset_heads[n](tgt)
            logits.append(self.class_heads[n](tgt))
            if self.normalized:
                prev = ((c_prev / dur).clamp(NORM_EPS, 1 - NORM_EPS), (w_prev / dur).clamp(NORM_EPS, 1 - NORM_EPS))
                cn, dn = coords.normalized_update(prev[0], prev[1], offsets[:, 0], offsets[:, 1])
                c_new, w_new = cn * dur, dn * dur
            else:
                prev = (c_prev, w_prev)
                c_new, w_new = coords.time_aligned_update(c_prev, w_prev, offsets[:, 0], offsets[:, 1])
            centers.append(c_new)
            widths.append(w_new)
        return DecoderState(tgt, centers, widths, logits, last_prev=prev, last_offsets=offsets)

    def forward(self, video: FeatureSequence, queries: Optional[QuerySet] = None) -> ModelOutput:
        dtype = self.level_embed.dtype
        x = torch.as_tensor(video.values, dtype=dtype)
        enc = self.encode(x, video.meta)
        if queries is None:
            queries = self.select_queries(enc, video.meta)
        dec = self.decoder_forward(enc, queries, video.meta)
        return ModelOutput(video.meta, enc, queries, dec)

    # -- inference ----------------------------------------------------------------

    @torch.no_grad()
    def predict(self, video: FeatureSequence, top_n: Optional[int] = None) -> DetectionSet:
        """Final-layer detections, one per query, clipped to the video; no NMS."""
        if video.meta.num_features < 1:
            raise ValueError(f"{video.meta.video_id}: video shorter than one snippet")
        out = self.forward(video)
        dec = out.decoder
        return detections_from_arrays(
            video.meta,
            dec.centers[-1].double().numpy(),
            dec.widths[-1].double().numpy(),
            torch.sigmoid(dec.class_logits[-1]).double().numpy(),
            top_n=top_n,
        )


def detections_from_arrays(meta: VideoMeta, centers, widths, probs, top_n=None) -> DetectionSet:
    """Turn per-query arrays into a clipped DetectionSet (top class per query)."""
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    order = np.lexsort((centers - widths, -scores))
    if top_n is not None:
        order = order[:top_n]
    items = []
    for q in order:
        c, w = float(centers[q]), float(widths[q])
        if not (np.isfinite(c) and np.isfinite(w)) or w <= 0:
            w = max(w, 1e-6) if np.isfinite(w) else 1e-6
            c = float(np.nan_to_num(c))
        seg = clip_to_video(Segment(c, w), meta)
        items.append(Detection(seg, int(labels[q]), float(np.clip(scores[q], 0.0, 1.0))))
    return DetectionSet(meta.video_id, items)
