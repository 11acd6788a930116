"""Differentiable channel masks driven by continuous remaining ratios.

Channels of a conv layer are ranked by the summed absolute value of
their outgoing weights (rank 1 = most important; ties break toward the
lower channel id).  Given a remaining ratio r in [1/C, 1], the mask over
ranks is

    m(k) = 1 - relu(1 - relu(1 + r*C - k)),   k = 1..C  (1-based rank)

which keeps the top floor(r*C) channels fully on, gives the single
boundary rank the fractional value r*C - floor(r*C), and zeroes the
rest.  The mask is linear in r except where r*C is an integer; at those
kinks the right-sided derivative is used and the event is counted.

Masked-out channels keep their stored weights, so a later re-ranking can
bring them back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _accum, _make


@dataclass
class ChannelRanking:
    """Importance order of one layer's output channels."""

    scores: np.ndarray  # [C] float64, summed |weight| per channel
    order: np.ndarray  # [C] channel ids, most important first
    ranks: np.ndarray  # [C] 1-based rank of each channel id

    @property
    def channels(self) -> int:
        return len(self.scores)


@dataclass
class ChannelMask:
    """A ratio realized as per-channel scale factors."""

    ratio: float
    by_rank: np.ndarray  # [C] float64, indexed by rank-1
    by_channel: np.ndarray  # [C] float64, indexed by channel id
    boundary_value: float  # fractional entry (0 when r*C is an integer)


@dataclass
class MaskDiagnostics:
    """Counters for non-smooth events hit during the search."""

    kink_count: int = 0
    kink_events: list = field(default_factory=list)

    def record_kink(self, layer_id: int, ratio: float, channels: int) -> None:
        self.kink_count += 1
        self.kink_events.append((layer_id, float(ratio), int(channels)))


def rank_channels(weight) -> ChannelRanking:
    """Rank output channels of a conv weight [Cout, Cin, Kh, Kw] by mass."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if w.ndim != 4:
        raise ValueError(f"expected a 4-d conv weight, got shape {w.shape}")
    scores = np.abs(w, dtype=np.float64).sum(axis=(1, 2, 3))
    # stable sort on -scores: equal scores keep ascending channel id
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ChannelRanking(scores=scores, order=order, ranks=ranks)


def _check_ratio(ratio: float, channels: int) -> float:
    if channels < 1:
        raise ValueError(f"channel count must be positive, got {channels}")
    lo = 1.0 / channels
    if not (lo - 1e-12 <= ratio <= 1.0 + 1e-12):
        raise ValueError(f"ratio {ratio} outside [{lo}, 1] for {channels} channels")
    return float(min(max(ratio, lo), 1.0))


def mask_by_rank(ratio: float, channels: int) -> np.ndarray:
    """Evaluate the mask over ranks 1..C in float64.

    The closed form is total: ratios at or below zero give the all-zero
    mask and ratios at or above one give all ones.  The search keeps its
    ratios inside [1/C, 1]; that constraint lives in `build_mask` and
    friends, not here.
    """
    if channels < 1:
        raise ValueError(f"channel count must be positive, got {channels}")
    k = np.arange(1, channels + 1, dtype=np.float64)
    inner = np.maximum(1.0 + float(ratio) * channels - k, 0.0)
    return 1.0 - np.maximum(1.0 - inner, 0.0)


def build_mask(ratio: float, channels: int, ranking: ChannelRanking) -> ChannelMask:
    """Materialize the mask for one layer under its current ranking."""
    if ranking.channels != channels:
        raise ValueError(f"ranking covers {ranking.channels} channels, expected {channels}")
    ratio = _check_ratio(ratio, channels)
    by_rank = mask_by_rank(ratio, channels)
    rc = float(ratio) * channels
    frac = rc - math.floor(rc)
    return ChannelMask(
        ratio=float(ratio),
        by_rank=by_rank,
        by_channel=by_rank[ranking.ranks - 1],
        boundary_value=float(frac),
    )


def mask_grad_wrt_ratio(
    ratio: float,
    channels: int,
    diag: MaskDiagnostics | None = None,
    layer_id: int = -1,
) -> np.ndarray:
    """Derivative of the rank-indexed mask with respect to the ratio.

    Only the boundary rank floor(r*C)+1 moves with r, with slope C.  When
    r*C lands exactly on an integer the mask has a kink; the right-sided
    derivative is used and the event is recorded.  At r = 1 the boundary
    rank falls outside the layer, so the gradient is all zero.
    """
    ratio = _check_ratio(ratio, channels)
    grad = np.zeros(channels, dtype=np.float64)
    rc = ratio * channels
    floor = math.floor(rc)
    if rc == floor and diag is not None:
        diag.record_kink(layer_id, ratio, channels)
    boundary = floor  # 0-based index of rank floor+1
    if boundary < channels:
        grad[boundary] = float(channels)
    return grad


def ratio_mask_tensor(
    ratio: Tensor,
    ranking: ChannelRanking,
    diag: MaskDiagnostics | None = None,
    layer_id: int = -1,
    dtype=None,
) -> Tensor:
    """Build the channel-indexed mask as a graph node over a scalar ratio.

    Backward routes the upstream per-channel gradient through the mask
    derivative, so one backward pass delivers d(loss)/d(ratio).
    """
    if ratio.data.size != 1:
        raise ValueError(f"ratio must be scalar, got shape {ratio.data.shape}")
    c = ranking.channels
    entry = build_mask(float(ratio.data), c, ranking)
    out_dtype = dtype if dtype is not None else ratio.data.dtype
    data = entry.by_channel.astype(out_dtype)
    grad_by_channel = mask_grad_wrt_ratio(float(ratio.data), c, diag, layer_id)[ranking.ranks - 1]

    def back(g):
        if ratio.requires_grad:
            contrib = float(np.dot(np.asarray(g, dtype=np.float64), grad_by_channel))
            _accum(ratio, np.full_like(ratio.data, contrib))

    return _make(data, (ratio,), back)


def kept_count(ratio: float, channels: int) -> int:
    """Discrete kept-channel count for a ratio: round half up, floor of one.

    The boundary channel survives exactly when its fractional mask value
    reaches one half.
    """
    ratio = _check_ratio(ratio, channels)
    return max(1, int(math.floor(ratio * channels + 0.5)))


def apply_mask(features: Tensor, mask) -> Tensor:
    """Scale a [N, C, H, W] feature map by a per-channel mask."""
    from .tensor import channel_scale

    if not isinstance(mask, Tensor):
        mask = Tensor(np.asarray(mask), dtype=features.data.dtype)
    return channel_scale(features, mask)


def active_channels(mask: ChannelMask) -> np.ndarray:
    """Channel ids with a nonzero mask entry, ascending."""
    return np.flatnonzero(mask.by_channel > 0.0)


def refresh_ranking(model, rankings, iteration: int, interval: int):
    """Recompute rankings from current weights every `interval` iterations.

    Returns the incoming dict unchanged between refresh points, so callers
    can detect a refresh by identity.  Iteration 0 always computes.
    """
    if interval < 1:
        raise ValueError(f"ranking interval must be >= 1, got {interval}")
    if rankings is not None and iteration % interval != 0:
        return rankings
    fresh = {}
    for layer in model.layers:
        if layer.prunable:
            fresh[layer.id] = rank_channels(model.params[layer.id]["weight"])
    return fresh
