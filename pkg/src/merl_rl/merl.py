"""Auxiliary targets and losses: variance explained (VE) and next state (FS).

V^ex of an episode segment is ``1 - SS_res / SS_tot`` between the returns
and the rollout-time values. It is computed once per rollout and broadcast
to every timestep of its segment, so the VE head stays a per-state map.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import kernels

VEX_DENOM_TOL = 1e-8
COSINE_EPS = 1e-8


@dataclass(frozen=True)
class EpisodeSegment:
    start: int
    end: int  # inclusive
    bootstrapped: bool  # cut by time limit or horizon, not by a terminal state

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True, eq=False)
class MerlTargets:
    vex_per_timestep: np.ndarray
    vex_valid_mask: np.ndarray
    next_obs: np.ndarray
    fs_valid_mask: np.ndarray
    segment_vex: np.ndarray
    segment_valid: np.ndarray

    @cached_property
    def unit_next_obs(self) -> np.ndarray:
        """Next observations over their eps-guarded norms; fixed for the whole rollout."""
        return _unit_targets(self.next_obs, COSINE_EPS)

    def stats(self) -> dict:
        """Per-rollout V^ex summary for the metrics stream."""
        valid = self.segment_vex[self.segment_valid]
        n = len(self.segment_valid)
        return {
            "vex_mean": float(valid.mean()) if valid.size else None,
            "vex_min": float(valid.min()) if valid.size else None,
            "vex_max": float(valid.max()) if valid.size else None,
            "vex_segments": n,
            "vex_masked_fraction": float(1.0 - valid.size / n) if n else 1.0,
        }


def compute_vex(returns, values, tol: float = VEX_DENOM_TOL) -> Optional[float]:
    """Fraction of return variance explained by ``values``.

    Returns ``None`` when undefined: fewer than two samples, or returns whose
    spread ``sum((R - mean R)^2)`` is below ``tol``.
    """
    r = np.asarray(returns, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"returns {r.shape} and values {v.shape} must be equal-length vectors")
    if r.size < 2:
        return None
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    if ss_tot < tol:
        return None
    return 1.0 - float(np.sum((r - v) ** 2)) / ss_tot


def episode_ends(terminals, truncated, horizon: int) -> np.ndarray:
    """Where a segment stops: terminal, truncation, or an actor's horizon edge."""
    ends = np.asarray(terminals, dtype=bool) | np.asarray(truncated, dtype=bool)
    ends = ends.copy()
    ends[horizon - 1::horizon] = True
    return ends


def segment_rollout(batch) -> list[EpisodeSegment]:
    """Split a rollout into contiguous single-episode ranges covering ``[0, N)``."""
    ends = episode_ends(batch.terminals, batch.truncated, batch.horizon)
    segments = []
    start = 0
    for t in np.flatnonzero(ends):
        segments.append(EpisodeSegment(start, int(t), not bool(batch.terminals[t])))
        start = int(t) + 1
    return segments


def build_merl_targets(batch, segments: list[EpisodeSegment], tol: float = VEX_DENOM_TOL) -> MerlTargets:
    starts = np.array([s.start for s in segments], dtype=np.int64)
    stops = np.array([s.end for s in segments], dtype=np.int64)
    seg_vex, seg_valid = kernels.segment_vex(batch.returns, batch.values, starts, stops, tol)
    lengths = stops - starts + 1
    vex_t = np.repeat(seg_vex, lengths)
    valid_t = np.repeat(seg_valid, lengths)
    return MerlTargets(
        vex_per_timestep=vex_t,
        vex_valid_mask=valid_t,
        next_obs=batch.next_observations,
        fs_valid_mask=~np.asarray(batch.terminals, dtype=bool),
        segment_vex=seg_vex,
        segment_valid=seg_valid,
    )


def ve_loss_and_grad(ve_preds, targets: MerlTargets, idx) -> tuple[float, np.ndarray]:
    """Masked mean squared error and its gradient w.r.t. ``ve_preds``.

    ``ve_preds[j]`` is the prediction for timestep ``idx[j]``.
    """
    pred = np.asarray(ve_preds, dtype=np.float64)
    mask = targets.vex_valid_mask[idx]
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(mask, pred - targets.vex_per_timestep[idx], 0.0)
    return float(np.dot(diff, diff)) / n, (2.0 / n) * diff


def ve_loss(ve_preds, targets: MerlTargets, idx) -> float:
    return ve_loss_and_grad(ve_preds, targets, idx)[0]


def _unit_targets(next_obs, eps: float) -> np.ndarray:
    s = np.asarray(next_obs, dtype=np.float64)
    return s / (np.sqrt(np.einsum("ij,ij->i", s, s)) + eps)[:, None]


def fs_loss_and_grad(fs_preds, targets: MerlTargets, idx, eps: float = COSINE_EPS) -> tuple[float, np.ndarray]:
    """Masked mean cosine distance to the next observation, and its gradient.

    Each norm carries an additive ``eps`` so zero vectors are safe.
    """
    p = np.asarray(fs_preds, dtype=np.float64)
    mask = targets.fs_valid_mask[idx]
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0, np.zeros_like(p)
    unit = targets.unit_next_obs if eps == COSINE_EPS else _unit_targets(targets.next_obs, eps)
    s_hat = unit[idx]
    p_norm = np.sqrt(np.einsum("ij,ij->i", p, p))
    a = p_norm + eps
    cos = np.einsum("ij,ij->i", p, s_hat) / a
    w = mask / n
    # d(1 - cos)/dp = -s_hat/a + cos * p / (a |p|)
    along = np.divide(cos, a * p_norm, out=np.zeros_like(a), where=p_norm > 0)
    g = (along * w)[:, None] * p - (w / a)[:, None] * s_hat
    return float(np.dot(1.0 - cos, w)), g


def fs_loss(fs_preds, targets: MerlTargets, idx, eps: float = COSINE_EPS) -> float:
    return fs_loss_and_grad(fs_preds, targets, idx, eps)[0]
