"""Weighted multivariate dynamic time warping with optional Sakoe-Chiba band.

The local cost between two frames is the weighted Euclidean norm of their
channel difference; the reported distance is the square root of the minimal
cumulative local cost over all monotone warping paths. The length-normalized
score divides by the optimal path length K.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class DegenerateChannelError(ValueError):
    """A channel has zero pooled variance, so inverse-variance weights blow up."""


class BandInfeasibleError(ValueError):
    """No warping path can reach the endpoint within the Sakoe-Chiba band."""


@dataclass(frozen=True)
class DTWConfig:
    """Per-channel weights plus band and normalization settings."""

    weights: np.ndarray
    band_halfwidth: Optional[int] = None  # None = unconstrained
    normalize: bool = True

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and strictly positive")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.band_halfwidth is not None and self.band_halfwidth < 0:
            raise ValueError("band_halfwidth must be non-negative")


@dataclass(frozen=True)
class DTWResult:
    """Optimal alignment: distance, path (0-indexed pairs), and its length."""

    distance: float
    path: tuple
    path_length: int


def pooled_weights(episodes: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse pooled variance per channel over all frames of all episodes."""
    arrays = [np.atleast_2d(np.asarray(ep, dtype=float)) for ep in episodes]
    if not arrays:
        raise ValueError("need at least one episode")
    stacked = np.concatenate(arrays, axis=0)
    if stacked.shape[0] < 2:
        raise ValueError("need at least two frames in total")
    var = stacked.var(axis=0)
    if np.any(var <= 0):
        bad = [int(c) for c in np.nonzero(var <= 0)[0]]
        raise DegenerateChannelError(f"zero pooled variance in channel(s) {bad}")
    return 1.0 / var


def _as_series(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("series must be a non-empty (frames, channels) array")
    return arr


def _local_cost(a: np.ndarray, b: np.ndarray, weights: np.ndarray,
                band: Optional[int]) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt(np.einsum("ijc,c,ijc->ij", diff, weights, diff))
    if band is not None:
        i = np.arange(a.shape[0])[:, None]
        j = np.arange(b.shape[0])[None, :]
        cost = np.where(np.abs(i - j) <= band, cost, np.inf)
    return cost


def _cumulative_cost(local: np.ndarray) -> np.ndarray:
    """Dynamic program over anti-diagonals; steps are (1,0), (0,1), (1,1)."""
    m, n = local.shape
    cum = np.full((m, n), np.inf)
    cum[0, 0] = local[0, 0]
    for k in range(1, m + n - 1):
        i = np.arange(max(0, k - n + 1), min(m - 1, k) + 1)
        j = k - i
        im = np.maximum(i - 1, 0)
        jm = np.maximum(j - 1, 0)
        diag = np.where((i > 0) & (j > 0), cum[im, jm], np.inf)
        up = np.where(i > 0, cum[im, j], np.inf)
        left = np.where(j > 0, cum[i, jm], np.inf)
        cum[i, j] = local[i, j] + np.minimum(diag, np.minimum(up, left))
    return cum


def _backtrack(cum: np.ndarray) -> tuple:
    """Recover one optimal path, preferring diagonal, then vertical, then horizontal."""
    i, j = cum.shape[0] - 1, cum.shape[1] - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            candidates = (cum[i - 1, j - 1], cum[i - 1, j], cum[i, j - 1])
            pick = int(np.argmin(candidates))  # first minimum wins the tie
            if pick == 0:
                i, j = i - 1, j - 1
            elif pick == 1:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return tuple(path)


def dtw_distance(a, b, cfg: DTWConfig) -> DTWResult:
    """Exact banded DTW between two multichannel series.

    The path satisfies the boundary ((0,0) to (m-1,n-1)), monotonicity, and
    continuity conditions; ties break deterministically toward the diagonal.
    """
    a = _as_series(a)
    b = _as_series(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] != cfg.weights.size:
        raise ValueError(f"expected {cfg.weights.size} channels, got {a.shape[1]}")
    band = cfg.band_halfwidth
    if band is not None and abs(a.shape[0] - b.shape[0]) > band:
        raise BandInfeasibleError(
            f"length difference {abs(a.shape[0] - b.shape[0])} exceeds band {band}"
        )
    local = _local_cost(a, b, cfg.weights, band)
    cum = _cumulative_cost(local)
    path = _backtrack(cum)
    return DTWResult(
        distance=float(np.sqrt(cum[-1, -1])),
        path=path,
        path_length=len(path),
    )


def normalized_dtw(a, b, cfg: DTWConfig) -> float:
    """Length-normalized DTW score: distance divided by the optimal path length."""
    result = dtw_distance(a, b, cfg)
    return result.distance / result.path_length
