"""Car-following state discretization, transition matrix, and transition scoring.

The state (relative speed, spacing, follower speed) is discretized into
16 x 32 x 8 = 4,096 bins. The transition matrix counts consecutive-frame bin
transitions over decelerating-to-stop segments, adds 1e-6 to every count
cell, and row-normalizes, which keeps every entry strictly positive.
Scoring marginalizes over Gaussian measurement error per channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .errors import DerivedErrorSet

SMOOTHING = 1e-6
_SUPPORT_THRESHOLD = 1e-12
_ONE_HOT_SIGMA = 1e-12  # below this, a channel error is treated as exactly zero


@dataclass(frozen=True)
class BinSpec:
    """Half-open bin grid over (relative speed, spacing, follower speed)."""

    dv_min: float = -16.0
    dv_max: float = 16.0
    dv_width: float = 2.0
    g_min: float = 0.0
    g_max: float = 32.0
    g_width: float = 1.0
    vf_min: float = 0.0
    vf_max: float = 16.0
    vf_width: float = 2.0

    def __post_init__(self):
        for lo, hi, w in ((self.dv_min, self.dv_max, self.dv_width),
                          (self.g_min, self.g_max, self.g_width),
                          (self.vf_min, self.vf_max, self.vf_width)):
            if w <= 0 or hi <= lo:
                raise ValueError("bin ranges must be non-empty with positive width")
            n = (hi - lo) / w
            if abs(n - round(n)) > 1e-9:
                raise ValueError("bin width must divide the range exactly")

    @property
    def n_dv(self) -> int:
        return int(round((self.dv_max - self.dv_min) / self.dv_width))

    @property
    def n_g(self) -> int:
        return int(round((self.g_max - self.g_min) / self.g_width))

    @property
    def n_vf(self) -> int:
        return int(round((self.vf_max - self.vf_min) / self.vf_width))

    @property
    def n_bins(self) -> int:
        return self.n_dv * self.n_g * self.n_vf

    def edges(self, channel: str) -> np.ndarray:
        lo, hi, n = {
            "dv": (self.dv_min, self.dv_max, self.n_dv),
            "g": (self.g_min, self.g_max, self.n_g),
            "vf": (self.vf_min, self.vf_max, self.n_vf),
        }[channel]
        return lo + (hi - lo) * np.arange(n + 1) / n

    def to_dict(self) -> dict:
        return {
            "dv": [self.dv_min, self.dv_max, self.dv_width],
            "g": [self.g_min, self.g_max, self.g_width],
            "vf": [self.vf_min, self.vf_max, self.vf_width],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BinSpec":
        return cls(
            dv_min=doc["dv"][0], dv_max=doc["dv"][1], dv_width=doc["dv"][2],
            g_min=doc["g"][0], g_max=doc["g"][1], g_width=doc["g"][2],
            vf_min=doc["vf"][0], vf_max=doc["vf"][1], vf_width=doc["vf"][2],
        )


def _channel_index(values: np.ndarray, lo: float, width: float, n: int) -> np.ndarray:
    clipped = np.clip(values, lo, lo + n * width)
    idx = np.floor((clipped - lo) / width).astype(int)
    return np.minimum(idx, n - 1)


def bin_indices(states, spec: BinSpec = BinSpec()) -> np.ndarray:
    """Vectorized bin index for (n, 3) states ordered (dv, g, vf).

    Out-of-range components clamp into the edge bins; the combined index is
    dv-major, then g, then vf.
    """
    arr = np.atleast_2d(np.asarray(states, dtype=float))
    if arr.shape[1] != 3:
        raise ValueError("states must have three components (dv, g, vf)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("state components must be finite")
    i_dv = _channel_index(arr[:, 0], spec.dv_min, spec.dv_width, spec.n_dv)
    i_g = _channel_index(arr[:, 1], spec.g_min, spec.g_width, spec.n_g)
    i_vf = _channel_index(arr[:, 2], spec.vf_min, spec.vf_width, spec.n_vf)
    return i_dv * (spec.n_g * spec.n_vf) + i_g * spec.n_vf + i_vf


def bin_index(state, spec: BinSpec = BinSpec()) -> int:
    """Bin index of a single (dv, g, vf) state."""
    return int(bin_indices(np.asarray(state, dtype=float)[None, :], spec)[0])


def clamped_fraction(states, spec: BinSpec = BinSpec()) -> float:
    """Fraction of frames with any component outside the bin ranges."""
    arr = np.atleast_2d(np.asarray(states, dtype=float))
    out = (
        (arr[:, 0] < spec.dv_min) | (arr[:, 0] > spec.dv_max)
        | (arr[:, 1] < spec.g_min) | (arr[:, 1] > spec.g_max)
        | (arr[:, 2] < spec.vf_min) | (arr[:, 2] > spec.vf_max)
    )
    return float(out.mean()) if arr.shape[0] else 0.0


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic 4,096 x 4,096 transition model, stored as sparse counts.

    Probabilities are evaluated lazily: P[i, j] = (count[i, j] + 1e-6) /
    (row_total[i] + n_bins * 1e-6), so every row sums to one and every entry
    is strictly positive without materializing the dense matrix.
    """

    counts: sp.csr_matrix
    binspec: BinSpec
    n_transitions: int

    @cached_property
    def row_totals(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).reshape(-1)

    @cached_property
    def _row_denominators(self) -> np.ndarray:
        return self.row_totals + self.binspec.n_bins * SMOOTHING

    def prob(self, i: int, j: int) -> float:
        return (self.counts[i, j] + SMOOTHING) / self._row_denominators[i]

    def row_probs(self, i: int) -> np.ndarray:
        row = np.asarray(self.counts.getrow(i).todense()).reshape(-1)
        return (row + SMOOTHING) / self._row_denominators[i]

    def dense(self) -> np.ndarray:
        """Full dense probability matrix (128 MiB at 4,096 bins); test use only."""
        dense = self.counts.toarray() + SMOOTHING
        return dense / self._row_denominators[:, None]

    @property
    def is_uniform(self) -> bool:
        return self.n_transitions == 0


def _series_of(segment) -> np.ndarray:
    series = getattr(segment, "series", segment)
    return np.asarray(series, dtype=float)


def _states_from_series(series: np.ndarray) -> np.ndarray:
    """Reorder (g, dv, vf) episode columns into the (dv, g, vf) bin order."""
    return series[:, (1, 0, 2)]


def build_transition_matrix(segments: Sequence, spec: BinSpec = BinSpec()) -> TransitionMatrix:
    """Count consecutive-frame bin transitions over all segments and smooth.

    Accepts StopSegment objects or raw (n, 3) series with columns
    (g, dv, vf). An empty segment list yields the uniform-rows matrix.
    """
    rows, cols = [], []
    for segment in segments:
        series = _series_of(segment)
        if series.shape[0] < 2:
            continue
        idx = bin_indices(_states_from_series(series), spec)
        rows.append(idx[:-1])
        cols.append(idx[1:])
    n = spec.n_bins
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        counts = sp.coo_matrix(
            (np.ones(r.size), (r, c)), shape=(n, n)
        ).tocsr()
        total = int(r.size)
    else:
        counts = sp.csr_matrix((n, n))
        total = 0
    return TransitionMatrix(counts=counts, binspec=spec, n_transitions=total)


def _channel_masses(value: float, sigma: float, lo: float, width: float,
                    n: int) -> np.ndarray:
    """Gaussian interval masses per bin; boundary bins absorb the tail mass."""
    if sigma < _ONE_HOT_SIGMA:
        out = np.zeros(n)
        out[_channel_index(np.array([value]), lo, width, n)[0]] = 1.0
        return out
    interior = lo + width * np.arange(1, n)
    cdf = ndtr((interior - value) / sigma)
    return np.diff(np.concatenate(([0.0], cdf, [1.0])))


def state_bin_distribution(obs, err: DerivedErrorSet,
                           spec: BinSpec = BinSpec()) -> np.ndarray:
    """Error-marginalized probability vector over the 4,096 bins.

    Channel errors are independent zero-mean Gaussians with the derived
    spacing, relative-speed, and speed sigmas; the bin mass is the product
    of per-channel interval masses.
    """
    dv, g, vf = (float(c) for c in np.asarray(obs, dtype=float).reshape(3))
    if not all(math.isfinite(c) for c in (dv, g, vf)):
        raise ValueError("state components must be finite")
    m_dv = _channel_masses(dv, err.sigma_rel_speed, spec.dv_min, spec.dv_width, spec.n_dv)
    m_g = _channel_masses(g, err.sigma_spacing, spec.g_min, spec.g_width, spec.n_g)
    m_vf = _channel_masses(vf, err.sigma_speed, spec.vf_min, spec.vf_width, spec.n_vf)
    q = np.einsum("a,b,c->abc", m_dv, m_g, m_vf).reshape(-1)
    return q


def transition_probability(q_t: np.ndarray, q_t1: np.ndarray,
                           matrix: TransitionMatrix,
                           support_threshold: float = _SUPPORT_THRESHOLD) -> float:
    """Bilinear form q_t' P q_t1 restricted to the non-negligible support."""
    q_t = np.asarray(q_t, dtype=float)
    q_t1 = np.asarray(q_t1, dtype=float)
    si = np.nonzero(q_t > support_threshold)[0]
    sj = np.nonzero(q_t1 > support_threshold)[0]
    if si.size == 0 or sj.size == 0:
        return 0.0
    sub = np.asarray(matrix.counts[si][:, sj].todense())
    probs = (sub + SMOOTHING) / matrix._row_denominators[si, None]
    return float(q_t[si] @ probs @ q_t1[sj])


def geometric_mean_score(segment, matrix: TransitionMatrix,
                         err: DerivedErrorSet,
                         spec: Optional[BinSpec] = None) -> float:
    """Geometric mean of the per-step transition probabilities of a segment."""
    spec = spec or matrix.binspec
    series = _series_of(segment)
    if series.shape[0] < 2:
        raise ValueError("segment needs at least two frames")
    states = _states_from_series(series)
    q_prev = state_bin_distribution(states[0], err, spec)
    log_sum = 0.0
    steps = states.shape[0] - 1
    for k in range(1, states.shape[0]):
        q_next = state_bin_distribution(states[k], err, spec)
        log_sum += math.log(transition_probability(q_prev, q_next, matrix))
        q_prev = q_next
    return math.exp(log_sum / steps)


def step_probabilities(segment, matrix: TransitionMatrix, err: DerivedErrorSet,
                       spec: Optional[BinSpec] = None) -> np.ndarray:
    """Per-step transition probabilities (for histogram emission)."""
    spec = spec or matrix.binspec
    series = _series_of(segment)
    if series.shape[0] < 2:
        raise ValueError("segment needs at least two frames")
    states = _states_from_series(series)
    out = np.empty(states.shape[0] - 1)
    q_prev = state_bin_distribution(states[0], err, spec)
    for k in range(1, states.shape[0]):
        q_next = state_bin_distribution(states[k], err, spec)
        out[k - 1] = transition_probability(q_prev, q_next, matrix)
        q_prev = q_next
    return out


# ---------------------------------------------------------------------------
# Persistence: sparse triplets plus BinSpec header

def save_transition_matrix(matrix: TransitionMatrix, path) -> None:
    coo = matrix.counts.tocoo()
    denom = matrix._row_denominators
    triplets = sorted(
        (int(r), int(c), float(v), float((v + SMOOTHING) / denom[r]))
        for r, c, v in zip(coo.row, coo.col, coo.data)
    )
    doc = {
        "schema": "transition-matrix/1",
        "binspec": matrix.binspec.to_dict(),
        "n_transitions": matrix.n_transitions,
        "smoothing": SMOOTHING,
        "triplets": triplets,  # (row, col, count, prob)
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_transition_matrix(path) -> TransitionMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = BinSpec.from_dict(doc["binspec"])
    triplets = doc.get("triplets", [])
    n = spec.n_bins
    if triplets:
        rows = [t[0] for t in triplets]
        cols = [t[1] for t in triplets]
        vals = [t[2] for t in triplets]
        counts = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    else:
        counts = sp.csr_matrix((n, n))
    return TransitionMatrix(counts=counts, binspec=spec,
                            n_transitions=int(doc["n_transitions"]))
