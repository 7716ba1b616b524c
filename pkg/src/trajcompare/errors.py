"""Bivariate measurement-error model: fitting, normality tests, propagation.

The travel-distance error of a tracked vehicle is modeled as a bivariate
Gaussian over (longitudinal, lateral) components. Spacing, speed, and
relative-speed error channels are closed-form derivations of that model,
treating the two vehicles of a pair as carrying independent errors.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2, norm

_SIGMA_FLOOR = 1e-15


class DegenerateSampleError(ValueError):
    """Samples are too few, collinear, or constant to fit a 2D Gaussian."""


@dataclass(frozen=True)
class ErrorModel2D:
    """Bivariate Gaussian error: means, standard deviations, correlation."""

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float
    n_samples: int = 0

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("sigma_x and sigma_y must be strictly positive")
        if not (-1.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (-1, 1)")

    @classmethod
    def zero(cls, floor: float = _SIGMA_FLOOR) -> "ErrorModel2D":
        """Zero-error limit, with sigmas floored to keep the covariance PD."""
        return cls(0.0, 0.0, floor, floor, 0.0, 0)

    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma_x * self.sigma_y
        return np.array([[self.sigma_x ** 2, c], [c, self.sigma_y ** 2]])


@dataclass(frozen=True)
class SpeedErrorModel:
    """Bivariate Gaussian speed-error description (m/s)."""

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float


@dataclass(frozen=True)
class DerivedErrorSet:
    """Channel-level error terms derived from the distance-error model.

    spacing_var is exactly twice the longitudinal distance-error variance;
    relative-speed sigmas are exactly sqrt(2) times the speed sigmas.
    """

    distance: ErrorModel2D
    spacing_var: float
    speed: SpeedErrorModel
    rel_speed_sigma_x: float
    rel_speed_sigma_y: float
    rel_speed_rho: float

    @property
    def sigma_spacing(self) -> float:
        return math.sqrt(self.spacing_var)

    @property
    def sigma_speed(self) -> float:
        return self.speed.sigma_x

    @property
    def sigma_rel_speed(self) -> float:
        return self.rel_speed_sigma_x

    @property
    def sigma_disp_x(self) -> float:
        """Longitudinal displacement-difference error (two independent draws)."""
        return math.sqrt(2.0) * self.distance.sigma_x

    @property
    def sigma_disp_y(self) -> float:
        return math.sqrt(2.0) * self.distance.sigma_y


def _as_samples(samples, minimum: int) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be an (n, 2) array of error vectors")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples contain non-finite values")
    if arr.shape[0] < minimum:
        raise DegenerateSampleError(f"need at least {minimum} samples, got {arr.shape[0]}")
    return arr


def fit_bivariate_error(samples) -> ErrorModel2D:
    """Maximum-likelihood fit of a bivariate Gaussian to 2D error samples.

    Uses the 1/n covariance normalization so that downstream Mardia
    statistics follow their classical definitions.
    """
    arr = _as_samples(samples, minimum=3)
    n = arr.shape[0]
    mu = arr.mean(axis=0)
    z = arr - mu
    sxx = float((z[:, 0] ** 2).mean())
    syy = float((z[:, 1] ** 2).mean())
    sxy = float((z[:, 0] * z[:, 1]).mean())
    if sxx <= 0.0 or syy <= 0.0:
        raise DegenerateSampleError("samples have zero variance in a coordinate")
    rho = sxy / math.sqrt(sxx * syy)
    if 1.0 - rho * rho <= 1e-12:
        raise DegenerateSampleError("samples are collinear")
    return ErrorModel2D(float(mu[0]), float(mu[1]),
                        math.sqrt(sxx), math.sqrt(syy), rho, n)


@dataclass(frozen=True)
class MardiaResult:
    b1: float
    skewness_stat: float
    p_skewness: float
    b2: float
    kurtosis_z: float
    p_kurtosis: float


def mardia_tests(samples) -> MardiaResult:
    """Mardia's multivariate skewness and kurtosis tests for 2D samples.

    The skewness statistic n*b1/6 is referred to chi-square with 4 degrees
    of freedom; the kurtosis statistic is a two-sided standard-normal z.
    Both use the MLE (1/n) covariance.
    """
    arr = _as_samples(samples, minimum=5)
    n = arr.shape[0]
    z = arr - arr.mean(axis=0)
    cov = (z.T @ z) / n
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateSampleError("sample covariance is singular")
    if min(chol[0, 0], chol[1, 1]) ** 2 <= 1e-14 * max(cov[0, 0], cov[1, 1]):
        raise DegenerateSampleError("sample covariance is near-singular")
    # Whitened coordinates make b1 a sum of squared third moments, avoiding
    # the n-by-n Gram matrix.
    w = np.linalg.solve(chol, z.T).T
    w0, w1 = w[:, 0], w[:, 1]
    t000 = float((w0 ** 3).mean())
    t001 = float((w0 ** 2 * w1).mean())
    t011 = float((w0 * w1 ** 2).mean())
    t111 = float((w1 ** 3).mean())
    b1 = t000 ** 2 + 3.0 * t001 ** 2 + 3.0 * t011 ** 2 + t111 ** 2
    skew_stat = n * b1 / 6.0
    p_skew = float(chi2.sf(skew_stat, df=4))

    r2 = w0 ** 2 + w1 ** 2
    b2 = float((r2 ** 2).mean())
    z_kurt = (b2 - 8.0) / math.sqrt(64.0 / n)
    p_kurt = float(2.0 * norm.sf(abs(z_kurt)))
    return MardiaResult(b1, skew_stat, p_skew, b2, z_kurt, p_kurt)


def derive_error_set(model: ErrorModel2D,
                     speed_model: Optional[SpeedErrorModel] = None,
                     durations: Optional[Sequence[float]] = None) -> DerivedErrorSet:
    """Propagate the distance-error model to spacing/speed/relative-speed terms.

    The speed-error model is either supplied directly or re-derived from the
    distance error by dividing through the per-sample elapsed times
    (independence of error and duration assumed). Relative-speed sigmas are
    sqrt(2) times the speed sigmas; spacing variance is twice the
    longitudinal distance-error variance.
    """
    if speed_model is None:
        if durations is None:
            raise ValueError("provide a speed model or per-sample durations")
        tau = np.asarray(durations, dtype=float)
        if tau.size == 0 or np.any(tau <= 0) or not np.all(np.isfinite(tau)):
            raise ValueError("durations must be positive and finite")
        inv_mean = float((1.0 / tau).mean())
        inv_rms = math.sqrt(float((1.0 / tau ** 2).mean()))
        speed_model = SpeedErrorModel(
            mu_x=model.mu_x * inv_mean,
            mu_y=model.mu_y * inv_mean,
            sigma_x=model.sigma_x * inv_rms,
            sigma_y=model.sigma_y * inv_rms,
            rho=model.rho,
        )
    root2 = math.sqrt(2.0)
    return DerivedErrorSet(
        distance=model,
        spacing_var=2.0 * model.sigma_x ** 2,
        speed=speed_model,
        rel_speed_sigma_x=root2 * speed_model.sigma_x,
        rel_speed_sigma_y=root2 * speed_model.sigma_y,
        rel_speed_rho=speed_model.rho,
    )


def zero_error_set() -> DerivedErrorSet:
    """Ground-truth convention: all derived channel errors effectively zero."""
    zero = ErrorModel2D.zero()
    return derive_error_set(
        zero, SpeedErrorModel(0.0, 0.0, _SIGMA_FLOOR, _SIGMA_FLOOR, 0.0)
    )


# ---------------------------------------------------------------------------
# Interchange

def error_model_to_dict(model: ErrorModel2D,
                        derived: Optional[DerivedErrorSet] = None) -> dict:
    doc = {
        "mu": [model.mu_x, model.mu_y],
        "sigma": [model.sigma_x, model.sigma_y],
        "rho": model.rho,
        "n": model.n_samples,
    }
    if derived is not None:
        doc["derived"] = {
            "spacing_var": derived.spacing_var,
            "speed": {
                "mu": [derived.speed.mu_x, derived.speed.mu_y],
                "sigma": [derived.speed.sigma_x, derived.speed.sigma_y],
                "rho": derived.speed.rho,
            },
            "rel_speed": {
                "sigma": [derived.rel_speed_sigma_x, derived.rel_speed_sigma_y],
                "rho": derived.rel_speed_rho,
            },
        }
    return doc


def error_model_from_dict(doc: dict) -> tuple:
    """Parse the error-model JSON; returns (ErrorModel2D, DerivedErrorSet | None)."""
    model = ErrorModel2D(
        mu_x=float(doc["mu"][0]), mu_y=float(doc["mu"][1]),
        sigma_x=float(doc["sigma"][0]), sigma_y=float(doc["sigma"][1]),
        rho=float(doc["rho"]), n_samples=int(doc.get("n", 0)),
    )
    derived = None
    if "derived" in doc:
        d = doc["derived"]
        speed = SpeedErrorModel(
            mu_x=float(d["speed"]["mu"][0]), mu_y=float(d["speed"]["mu"][1]),
            sigma_x=float(d["speed"]["sigma"][0]), sigma_y=float(d["speed"]["sigma"][1]),
            rho=float(d["speed"]["rho"]),
        )
        derived = derive_error_set(model, speed)
    return model, derived


def save_error_model(model: ErrorModel2D, path,
                     derived: Optional[DerivedErrorSet] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(error_model_to_dict(model, derived), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_error_model(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        return error_model_from_dict(json.load(fh))


def load_error_samples(path) -> tuple:
    """Read error samples from CSV with columns eps_x, eps_y[, duration_s].

    Returns (samples (n, 2), durations (n,) or None).
    """
    path = Path(path)
    rows, durations = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"eps_x", "eps_y"} <= set(reader.fieldnames):
            raise ValueError("error-sample CSV needs columns eps_x, eps_y")
        has_tau = "duration_s" in reader.fieldnames
        for row in reader:
            rows.append((float(row["eps_x"]), float(row["eps_y"])))
            if has_tau and row.get("duration_s") not in (None, ""):
                durations.append(float(row["duration_s"]))
    samples = np.array(rows, dtype=float).reshape(-1, 2)
    tau = np.array(durations, dtype=float) if durations and len(durations) == len(rows) else None
    return samples, tau
