"""Scaling-law fits for NLL curves.

Three laws are fitted by ordinary least squares:

* linear      ``L = k M + b``
* quadratic   ``L = beta M - alpha M^2 + gamma``  (alpha > 0 means concave)
* logarithmic ``y = p ln x + q``

Fits solve the normal equations on standardized abscissae and map the
coefficients (and their covariance) back to the raw variable, which keeps
the ``M`` and ``M^2`` columns well conditioned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import ParameterError

QUALITY_R2 = 0.98
DIVERGENCE_THRESHOLD = 0.25
DIVERGENCE_EPS = 1e-12

COEFFICIENT_NAMES = {
    "linear": ("k", "b"),
    "quadratic": ("alpha", "beta", "gamma"),
    "log": ("p", "q"),
}


@dataclass(frozen=True, eq=False)
class CurveSeries:
    """NLL values against one abscissa (M, chi, N, ...), plus free-form metadata."""

    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64).reshape(-1)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if x.shape != y.shape:
            raise ParameterError(f"{x.size} abscissae but {y.size} values")
        if x.size and np.any(np.diff(x) <= 0):
            raise ParameterError("abscissae must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class ScalingFit:
    kind: str
    coefficients: dict
    r_squared: float
    residual_max: float
    n_points: int
    stderr: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = COEFFICIENT_NAMES.get(self.kind)
        if names is None:
            raise ParameterError(f"unknown fit kind {self.kind!r}")
        if tuple(self.coefficients) != names:
            raise ParameterError(f"{self.kind} fit needs coefficients {names}")

    @property
    def dof(self) -> int:
        return self.n_points - len(self.coefficients)

    def __getitem__(self, name: str) -> float:
        return self.coefficients[name]

    def ci_halfwidth(self, name: str, level: float = 0.95) -> float:
        """Half-width of the two-sided confidence interval from the t distribution."""
        if self.dof < 1:
            return math.inf
        return float(stats.t.ppf(0.5 + level / 2, self.dof) * self.stderr[name])

    def holds(self, threshold: float = QUALITY_R2) -> bool:
        return self.r_squared >= threshold

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.coefficients
        if self.kind == "linear":
            return c["k"] * x + c["b"]
        if self.kind == "quadratic":
            return c["beta"] * x - c["alpha"] * x**2 + c["gamma"]
        return c["p"] * np.log(x) + c["q"]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "coefficients": dict(self.coefficients),
            "stderr": dict(self.stderr),
            "r_squared": self.r_squared,
            "residual_max": self.residual_max,
            "n_points": self.n_points,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> ScalingFit:
        names = COEFFICIENT_NAMES[d["kind"]]
        return cls(
            kind=d["kind"],
            coefficients={k: float(d["coefficients"][k]) for k in names},
            r_squared=float(d["r_squared"]),
            residual_max=float(d["residual_max"]),
            n_points=int(d["n_points"]),
            stderr={k: float(d.get("stderr", {}).get(k, math.nan)) for k in names},
            meta=dict(d.get("meta", {})),
        )


def _polyfit(x: np.ndarray, y: np.ndarray, degree: int):
    """Return ascending power coefficients in ``x``, their covariance, and residuals."""
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError("x and y must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ParameterError("fit input contains non-finite values")
    p = degree + 1
    if np.unique(x).size < p:
        raise ParameterError(f"degree-{degree} fit needs {p} distinct abscissae, got {np.unique(x).size}")
    center = x.mean()
    scale = x.std()
    u = (x - center) / scale
    v = np.vander(u, p, increasing=True)
    gram = v.T @ v
    if np.linalg.cond(gram) > 1e12:
        raise ParameterError("degenerate design matrix")
    a = np.linalg.solve(gram, v.T @ y)
    resid = y - v @ a
    dof = x.size - p
    sigma2 = float(resid @ resid) / dof if dof > 0 else math.nan
    cov_a = sigma2 * np.linalg.inv(gram)

    # sum_j a_j ((x - c)/s)^j  ->  sum_i t_ij a_j x^i
    t = np.zeros((p, p))
    for j in range(p):
        for i in range(j + 1):
            t[i, j] = math.comb(j, i) * (-center) ** (j - i) / scale**j
    return t @ a, t @ cov_a @ t.T, resid


def _quality(y: np.ndarray, resid: np.ndarray) -> tuple[float, float]:
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0:
        r2 = 1.0 if rss <= 1e-30 else -math.inf
    else:
        r2 = 1.0 - rss / tss
    return r2, float(np.max(np.abs(resid)))


def _xy(series) -> tuple[np.ndarray, np.ndarray, dict]:
    if isinstance(series, CurveSeries):
        return series.x, series.y, dict(series.meta)
    x, y = series
    s = CurveSeries(x, y)
    return s.x, s.y, {}


def fit_linear(series) -> ScalingFit:
    """``L = k M + b`` by least squares. Accepts a CurveSeries or an ``(x, y)`` pair."""
    x, y, meta = _xy(series)
    if x.size < 2:
        raise ParameterError(f"linear fit needs at least 2 points, got {x.size}")
    c, cov, resid = _polyfit(x, y, 1)
    r2, rmax = _quality(y, resid)
    se = np.sqrt(np.diag(cov))
    return ScalingFit(
        "linear", {"k": float(c[1]), "b": float(c[0])}, r2, rmax, int(x.size),
        {"k": float(se[1]), "b": float(se[0])}, meta,
    )


def fit_quadratic(series) -> ScalingFit:
    """``L = beta M - alpha M^2 + gamma``; alpha carries the sign of the concave suppression."""
    x, y, meta = _xy(series)
    if x.size < 3:
        raise ParameterError(f"quadratic fit needs at least 3 points, got {x.size}")
    c, cov, resid = _polyfit(x, y, 2)
    r2, rmax = _quality(y, resid)
    se = np.sqrt(np.diag(cov))
    return ScalingFit(
        "quadratic",
        {"alpha": float(-c[2]), "beta": float(c[1]), "gamma": float(c[0])},
        r2, rmax, int(x.size),
        {"alpha": float(se[2]), "beta": float(se[1]), "gamma": float(se[0])},
        meta,
    )


def fit_log(xs: Sequence[float], ys: Sequence[float], meta: dict | None = None) -> ScalingFit:
    """``y = p ln x + q`` by least squares on ``ln x``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 2:
        raise ParameterError(f"log fit needs at least 2 points, got {x.size}")
    if np.any(x <= 0):
        raise ParameterError("log fit needs strictly positive abscissae")
    c, cov, resid = _polyfit(np.log(x), y, 1)
    r2, rmax = _quality(y, resid)
    se = np.sqrt(np.diag(cov))
    return ScalingFit(
        "log", {"p": float(c[1]), "q": float(c[0])}, r2, rmax, int(x.size),
        {"p": float(se[1]), "q": float(se[0])}, dict(meta or {}),
    )


def compose_pq(alpha_fit: ScalingFit, beta_fit: ScalingFit, gamma_fit: ScalingFit, M: float) -> tuple[float, float]:
    """Slope and intercept of ``L`` against ``ln chi`` implied by the coefficient laws at ``M``."""
    for f in (alpha_fit, beta_fit, gamma_fit):
        if f.kind != "log":
            raise ParameterError(f"compose_pq needs log fits, got {f.kind!r}")
    p = -alpha_fit["p"] * M**2 + beta_fit["p"] * M + gamma_fit["p"]
    q = -alpha_fit["q"] * M**2 + beta_fit["q"] * M + gamma_fit["q"]
    return p, q


@dataclass(frozen=True)
class DivergenceReport:
    """Relative train/test coefficient gaps per key.

    ``gaps[key][name]`` is ``(test - train) / max(|train|, |test|, eps)``;
    ``first_key[name]`` is the smallest key whose absolute gap exceeds the
    threshold (None if none does) and ``flagged_key`` the smallest over all
    coefficients.
    """

    keys: list
    gaps: dict
    first_key: dict
    flagged_key: object
    threshold: float

    def to_dict(self) -> dict:
        return {
            "keys": list(self.keys),
            "gaps": {str(k): v for k, v in self.gaps.items()},
            "first_key": dict(self.first_key),
            "flagged_key": self.flagged_key,
            "threshold": self.threshold,
        }


def divergence_report(
    train_fits: Mapping,
    test_fits: Mapping,
    threshold: float = DIVERGENCE_THRESHOLD,
    eps: float = DIVERGENCE_EPS,
) -> DivergenceReport:
    """Compare train and test fits keyed by chi or N (mappings, or lists of pairs)."""
    train_fits = dict(train_fits)
    test_fits = dict(test_fits)
    if set(train_fits) != set(test_fits):
        raise ParameterError(
            f"key mismatch: {sorted(set(train_fits) ^ set(test_fits))} present on one side only"
        )
    keys = sorted(train_fits)
    names = None
    gaps = {}
    for k in keys:
        a, b = train_fits[k], test_fits[k]
        if a.kind != b.kind:
            raise ParameterError(f"key {k}: fit kinds differ ({a.kind} vs {b.kind})")
        names = names or tuple(a.coefficients)
        gaps[k] = {
            n: (b[n] - a[n]) / max(abs(a[n]), abs(b[n]), eps) for n in names
        }
    first = {
        n: next((k for k in keys if abs(gaps[k][n]) > threshold), None) for n in names or ()
    }
    hits = [k for k in first.values() if k is not None]
    return DivergenceReport(keys, gaps, first, min(hits) if hits else None, threshold)
