"""Forecast scoring and latent-space diagnostics.

Provides full-curve mean squared error, valid prediction time in Lyapunov
units for chaotic signals, a two-component PCA export of library latents,
and log-space error histograms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import MetricError
from .timeseries import TimeSeries


@dataclass(frozen=True)
class ValidTimeSpec:
    """Threshold rule for the valid-time metric.

    The forecast is valid until its instantaneous squared error first
    exceeds the variance of the target signal over the evaluation window.
    With ``per_component`` the crossing is tested per component against
    per-component variances (sensitivity variant); otherwise a single
    scalar threshold sums variances over components.
    """

    lyapunov_time: float
    per_component: bool = False

    def __post_init__(self):
        if self.lyapunov_time <= 0:
            raise MetricError("lyapunov_time must be > 0")


def _check_aligned(forecast: TimeSeries, truth: TimeSeries) -> None:
    if forecast.dim != truth.dim:
        raise MetricError(
            f"component mismatch: forecast {forecast.dim} vs truth {truth.dim}"
        )
    if len(forecast) != len(truth) or not np.allclose(
        forecast.times, truth.times, rtol=1e-9, atol=1e-9
    ):
        raise MetricError("forecast and truth must share the same time grid")


def full_curve_mse(forecast: TimeSeries, truth: TimeSeries) -> float:
    """Mean over all time points and components of the squared error."""
    _check_aligned(forecast, truth)
    if len(truth) == 0:
        raise MetricError("cannot score empty series")
    return float(np.mean((forecast.values - truth.values) ** 2))


def valid_time(forecast: TimeSeries, truth: TimeSeries, spec: ValidTimeSpec) -> float:
    """Time until the squared error first exceeds the target variance.

    Measured from the start of the evaluation window (the forecast start)
    and reported in units of the Lyapunov time.  If the error never
    exceeds the threshold, the full window length is returned.
    """
    _check_aligned(forecast, truth)
    if len(truth) < 2:
        raise MetricError("need at least two points to measure a valid time")
    variances = truth.values.var(axis=0)
    sq_err = (forecast.values - truth.values) ** 2
    if spec.per_component:
        if np.any(variances == 0):
            raise MetricError("a truth component has zero variance over the window")
        exceeded = np.any(sq_err > variances, axis=1)
    else:
        threshold = float(variances.sum())
        if threshold == 0:
            raise MetricError("truth has zero variance over the window")
        exceeded = sq_err.sum(axis=1) > threshold
    t0 = truth.times[0]
    if not exceeded.any():
        return float((truth.times[-1] - t0) / spec.lyapunov_time)
    first = int(np.argmax(exceeded))
    return float((truth.times[first] - t0) / spec.lyapunov_time)


def _pca(latents: np.ndarray):
    """Mean-centered PCA via eigen-decomposition of the covariance."""
    latents = np.asarray(latents, dtype=float)
    mean = latents.mean(axis=0)
    centered = latents - mean
    cov = centered.T @ centered / max(latents.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    return mean, eigvecs[:, order], eigvals[order]


def latent_pca_export(latents: np.ndarray, labels: list) -> pd.DataFrame:
    """Two principal components of the latents plus label columns.

    ``labels`` is one dict per latent (ground-truth parameters); their
    union of keys becomes the label columns.  A degenerate covariance
    yields fewer components and a warning.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if latents.shape[0] < 3:
        raise MetricError("need at least 3 latents for a PCA export")
    if len(labels) != latents.shape[0]:
        raise MetricError("need one label record per latent")
    mean, components, eigvals = _pca(latents)
    tol = max(eigvals[0], 0.0) * 1e-12
    usable = int(np.sum(eigvals > tol))
    n_comp = min(2, usable)
    if n_comp < 2:
        warnings.warn(
            f"latent covariance supports only {n_comp} principal component(s)",
            stacklevel=2,
        )
    projected = (latents - mean) @ components[:, :n_comp]
    data = {f"pc{j + 1}": projected[:, j] for j in range(n_comp)}
    keys: list = []
    for record in labels:
        for key in record:
            if key not in keys:
                keys.append(key)
    for key in keys:
        data[key] = [record.get(key) for record in labels]
    return pd.DataFrame(data)


def log_error_histogram(errors, bins: int = 30) -> dict:
    """Histogram of log10(errors) plus the arithmetic mean and median."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise MetricError("no errors to histogram")
    if np.any(~np.isfinite(errors)) or np.any(errors <= 0):
        raise MetricError("errors must be finite and > 0")
    counts, edges = np.histogram(np.log10(errors), bins=bins)
    return {
        "bin_edges_log10": edges.tolist(),
        "counts": counts.tolist(),
        "mean": float(errors.mean()),
        "median": float(np.median(errors)),
    }


@dataclass
class ScoreReport:
    """Per-signal metric values plus aggregates recomputable from them."""

    metric: str
    per_signal: list = field(default_factory=list)  # dicts with at least {"index", "value"}
    mean: float = np.nan
    median: float = np.nan
    stddev: float = np.nan
    histogram: dict | None = None

    @classmethod
    def from_values(cls, metric: str, values, extra: list | None = None,
                    bins: int = 30) -> "ScoreReport":
        values = np.asarray(values, dtype=float)
        per_signal = []
        for i, v in enumerate(values):
            row = {"index": i, "value": float(v)}
            if extra is not None:
                row.update(extra[i])
            per_signal.append(row)
        histogram = None
        if values.size and np.all(np.isfinite(values)) and np.all(values > 0):
            histogram = log_error_histogram(values, bins=bins)
        return cls(
            metric=metric,
            per_signal=per_signal,
            mean=float(values.mean()),
            median=float(np.median(values)),
            stddev=float(values.std()),
            histogram=histogram,
        )

    def values(self) -> np.ndarray:
        return np.array([row["value"] for row in self.per_signal])

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "per_signal": self.per_signal,
            "mean": self.mean,
            "median": self.median,
            "stddev": self.stddev,
            "histogram": self.histogram,
        }
