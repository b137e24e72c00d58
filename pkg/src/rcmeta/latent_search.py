"""Fitting short signals by global optimization in autoencoder latent space.

The objective decodes a latent vector into readout features, runs the
closed-loop forecast over the signal's window, and scores the squared
error at the observed time stamps.  Minimization uses dual annealing
(generalized simulated annealing) with Nelder-Mead local refinement,
warm-started from the best of a random subsample of library latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import dual_annealing

from .autoencoder import AutoencoderModel, decode
from .errors import ConfigurationError, DivergenceError
from .reservoir import RcFeatures, ReservoirTopology, predict
from .timeseries import TimeSeries

# Returned in place of non-finite losses so the optimizer sees a total
# function over the whole search box.
SENTINEL_LOSS = 1e12


@dataclass
class SearchConfig:
    """Latent search box and optimizer budget.

    ``bounds`` is a (dim_e, 2) array of [low, high] per latent dimension,
    normally the encoded-library box expanded by half its range on each
    side (see :func:`latent_bounds`).
    """

    bounds: np.ndarray
    max_global_iterations: int = 100
    max_evaluations: int = 2000
    initial_temp: float = 5230.0
    visit: float = 2.62
    accept: float = -5.0
    nm_max_evaluations: int = 500
    nm_tolerance: float = 1e-8
    warm_start_sample: int = 20
    rng_seed: int = 0

    def validate(self) -> None:
        bounds = np.asarray(self.bounds, dtype=float)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise ConfigurationError("bounds must be a (dim_e, 2) array")
        if not np.all(np.isfinite(bounds)):
            raise ConfigurationError("bounds must be finite")
        if not np.all(bounds[:, 0] < bounds[:, 1]):
            raise ConfigurationError("each bound must satisfy low < high")
        if self.max_global_iterations < 1:
            raise ConfigurationError("max_global_iterations must be >= 1")
        if self.max_evaluations < 1:
            raise ConfigurationError("max_evaluations must be >= 1")


def latent_bounds(latents: np.ndarray, margin: float = 0.5) -> np.ndarray:
    """Box covering the encoded library, expanded by ``margin`` of the range.

    Dimensions with zero library range get a +/-0.5 pad so the box stays
    a valid search region.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    lo = latents.min(axis=0)
    hi = latents.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, margin * span, 0.5)
    return np.column_stack([lo - pad, hi + pad])


@dataclass
class FitResult:
    """Outcome of one latent-space fit."""

    e_hat: np.ndarray
    loss: float
    features_hat: RcFeatures
    evaluations: int
    best_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "e_hat": self.e_hat.tolist(),
            "loss": self.loss,
            "evaluations": self.evaluations,
            "rng_seed": self.rng_seed,
        }


def objective(e: np.ndarray, model: AutoencoderModel, topology: ReservoirTopology,
              signal: TimeSeries, dt: float, window_start: float | None = None,
              sentinel: float = SENTINEL_LOSS) -> float:
    """Sum of squared errors of the decoded forecaster at the observed points.

    The closed loop runs from ``window_start`` (default: the signal's first
    time stamp) over a uniform grid covering the signal's span, and the
    prediction is linearly interpolated at the observed times.  Divergent
    or overflowing predictions return the finite sentinel instead of
    raising, keeping the objective total over the search box.
    """
    if len(signal) == 0:
        raise ConfigurationError("cannot fit an empty signal")
    try:
        features = decode(model, np.asarray(e, dtype=float))
        prediction = predict(topology, features, signal.times, dt, start_time=window_start)
    except (DivergenceError, FloatingPointError):
        return sentinel
    loss = float(np.sum((prediction.values - signal.values) ** 2))
    if not np.isfinite(loss):
        return sentinel
    return loss


def fit(model: AutoencoderModel, topology: ReservoirTopology, signal: TimeSeries,
        config: SearchConfig, dt: float, window_start: float | None = None,
        library_latents: np.ndarray | None = None) -> FitResult:
    """Find the latent vector whose decoded forecaster best explains ``signal``.

    Deterministic given ``config.rng_seed``.  When ``library_latents`` is
    provided, the search starts from the member latent with the smallest
    objective among a random subsample of ``config.warm_start_sample``.
    """
    config.validate()
    bounds = np.asarray(config.bounds, dtype=float)

    evaluations = 0
    best_loss = np.inf
    best_e: np.ndarray | None = None
    trace: list = []

    def wrapped(x: np.ndarray) -> float:
        nonlocal evaluations, best_loss, best_e
        value = objective(x, model, topology, signal, dt, window_start=window_start)
        evaluations += 1
        if value < best_loss:
            best_loss = value
            best_e = np.array(x, dtype=float, copy=True)
        trace.append(best_loss)
        return value

    rng = np.random.default_rng(config.rng_seed)
    if library_latents is not None and len(library_latents) > 0:
        latents = np.atleast_2d(np.asarray(library_latents, dtype=float))
        take = min(config.warm_start_sample, latents.shape[0])
        idx = rng.choice(latents.shape[0], size=take, replace=False)
        for i in idx:
            wrapped(latents[i])
        x0 = np.clip(best_e, bounds[:, 0], bounds[:, 1])
    else:
        x0 = bounds.mean(axis=1)

    dual_annealing(
        wrapped,
        bounds=[(float(lo), float(hi)) for lo, hi in bounds],
        maxiter=config.max_global_iterations,
        maxfun=config.max_evaluations,
        initial_temp=config.initial_temp,
        visit=config.visit,
        accept=config.accept,
        x0=np.asarray(x0, dtype=float),
        rng=config.rng_seed,
        minimizer_kwargs={
            "method": "Nelder-Mead",
            "options": {
                "maxfev": config.nm_max_evaluations,
                "xatol": config.nm_tolerance,
                "fatol": config.nm_tolerance,
            },
        },
    )

    assert best_e is not None
    final_loss = objective(best_e, model, topology, signal, dt, window_start=window_start)
    return FitResult(
        e_hat=best_e,
        loss=final_loss,
        features_hat=decode(model, best_e),
        evaluations=evaluations,
        best_trace=np.asarray(trace),
        rng_seed=config.rng_seed,
    )


def forecast(model: AutoencoderModel, topology: ReservoirTopology, fit_result: FitResult,
             horizon_times: np.ndarray, dt: float) -> TimeSeries:
    """Closed-loop prediction from the fitted features over a horizon.

    ``horizon_times`` must start at the fit window start.  Unlike the
    objective, divergence here raises: this is the user-facing path.
    """
    horizon_times = np.asarray(horizon_times, dtype=float)
    if horizon_times.size == 0:
        return TimeSeries(horizon_times, np.empty((0, fit_result.features_hat.output_dim)))
    return predict(topology, fit_result.features_hat, horizon_times, dt,
                   start_time=horizon_times[0])
