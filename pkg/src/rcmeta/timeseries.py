"""Time-stamped vector observations, the interchange unit of the pipeline.

Every signal that moves between modules (library members, short test
signals, forecasts, dense ground truth) is a :class:`TimeSeries`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError


@dataclass(frozen=True)
class TimeSeries:
    """A finite sequence of vector observations at increasing times.

    Attributes:
        times: shape (n,) time stamps in seconds, strictly increasing.
        values: shape (n, m) observations, one row per time stamp, m >= 1.

    Zero-length series (n == 0) are permitted so that empty forecast
    horizons have a natural representation; ``values`` must still carry
    an explicit column count.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1:
            raise DataError("times must be one-dimensional")
        if values.ndim != 2:
            raise DataError("values must be two-dimensional (rows = time stamps)")
        if values.shape[0] != times.shape[0]:
            raise DataError(
                f"row count {values.shape[0]} does not match {times.shape[0]} time stamps"
            )
        if values.shape[1] < 1:
            raise DataError("observations must have at least one component")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise DataError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        """Number of observed components."""
        return self.values.shape[1]

    @property
    def step(self) -> float:
        """Uniform sampling step; raises if the grid is not uniform."""
        if len(self) < 2:
            raise DataError("need at least two time stamps to define a step")
        diffs = np.diff(self.times)
        step = (self.times[-1] - self.times[0]) / (len(self) - 1)
        if not np.allclose(diffs, step, rtol=1e-6, atol=1e-12):
            raise DataError("time stamps are not uniformly spaced")
        return float(step)

    def slice(self, start: int, stop: int | None = None) -> "TimeSeries":
        return TimeSeries(self.times[start:stop], self.values[start:stop])

    def to_frame(self) -> pd.DataFrame:
        cols = {"t": self.times}
        for j in range(self.dim):
            cols[f"y{j + 1}"] = self.values[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        frame = pd.read_csv(path)
        ycols = [c for c in frame.columns if c != "t"]
        return cls(frame["t"].to_numpy(), frame[ycols].to_numpy())
