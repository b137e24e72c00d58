"""Synthetic task families used for library generation and test signals.

Three families are supported:

* ``sine``        -- A*sin(t + b) with random amplitude and phase.
* ``lorenz63``    -- the Lorenz-63 system with random parameters, observed
                     in full (y = x), integrated by fixed-step RK4.
* ``multimodal``  -- a uniform mixture of sine, linear, quadratic and cubic
                     curves with random coefficients.

Generation is deterministic: the same :class:`SystemSpec` (seed included)
always produces a bit-identical library.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .timeseries import TimeSeries

# e-folding time of perturbation growth for the Lorenz-63 system, seconds.
LORENZ_LYAPUNOV_TIME = 1.104

FAMILIES = ("sine", "lorenz63", "multimodal")

# Continuous degrees of freedom (initial condition + parameters) that pin
# down one trajectory of each family; used for the identifiability check
# |s| * dim(y) > dof.
FAMILY_DOF = {"sine": 2, "lorenz63": 6, "multimodal": 4}

# Observation dimension of each family.
FAMILY_OBSERVED_DIM = {"sine": 1, "lorenz63": 3, "multimodal": 1}

MULTIMODAL_BRANCHES = ("sine", "linear", "quadratic", "cubic")


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def validate(self) -> None:
        if not (np.isfinite(self.low) and np.isfinite(self.high)):
            raise ConfigurationError("uniform bounds must be finite")
        if self.low > self.high:
            raise ConfigurationError(f"uniform bounds out of order: [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.low, self.high, size)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def validate(self) -> None:
        if not (np.isfinite(self.mean) and np.isfinite(self.std)):
            raise ConfigurationError("normal parameters must be finite")
        if self.std < 0:
            raise ConfigurationError("normal stddev must be >= 0")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mean, self.std, size)

    def to_dict(self) -> dict:
        return {"kind": "normal", "mean": self.mean, "std": self.std}


def distribution_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(d["low"], d["high"])
    if kind == "normal":
        return Normal(d["mean"], d["std"])
    raise ConfigurationError(f"unknown distribution kind: {kind!r}")


@dataclass(frozen=True)
class SamplingGrid:
    """A uniform time grid with ``n_points`` samples on [start, end]."""

    start: float
    end: float
    n_points: int

    @classmethod
    def from_step(cls, start: float, step: float, n_points: int) -> "SamplingGrid":
        return cls(start, start + step * (n_points - 1), n_points)

    def validate(self) -> None:
        if self.n_points < 2:
            raise ConfigurationError("sampling grid needs at least 2 points")
        if not self.end > self.start:
            raise ConfigurationError("sampling grid must have end > start")

    @property
    def step(self) -> float:
        return (self.end - self.start) / (self.n_points - 1)

    def times(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.n_points)

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "n_points": self.n_points}


@dataclass(frozen=True)
class SystemSpec:
    """Everything needed to draw one library from a task family."""

    family: str
    parameter_distributions: dict
    sample_count: int
    grid: SamplingGrid
    spin_up_duration: float = 0.0  # Lorenz only; seconds before recording
    rng_seed: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.sample_count < 1:
            raise ConfigurationError("sample_count must be >= 1")
        if self.spin_up_duration < 0:
            raise ConfigurationError("spin_up_duration must be >= 0")
        self.grid.validate()
        for name, dist in self.parameter_distributions.items():
            try:
                dist.validate()
            except ConfigurationError as exc:
                raise ConfigurationError(f"distribution {name!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "parameter_distributions": {
                k: v.to_dict() for k, v in self.parameter_distributions.items()
            },
            "sample_count": self.sample_count,
            "grid": self.grid.to_dict(),
            "spin_up_duration": self.spin_up_duration,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        return cls(
            family=d["family"],
            parameter_distributions={
                k: distribution_from_dict(v) for k, v in d["parameter_distributions"].items()
            },
            sample_count=d["sample_count"],
            grid=SamplingGrid(**d["grid"]),
            spin_up_duration=d.get("spin_up_duration", 0.0),
            rng_seed=d.get("rng_seed", 0),
        )


def sine_system_spec(sample_count: int = 100, rng_seed: int = 0,
                     grid: SamplingGrid | None = None) -> SystemSpec:
    return SystemSpec(
        family="sine",
        parameter_distributions={
            "amplitude": Uniform(0.1, 5.0),
            "phase": Uniform(0.0, np.pi),
        },
        sample_count=sample_count,
        grid=grid or SamplingGrid(-6.0, 5.0, 1000),
        rng_seed=rng_seed,
    )


def lorenz_system_spec(sample_count: int = 1000, rng_seed: int = 0,
                       grid: SamplingGrid | None = None,
                       spin_up_lyapunov_times: float = 100.0) -> SystemSpec:
    return SystemSpec(
        family="lorenz63",
        parameter_distributions={
            "v1": Uniform(10.0, 15.0),
            "v2": Uniform(28.0, 42.0),
            "v3": Uniform(8.0 / 3.0, 12.0 / 3.0),
        },
        sample_count=sample_count,
        grid=grid or SamplingGrid.from_step(0.0, 0.01, 5000),
        spin_up_duration=spin_up_lyapunov_times * LORENZ_LYAPUNOV_TIME,
        rng_seed=rng_seed,
    )


def multimodal_system_spec(sample_count: int = 1000, rng_seed: int = 0,
                           grid: SamplingGrid | None = None) -> SystemSpec:
    return SystemSpec(
        family="multimodal",
        parameter_distributions={
            "amplitude": Uniform(0.1, 0.5),
            "frequency": Uniform(0.8, 1.2),
            "phase": Uniform(0.0, 2.0 * np.pi),
            "coefficient": Uniform(0.1, 0.5),
        },
        sample_count=sample_count,
        grid=grid or SamplingGrid(-6.0, 5.0, 1000),
        rng_seed=rng_seed,
    )


@dataclass(frozen=True)
class LibraryBundle:
    """A generated library plus the parameters that produced it.

    ``ground_truth_params`` is retained for visualization and validation
    only; the training path never reads it.
    """

    members: list = field(default_factory=list)
    ground_truth_params: list = field(default_factory=list)
    spec: SystemSpec | None = None

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("library must have at least one member")
        if len(self.ground_truth_params) != len(self.members):
            raise ConfigurationError("one parameter record per member required")

    def __len__(self) -> int:
        return len(self.members)

    def save_dir(self, path) -> None:
        """One CSV per member plus a JSON metadata file."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, member in enumerate(self.members):
            member.to_csv(path / f"member_{i:05d}.csv")
        meta = {
            "spec": self.spec.to_dict() if self.spec else None,
            "ground_truth_params": self.ground_truth_params,
            "member_count": len(self.members),
        }
        (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load_dir(cls, path) -> "LibraryBundle":
        path = Path(path)
        meta = json.loads((path / "metadata.json").read_text())
        members = [
            TimeSeries.from_csv(path / f"member_{i:05d}.csv")
            for i in range(meta["member_count"])
        ]
        spec = SystemSpec.from_dict(meta["spec"]) if meta["spec"] else None
        return cls(members=members, ground_truth_params=meta["ground_truth_params"], spec=spec)


# ---------------------------------------------------------------------------
# Lorenz-63 integration
# ---------------------------------------------------------------------------

def lorenz_derivative(state: np.ndarray, params) -> np.ndarray:
    """Lorenz-63 vector field.

    dx1 = v1 (x2 - x1)
    dx2 = x1 (v2 - x3) - x2
    dx3 = x1 x2 - v3 x3
    """
    v1, v2, v3 = params
    x1, x2, x3 = state[..., 0], state[..., 1], state[..., 2]
    return np.stack(
        [v1 * (x2 - x1), x1 * (v2 - x3) - x2, x1 * x2 - v3 * x3], axis=-1
    )


def rk4_step(f: Callable[[np.ndarray], np.ndarray], state: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step for autonomous systems."""
    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _lorenz_batch_derivative(states: np.ndarray, params: np.ndarray) -> np.ndarray:
    # states, params: (batch, 3)
    out = np.empty_like(states)
    out[:, 0] = params[:, 0] * (states[:, 1] - states[:, 0])
    out[:, 1] = states[:, 0] * (params[:, 1] - states[:, 2]) - states[:, 1]
    out[:, 2] = states[:, 0] * states[:, 1] - params[:, 2] * states[:, 2]
    return out


def integrate_lorenz(params: np.ndarray, states: np.ndarray, dt: float, n_steps: int,
                     record: bool = True):
    """Integrate a batch of Lorenz systems with fixed-step RK4.

    Args:
        params: (batch, 3) parameter vectors (v1, v2, v3).
        states: (batch, 3) initial states.
        dt: integration step.
        n_steps: number of steps to take.
        record: when True, return trajectories of the *visited* states,
            shape (n_steps, batch, 3) (state before each step); otherwise
            return only the final state.

    Returns:
        (trajectory or None, final_state)
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    x = np.atleast_2d(np.asarray(states, dtype=float)).copy()
    traj = np.empty((n_steps, x.shape[0], 3)) if record else None
    for i in range(n_steps):
        if record:
            traj[i] = x
        k1 = _lorenz_batch_derivative(x, params)
        k2 = _lorenz_batch_derivative(x + 0.5 * dt * k1, params)
        k3 = _lorenz_batch_derivative(x + 0.5 * dt * k2, params)
        k4 = _lorenz_batch_derivative(x + dt * k3, params)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("Lorenz integration produced non-finite states")
    return traj, x


# ---------------------------------------------------------------------------
# Per-family parameter draws and curve evaluation
# ---------------------------------------------------------------------------

def _draw_sine_params(rng: np.random.Generator, spec: SystemSpec) -> dict:
    return {
        "amplitude": float(spec.parameter_distributions["amplitude"].sample(rng)),
        "phase": float(spec.parameter_distributions["phase"].sample(rng)),
    }


def _eval_sine(params: dict, t: np.ndarray) -> np.ndarray:
    return params["amplitude"] * np.sin(t + params["phase"])


def _draw_multimodal_params(rng: np.random.Generator, spec: SystemSpec) -> dict:
    branch = MULTIMODAL_BRANCHES[int(rng.integers(0, len(MULTIMODAL_BRANCHES)))]
    dists = spec.parameter_distributions
    params: dict = {"family": branch}
    if branch == "sine":
        params["amplitude"] = float(dists["amplitude"].sample(rng))
        params["frequency"] = float(dists["frequency"].sample(rng))
        params["phase"] = float(dists["phase"].sample(rng))
    else:
        degree = {"linear": 1, "quadratic": 2, "cubic": 3}[branch]
        coeffs = dists["coefficient"].sample(rng, degree + 1)
        for i, c in enumerate(coeffs):
            # c0 multiplies the highest power, matching y = c0 x^d + ... + cd.
            params[f"c{i}"] = float(c)
    return params


def _multimodal_coefficients(params: dict) -> list:
    return [params[f"c{i}"] for i in range(sum(1 for k in params if k.startswith("c")))]


def _eval_multimodal(params: dict, t: np.ndarray) -> np.ndarray:
    if params["family"] == "sine":
        return params["amplitude"] * np.sin(params["frequency"] * t + params["phase"])
    return np.polyval(_multimodal_coefficients(params), t)


def _draw_lorenz_params(rng: np.random.Generator, spec: SystemSpec) -> dict:
    dists = spec.parameter_distributions
    return {
        "v1": float(dists["v1"].sample(rng)),
        "v2": float(dists["v2"].sample(rng)),
        "v3": float(dists["v3"].sample(rng)),
    }


# ---------------------------------------------------------------------------
# Library generation
# ---------------------------------------------------------------------------

def generate_sine_library(spec: SystemSpec) -> LibraryBundle:
    """Sample ``spec.sample_count`` sine members on the spec grid."""
    if spec.family != "sine":
        raise ConfigurationError(f"expected a sine spec, got {spec.family!r}")
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    t = spec.grid.times()
    members, params = [], []
    for _ in range(spec.sample_count):
        p = _draw_sine_params(rng, spec)
        members.append(TimeSeries(t, _eval_sine(p, t)))
        params.append(p)
    return LibraryBundle(members=members, ground_truth_params=params, spec=spec)


def generate_multimodal_library(spec: SystemSpec) -> LibraryBundle:
    """Sample members from the four-branch mixture with equal probability."""
    if spec.family != "multimodal":
        raise ConfigurationError(f"expected a multimodal spec, got {spec.family!r}")
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    t = spec.grid.times()
    members, params = [], []
    for _ in range(spec.sample_count):
        p = _draw_multimodal_params(rng, spec)
        members.append(TimeSeries(t, _eval_multimodal(p, t)))
        params.append(p)
    return LibraryBundle(members=members, ground_truth_params=params, spec=spec)


def generate_lorenz_library(spec: SystemSpec) -> LibraryBundle:
    """Integrate ``spec.sample_count`` Lorenz-63 systems and record y = x.

    Each member starts from a state drawn uniformly from [-10, 10]^3 and is
    spun up for ``spec.spin_up_duration`` seconds (so recording starts on
    the attractor) before the grid is recorded.  Recording uses the grid
    step as the internal RK4 step.
    """
    if spec.family != "lorenz63":
        raise ConfigurationError(f"expected a lorenz63 spec, got {spec.family!r}")
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    count = spec.sample_count
    params = [_draw_lorenz_params(rng, spec) for _ in range(count)]
    x0 = rng.uniform(-10.0, 10.0, (count, 3))
    pvec = np.array([[p["v1"], p["v2"], p["v3"]] for p in params])

    dt = spec.grid.step
    n_spin = int(round(spec.spin_up_duration / dt))
    _, x_on_attractor = integrate_lorenz(pvec, x0, dt, n_spin, record=False)
    traj, _ = integrate_lorenz(pvec, x_on_attractor, dt, spec.grid.n_points, record=True)

    t = spec.grid.times()
    members = [TimeSeries(t, traj[:, i, :]) for i in range(count)]
    return LibraryBundle(members=members, ground_truth_params=params, spec=spec)


_GENERATORS = {
    "sine": generate_sine_library,
    "lorenz63": generate_lorenz_library,
    "multimodal": generate_multimodal_library,
}


def generate_library(spec: SystemSpec) -> LibraryBundle:
    """Dispatch to the family-specific generator."""
    if spec.family not in _GENERATORS:
        raise ConfigurationError(f"unknown family {spec.family!r}")
    return _GENERATORS[spec.family](spec)


# ---------------------------------------------------------------------------
# Test signals
# ---------------------------------------------------------------------------

class TestSignal(NamedTuple):
    """A short signal to fit, with side-channel ground truth for scoring.

    The dense ``truth`` series and ``params`` exist strictly for
    evaluation and reporting; the fitting path sees only ``signal``.
    """

    signal: TimeSeries
    truth: TimeSeries
    params: dict


def sample_test_signal(spec: SystemSpec, mode: str, count: int, rng_seed: int,
                       eval_start: float | None = None) -> TestSignal:
    """Draw a fresh system from the family and observe it briefly.

    Args:
        spec: the family spec (grid and distributions are reused).
        mode: ``random_times`` draws observation times uniformly from the
            evaluation interval; ``sequential`` takes the first ``count``
            grid points.
        count: number of observations, >= 2.
        rng_seed: seed for the fresh parameter draw and observation times.
        eval_start: lower edge of the evaluation interval for
            ``random_times`` (defaults to the grid start).

    Returns:
        TestSignal(signal, truth, params) where ``truth`` is the dense
        series over the full spec grid.
    """
    if mode not in ("random_times", "sequential"):
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    if count < 2:
        raise ConfigurationError("test signals need at least 2 observations")
    spec.validate()

    dim_y = FAMILY_OBSERVED_DIM[spec.family]
    dof = FAMILY_DOF[spec.family]
    if count * dim_y <= dof:
        warnings.warn(
            f"test signal carries {count}*{dim_y} observations but the family has "
            f"{dof} degrees of freedom; the fit is underdetermined",
            stacklevel=2,
        )

    rng = np.random.default_rng(rng_seed)
    t = spec.grid.times()

    if spec.family == "sine":
        params = _draw_sine_params(rng, spec)
        truth = TimeSeries(t, _eval_sine(params, t))
        closed_form = lambda tt: _eval_sine(params, tt)  # noqa: E731
    elif spec.family == "multimodal":
        params = _draw_multimodal_params(rng, spec)
        truth = TimeSeries(t, _eval_multimodal(params, t))
        closed_form = lambda tt: _eval_multimodal(params, tt)  # noqa: E731
    else:
        params = _draw_lorenz_params(rng, spec)
        x0 = rng.uniform(-10.0, 10.0, (1, 3))
        pvec = np.array([[params["v1"], params["v2"], params["v3"]]])
        dt = spec.grid.step
        n_spin = int(round(spec.spin_up_duration / dt))
        _, x_spun = integrate_lorenz(pvec, x0, dt, n_spin, record=False)
        traj, _ = integrate_lorenz(pvec, x_spun, dt, spec.grid.n_points, record=True)
        truth = TimeSeries(t, traj[:, 0, :])
        closed_form = None

    if mode == "sequential":
        if count > len(truth):
            raise ConfigurationError(
                f"sequential mode asked for {count} of {len(truth)} grid points"
            )
        signal = truth.slice(0, count)
    else:
        lo = spec.grid.start if eval_start is None else float(eval_start)
        if not (spec.grid.start - 1e-9 <= lo < spec.grid.end):
            raise ConfigurationError("eval_start must lie inside the sampling grid")
        times = np.sort(rng.uniform(lo, spec.grid.end, count))
        while np.any(np.diff(times) <= 0):  # vanishing chance of duplicates
            times = np.sort(rng.uniform(lo, spec.grid.end, count))
        if closed_form is not None:
            values = closed_form(times)
        else:
            values = np.column_stack(
                [np.interp(times, truth.times, truth.values[:, j]) for j in range(truth.dim)]
            )
        signal = TimeSeries(times, values)

    return TestSignal(signal=signal, truth=truth, params=params)
