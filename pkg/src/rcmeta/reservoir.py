"""Echo state network construction, training, and autonomous prediction.

The reservoir state r(t) follows the leaky-tanh dynamics

    c * dr/dt = -r + tanh(W r + W_in u + b)

discretized by forward Euler with the data sampling step dt:

    r[n+1] = r[n] + (dt/c) * (-r[n] + tanh(W r[n] + W_in u[n] + b))

so state row n is the state *at* input time n, and training pairs state
r[n] with target u[n].  Autonomous prediction replaces u with the readout
W_out r, the same discrete map the readout was trained against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg

from .errors import (
    ConfigurationError,
    DataError,
    DivergenceError,
    SingularSystemError,
)
from .timeseries import TimeSeries

# Below this node count ARPACK cannot extract the dominant eigenvalue
# (it requires k < N - 1); fall back to a dense solve.
_DENSE_EIG_LIMIT = 64


def _spectral_radius(w: sparse.csr_matrix, rng_seed: int = 0) -> float:
    """Largest absolute eigenvalue of a (possibly non-symmetric) sparse matrix."""
    n = w.shape[0]
    if n < _DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(w.toarray()))))
    # Deterministic ARPACK start vector; the default is randomly seeded.
    v0 = np.random.default_rng(rng_seed).standard_normal(n)
    try:
        lam = splinalg.eigs(w, k=1, which="LM", v0=v0, return_eigenvectors=False)
        return float(np.abs(lam[0]))
    except (splinalg.ArpackNoConvergence, splinalg.ArpackError):
        return float(np.max(np.abs(np.linalg.eigvals(w.toarray()))))


@dataclass(frozen=True)
class ReservoirTopology:
    """The fixed random network shared by every trained readout.

    Immutable after construction: the underlying arrays are marked
    read-only, and all training/prediction operations only read them.
    """

    n_nodes: int
    mean_degree: float
    spectral_radius: float
    input_scale: float
    bias_scale: float
    time_constant: float
    input_dim: int
    rng_seed: int
    w: sparse.csr_matrix
    w_in: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        for arr in (self.w.data, self.w.indices, self.w.indptr, self.w_in, self.bias):
            arr.setflags(write=False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w.indptr, self.w.indices, self.w.data, self.w_in, self.bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def params_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "mean_degree": self.mean_degree,
            "spectral_radius": self.spectral_radius,
            "input_scale": self.input_scale,
            "bias_scale": self.bias_scale,
            "time_constant": self.time_constant,
            "input_dim": self.input_dim,
            "rng_seed": self.rng_seed,
        }


def build_topology(n_nodes: int, mean_degree: float, spectral_radius: float,
                   input_scale: float, bias_scale: float, time_constant: float,
                   input_dim: int, rng_seed: int, max_retries: int = 5) -> ReservoirTopology:
    """Draw the random reservoir and rescale it to the target spectral radius.

    Entries of W are nonzero with probability mean_degree/n_nodes, drawn
    standard normal (the variance is irrelevant once the spectrum is
    rescaled).  W_in and the bias use symmetric uniform distributions with
    half-widths ``input_scale`` and ``bias_scale``.

    A draw whose spectrum is numerically zero cannot be rescaled; such
    draws are retried with a fresh derived seed.
    """
    if n_nodes < 1:
        raise ConfigurationError("n_nodes must be >= 1")
    if not (0 < mean_degree <= n_nodes):
        raise ConfigurationError("mean_degree must satisfy 0 < k <= n_nodes")
    if spectral_radius <= 0:
        raise ConfigurationError("spectral_radius must be > 0")
    if time_constant <= 0:
        raise ConfigurationError("time_constant must be > 0")
    if input_dim < 1:
        raise ConfigurationError("input_dim must be >= 1")

    last_radius = 0.0
    for attempt in range(max_retries):
        rng = np.random.default_rng([rng_seed, attempt])
        mask = rng.random((n_nodes, n_nodes)) < mean_degree / n_nodes
        dense = np.where(mask, rng.standard_normal((n_nodes, n_nodes)), 0.0)
        w = sparse.csr_matrix(dense)
        radius = _spectral_radius(w, rng_seed=rng_seed)
        if radius <= 1e-12:
            last_radius = radius
            continue
        w = w * (spectral_radius / radius)
        # One corrective rescale if floating-point drift left us outside
        # the 1e-6 window around the target.
        realized = _spectral_radius(w, rng_seed=rng_seed)
        if abs(realized - spectral_radius) > 1e-6:
            w = w * (spectral_radius / realized)
            realized = _spectral_radius(w, rng_seed=rng_seed)
            if abs(realized - spectral_radius) > 1e-6:
                raise ConfigurationError(
                    f"could not rescale spectral radius: target {spectral_radius}, "
                    f"realized {realized}"
                )
        w.sort_indices()
        w_in = rng.uniform(-input_scale, input_scale, (n_nodes, input_dim))
        bias = rng.uniform(-bias_scale, bias_scale, n_nodes)
        return ReservoirTopology(
            n_nodes=n_nodes,
            mean_degree=mean_degree,
            spectral_radius=spectral_radius,
            input_scale=input_scale,
            bias_scale=bias_scale,
            time_constant=time_constant,
            input_dim=input_dim,
            rng_seed=rng_seed,
            w=w,
            w_in=w_in,
            bias=bias,
        )
    raise ConfigurationError(
        f"reservoir spectrum stayed numerically zero after {max_retries} draws "
        f"(last radius {last_radius})"
    )


@dataclass(frozen=True)
class RcFeatures:
    """The trained pair (r_0, W_out) that specifies one forecaster.

    Flattening contract: [r_0 ; rows of W_out] giving a vector of length
    (m + 1) * N.
    """

    r_0: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        r_0 = np.asarray(self.r_0, dtype=float)
        w_out = np.asarray(self.w_out, dtype=float)
        if r_0.ndim != 1:
            raise DataError("r_0 must be a vector")
        if w_out.ndim != 2 or w_out.shape[1] != r_0.shape[0]:
            raise DataError("w_out must be (m, N) with N matching r_0")
        object.__setattr__(self, "r_0", r_0)
        object.__setattr__(self, "w_out", w_out)

    @property
    def n_nodes(self) -> int:
        return self.r_0.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w_out.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.r_0, self.w_out.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, n_nodes: int) -> "RcFeatures":
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size % n_nodes != 0 or vec.size < 2 * n_nodes:
            raise DataError(
                f"feature vector of length {vec.size} is not (m+1)*{n_nodes} with m >= 1"
            )
        m = vec.size // n_nodes - 1
        return cls(r_0=vec[:n_nodes], w_out=vec[n_nodes:].reshape(m, n_nodes))


@dataclass(frozen=True)
class TrainConfig:
    """Readout training settings."""

    alpha: float          # ridge regularization, >= 0
    t_init: float         # warm-up duration discarded before regression, seconds
    dt: float             # sampling/integration step, seconds

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.t_init < 0:
            raise ConfigurationError("t_init must be >= 0")
        if self.dt <= 0:
            raise ConfigurationError("dt must be > 0")

    def warmup_rows(self) -> int:
        return int(np.ceil(self.t_init / self.dt - 1e-9))


def drive(topology: ReservoirTopology, input_series: TimeSeries,
          r_start: np.ndarray | None = None) -> np.ndarray:
    """Run the reservoir open loop on an input signal.

    Returns the state trajectory, one row per input time: row n is the
    reservoir state at input time n (row 0 is the start state).
    """
    if input_series.dim != topology.input_dim:
        raise DataError(
            f"input has {input_series.dim} components, topology expects {topology.input_dim}"
        )
    dt = input_series.step
    kappa = dt / topology.time_constant
    n = topology.n_nodes
    r = np.zeros(n) if r_start is None else np.asarray(r_start, dtype=float).copy()
    if r.shape != (n,):
        raise DataError(f"r_start must have shape ({n},)")

    u = input_series.values
    w, w_in, bias = topology.w, topology.w_in, topology.bias
    states = np.empty((len(input_series), n))
    for step in range(len(input_series)):
        states[step] = r
        r = (1.0 - kappa) * r + kappa * np.tanh(w @ r + w_in @ u[step] + bias)
    if not np.all(np.isfinite(states)):
        raise DivergenceError("reservoir state left the finite range during driving")
    return states


def train_readout(states: np.ndarray, targets: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Ridge-regressed linear readout.

    Minimizes ||W_out R - O||^2 + alpha ||W_out||^2 over W_out via the
    regularized normal equations, with rows as samples:
    (S^T S + alpha I) W_out^T = S^T O.  Warm-up rows must already be
    excluded by the caller.
    """
    config.validate()
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if states.shape[0] != targets.shape[0]:
        raise DataError("states and targets must be row-aligned")
    n = states.shape[1]
    if config.alpha == 0 and np.linalg.matrix_rank(states) < n:
        raise SingularSystemError(
            "states are rank-deficient and alpha = 0; the readout is not unique"
        )
    gram = states.T @ states + config.alpha * np.eye(n)
    try:
        solution = np.linalg.solve(gram, states.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    return solution.T


def train_member(topology: ReservoirTopology, member: TimeSeries,
                 config: TrainConfig) -> RcFeatures:
    """Train one member's forecaster: self-prediction readout plus r_0.

    The reservoir is driven from r = 0 over the member; the readout maps
    state to the member's own observations (the desired output equals the
    input).  r_0 is the driven state at the first post-warm-up time stamp.
    """
    config.validate()
    step = member.step
    if not np.isclose(step, config.dt, rtol=1e-6, atol=1e-12):
        raise ConfigurationError(
            f"member step {step} does not match configured dt {config.dt}"
        )
    n_warm = config.warmup_rows()
    if len(member) - n_warm < 2:
        raise ConfigurationError(
            f"member leaves {len(member) - n_warm} rows after warm-up; need >= 2"
        )
    states = drive(topology, member)
    w_out = train_readout(states[n_warm:], member.values[n_warm:], config)
    return RcFeatures(r_0=states[n_warm].copy(), w_out=w_out)


def predict(topology: ReservoirTopology, features: RcFeatures, times: np.ndarray,
            dt: float, start_time: float | None = None) -> TimeSeries:
    """Closed-loop autonomous forecast evaluated at the requested times.

    Integration starts at ``start_time`` (default: times[0]) from state
    r_0 with the training step ``dt``; the output o(t) = W_out r(t) is
    linearly interpolated at times falling between integration steps.
    """
    if features.n_nodes != topology.n_nodes:
        raise DataError("feature dimension does not match topology")
    if features.output_dim != topology.input_dim:
        raise DataError("readout output dimension does not match topology input")
    times = np.asarray(times, dtype=float)
    m = features.output_dim
    if times.size == 0:
        return TimeSeries(times, np.empty((0, m)))
    t0 = float(times[0]) if start_time is None else float(start_time)
    if times[0] < t0 - 1e-9:
        raise ConfigurationError("requested times start before the forecast anchor")

    kappa = dt / topology.time_constant
    n_steps = int(np.ceil((times[-1] - t0) / dt - 1e-9))
    n_steps = max(n_steps, 0)
    w, w_in, bias = topology.w, topology.w_in, topology.bias
    outputs = np.empty((n_steps + 1, m))
    r = features.r_0.copy()
    w_out = features.w_out
    for step in range(n_steps + 1):
        o = w_out @ r
        outputs[step] = o
        if step == n_steps:
            break
        r = (1.0 - kappa) * r + kappa * np.tanh(w @ r + w_in @ o + bias)
    if not np.all(np.isfinite(outputs)):
        raise DivergenceError("closed-loop prediction left the finite range")

    grid = t0 + dt * np.arange(n_steps + 1)
    values = np.column_stack([np.interp(times, grid, outputs[:, j]) for j in range(m)])
    return TimeSeries(times, values)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_topology(topology: ReservoirTopology, path) -> None:
    """Persist as seed + hyperparameters plus a checksum of the realized arrays."""
    payload = topology.params_dict()
    payload["checksum"] = topology.checksum()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_topology(path) -> ReservoirTopology:
    """Rebuild from seed + hyperparameters and verify the checksum."""
    payload = json.loads(Path(path).read_text())
    checksum = payload.pop("checksum")
    topology = build_topology(**payload)
    if topology.checksum() != checksum:
        raise ConfigurationError(
            f"rebuilt topology checksum does not match the stored one ({path})"
        )
    return topology


def save_features(features_list: list, directory, topology: ReservoirTopology) -> None:
    """One flat .npy per member plus a JSON manifest of the ordering contract."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, features in enumerate(features_list):
        np.save(directory / f"member_{i:05d}.npy", features.flatten())
    manifest = {
        "member_count": len(features_list),
        "n_nodes": topology.n_nodes,
        "output_dim": topology.input_dim,
        "ordering": "r0_then_wout_rows",
        "topology_seed": topology.rng_seed,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_features(directory) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n_nodes = manifest["n_nodes"]
    return [
        RcFeatures.unflatten(np.load(directory / f"member_{i:05d}.npy"), n_nodes)
        for i in range(manifest["member_count"])
    ]
