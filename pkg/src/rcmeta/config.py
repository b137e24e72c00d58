"""Experiment configuration: dataclasses, published defaults, validation.

``paper`` profiles carry the published hyperparameters for each
experiment; ``smoke`` profiles are scaled-down variants for CI and quick
iteration.  All stage randomness fans out deterministically from one
master seed via :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .reservoir import TrainConfig
from .systems import (
    FAMILY_DOF,
    FAMILY_OBSERVED_DIM,
    SamplingGrid,
    SystemSpec,
    lorenz_system_spec,
    multimodal_system_spec,
    sine_system_spec,
)

EXPERIMENTS = ("sine", "lorenz", "multimodal")
PROFILES = ("paper", "smoke")

_FAMILY_OF_EXPERIMENT = {"sine": "sine", "lorenz": "lorenz63", "multimodal": "multimodal"}


def derive_seed(master_seed: int, *parts) -> int:
    """Deterministic per-stage / per-item seed fan-out from the master seed."""
    text = "|".join([str(master_seed), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass(frozen=True)
class ReservoirParams:
    n_nodes: int
    mean_degree: float
    spectral_radius: float
    input_scale: float
    bias_scale: float
    time_constant: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class AutoencoderParams:
    hidden1: int
    hidden2: int
    latent_dim: int
    learning_rate: float = 1e-4
    validation_fraction: float = 0.1
    patience: int = 200
    epoch_cap: int = 20000

    def layer_dims(self, feature_dim: int) -> tuple:
        return (feature_dim, self.hidden1, self.hidden2, self.latent_dim,
                self.hidden2, self.hidden1, feature_dim)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SearchParams:
    """Latent-search knobs; the box itself is derived from encoded latents."""

    max_global_iterations: int = 100
    max_evaluations: int = 2000
    bounds_margin: float = 0.5
    warm_start_sample: int = 20
    initial_temp: float = 5230.0
    visit: float = 2.62
    accept: float = -5.0
    nm_max_evaluations: int = 500
    nm_tolerance: float = 1e-8

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    profile: str
    system: SystemSpec
    reservoir: ReservoirParams
    train: TrainConfig
    autoencoder: AutoencoderParams
    search: SearchParams
    test_signal_count: int
    test_signal_mode: str    # "random_times" | "sequential"
    test_signal_length: int
    master_seed: int
    out_dir: str | None = None

    @property
    def observed_dim(self) -> int:
        return FAMILY_OBSERVED_DIM[self.system.family]

    @property
    def feature_dim(self) -> int:
        return (self.observed_dim + 1) * self.reservoir.n_nodes

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "profile": self.profile,
            "system": self.system.to_dict(),
            "reservoir": self.reservoir.to_dict(),
            "train": {"alpha": self.train.alpha, "t_init": self.train.t_init,
                      "dt": self.train.dt},
            "autoencoder": self.autoencoder.to_dict(),
            "search": self.search.to_dict(),
            "test_signal_count": self.test_signal_count,
            "test_signal_mode": self.test_signal_mode,
            "test_signal_length": self.test_signal_length,
            "master_seed": self.master_seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            experiment=d["experiment"],
            profile=d.get("profile", "custom"),
            system=SystemSpec.from_dict(d["system"]),
            reservoir=ReservoirParams(**d["reservoir"]),
            train=TrainConfig(**d["train"]),
            autoencoder=AutoencoderParams(**d["autoencoder"]),
            search=SearchParams(**d["search"]),
            test_signal_count=d["test_signal_count"],
            test_signal_mode=d["test_signal_mode"],
            test_signal_length=d["test_signal_length"],
            master_seed=d["master_seed"],
            out_dir=d.get("out_dir"),
        )


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def sine_paper(master_seed: int = 0) -> ExperimentConfig:
    system = sine_system_spec(sample_count=100, rng_seed=derive_seed(master_seed, "library"))
    return ExperimentConfig(
        experiment="sine",
        profile="paper",
        system=system,
        reservoir=ReservoirParams(n_nodes=1000, mean_degree=100, spectral_radius=1.0,
                                  input_scale=1.0, bias_scale=1.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-6, t_init=1.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=200, hidden2=200, latent_dim=4),
        search=SearchParams(max_evaluations=2000),
        test_signal_count=100,
        test_signal_mode="random_times",
        test_signal_length=10,
        master_seed=master_seed,
    )


def sine_smoke(master_seed: int = 0) -> ExperimentConfig:
    system = sine_system_spec(sample_count=40, rng_seed=derive_seed(master_seed, "library"),
                              grid=SamplingGrid(-6.0, 5.0, 400))
    return ExperimentConfig(
        experiment="sine",
        profile="smoke",
        system=system,
        reservoir=ReservoirParams(n_nodes=200, mean_degree=20, spectral_radius=1.0,
                                  input_scale=1.0, bias_scale=1.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-6, t_init=1.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=100, hidden2=100, latent_dim=4,
                                      epoch_cap=8000),
        search=SearchParams(max_evaluations=700),
        test_signal_count=10,
        test_signal_mode="random_times",
        test_signal_length=10,
        master_seed=master_seed,
    )


def lorenz_paper(master_seed: int = 0) -> ExperimentConfig:
    system = lorenz_system_spec(sample_count=1000, rng_seed=derive_seed(master_seed, "library"))
    return ExperimentConfig(
        experiment="lorenz",
        profile="paper",
        system=system,
        reservoir=ReservoirParams(n_nodes=1000, mean_degree=100, spectral_radius=0.8,
                                  input_scale=0.05, bias_scale=0.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-4, t_init=10.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=600, hidden2=200, latent_dim=7),
        search=SearchParams(max_evaluations=2000),
        test_signal_count=20,
        test_signal_mode="sequential",
        test_signal_length=10,
        master_seed=master_seed,
    )


def lorenz_smoke(master_seed: int = 0) -> ExperimentConfig:
    system = lorenz_system_spec(sample_count=30, rng_seed=derive_seed(master_seed, "library"),
                                grid=SamplingGrid.from_step(0.0, 0.01, 1500))
    return ExperimentConfig(
        experiment="lorenz",
        profile="smoke",
        system=system,
        reservoir=ReservoirParams(n_nodes=200, mean_degree=20, spectral_radius=0.8,
                                  input_scale=0.05, bias_scale=0.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-4, t_init=10.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=150, hidden2=60, latent_dim=7,
                                      epoch_cap=6000),
        search=SearchParams(max_evaluations=800),
        test_signal_count=5,
        test_signal_mode="sequential",
        test_signal_length=10,
        master_seed=master_seed,
    )


def multimodal_paper(master_seed: int = 0) -> ExperimentConfig:
    system = multimodal_system_spec(sample_count=1000, rng_seed=derive_seed(master_seed, "library"))
    return ExperimentConfig(
        experiment="multimodal",
        profile="paper",
        system=system,
        reservoir=ReservoirParams(n_nodes=1000, mean_degree=100, spectral_radius=1.0,
                                  input_scale=1.0, bias_scale=1.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-6, t_init=1.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=200, hidden2=200, latent_dim=7),
        search=SearchParams(max_evaluations=2000),
        test_signal_count=200,
        test_signal_mode="random_times",
        test_signal_length=10,
        master_seed=master_seed,
    )


def multimodal_smoke(master_seed: int = 0) -> ExperimentConfig:
    system = multimodal_system_spec(sample_count=40, rng_seed=derive_seed(master_seed, "library"),
                                    grid=SamplingGrid(-6.0, 5.0, 400))
    return ExperimentConfig(
        experiment="multimodal",
        profile="smoke",
        system=system,
        reservoir=ReservoirParams(n_nodes=200, mean_degree=20, spectral_radius=1.0,
                                  input_scale=1.0, bias_scale=1.5, time_constant=1.0),
        train=TrainConfig(alpha=5e-6, t_init=1.0, dt=system.grid.step),
        autoencoder=AutoencoderParams(hidden1=100, hidden2=100, latent_dim=5,
                                      epoch_cap=8000),
        search=SearchParams(max_evaluations=700),
        test_signal_count=8,
        test_signal_mode="random_times",
        test_signal_length=10,
        master_seed=master_seed,
    )


_PROFILE_BUILDERS = {
    ("sine", "paper"): sine_paper,
    ("sine", "smoke"): sine_smoke,
    ("lorenz", "paper"): lorenz_paper,
    ("lorenz", "smoke"): lorenz_smoke,
    ("multimodal", "paper"): multimodal_paper,
    ("multimodal", "smoke"): multimodal_smoke,
}


def build_profile(experiment: str, profile: str, master_seed: int = 0) -> ExperimentConfig:
    try:
        builder = _PROFILE_BUILDERS[(experiment, profile)]
    except KeyError:
        raise ConfigurationError(
            f"no profile {profile!r} for experiment {experiment!r}; "
            f"experiments: {EXPERIMENTS}, profiles: {PROFILES}"
        ) from None
    return builder(master_seed)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str


def validate_config(config: ExperimentConfig) -> list:
    """Collect configuration errors and advisory warnings without raising."""
    diags: list = []

    def err(msg):
        diags.append(Diagnostic("error", msg))

    def warn(msg):
        diags.append(Diagnostic("warning", msg))

    if config.experiment not in EXPERIMENTS:
        err(f"unknown experiment {config.experiment!r}")
    elif config.system.family != _FAMILY_OF_EXPERIMENT[config.experiment]:
        err(f"experiment {config.experiment!r} does not match family "
            f"{config.system.family!r}")

    try:
        config.system.validate()
    except ConfigurationError as exc:
        err(str(exc))

    r = config.reservoir
    if r.n_nodes < 1:
        err("reservoir n_nodes must be >= 1")
    if not (0 < r.mean_degree <= r.n_nodes):
        err("reservoir mean_degree must satisfy 0 < k <= n_nodes")
    if r.spectral_radius <= 0:
        err("reservoir spectral_radius must be > 0")
    if r.input_scale < 0 or r.bias_scale < 0:
        err("reservoir scales must be >= 0")
    if r.time_constant <= 0:
        err("reservoir time_constant must be > 0")

    if config.train.alpha < 0:
        err("ridge alpha must be >= 0")
    if config.train.t_init < 0:
        err("warm-up t_init must be >= 0")
    if config.train.dt <= 0:
        err("dt must be > 0")
    elif not np.isclose(config.train.dt, config.system.grid.step, rtol=1e-6):
        err(f"train dt {config.train.dt} does not match grid step "
            f"{config.system.grid.step}")

    a = config.autoencoder
    if min(a.hidden1, a.hidden2, a.latent_dim) < 1:
        err("autoencoder layer dims must be >= 1")
    if a.learning_rate <= 0:
        err("learning_rate must be > 0")
    if not (0 < a.validation_fraction < 1):
        err("validation_fraction must lie in (0, 1)")
    if a.patience < 1 or a.epoch_cap < 1:
        err("patience and epoch_cap must be >= 1")

    s = config.search
    if s.max_global_iterations < 1 or s.max_evaluations < 1:
        err("search iteration/evaluation budgets must be >= 1")
    if s.bounds_margin < 0:
        err("bounds_margin must be >= 0")

    if config.test_signal_count < 1:
        err("test_signal_count must be >= 1")
    if config.test_signal_length < 2:
        err("test_signal_length must be >= 2")
    if config.test_signal_mode not in ("random_times", "sequential"):
        err(f"unknown test_signal_mode {config.test_signal_mode!r}")

    family = config.system.family
    if family in FAMILY_DOF:
        dim_y = FAMILY_OBSERVED_DIM[family]
        dof = FAMILY_DOF[family]
        if config.test_signal_length * dim_y <= dof:
            warn(
                f"test signals carry {config.test_signal_length}*{dim_y} observations "
                f"but the family has {dof} degrees of freedom; fits are underdetermined"
            )

    if config.test_signal_mode == "sequential" and \
            config.test_signal_length > config.system.grid.n_points:
        err("sequential test signals cannot exceed the grid length")

    return diags


def config_errors(diags: list) -> list:
    return [d for d in diags if d.severity == "error"]
