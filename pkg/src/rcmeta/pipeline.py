"""End-to-end experiment orchestration over a persisted run directory.

Stages run in order and hand off through artifacts on disk, so any stage
can be re-invoked and any deleted downstream artifact can be reproduced
from upstream ones:

    generate     -> library/            one CSV per member + metadata
    topology     -> topology/           seed + hyperparameters + checksum
    features     -> features/           one .npy per member + manifest
    autoencoder  -> autoencoder/        model file, latents, training report
    fits         -> fits/signal_*/      signal, truth, fit, forecast CSVs
    evaluate     -> reports/scores.csv, reports/aggregates.json
    report       -> reports/report.{json,txt} + plot CSVs

All stage randomness derives from the master seed, so two runs with the
same config produce byte-identical metric reports.  Wall-clock timings
live only in the manifest, never in reports.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .autoencoder import (
    AutoencoderModel,
    encode_matrix,
    load_autoencoder,
    reconstruction_mse,
    save_autoencoder,
    train_autoencoder,
)
from .config import (
    ExperimentConfig,
    config_errors,
    derive_seed,
    save_config,
    validate_config,
)
from .errors import ConfigurationError, PipelineError
from .latent_search import SearchConfig, FitResult, fit, forecast, latent_bounds
from .metrics import ScoreReport, ValidTimeSpec, full_curve_mse, latent_pca_export, valid_time
from .reservoir import (
    RcFeatures,
    TrainConfig,
    build_topology,
    drive,
    load_features,
    load_topology,
    predict,
    save_features,
    save_topology,
    train_member,
    train_readout,
)
from .systems import LORENZ_LYAPUNOV_TIME, LibraryBundle, generate_library, sample_test_signal
from .timeseries import TimeSeries

STAGE_ORDER = ("generate", "topology", "features", "autoencoder", "fits",
               "evaluate", "report")

# Published sine-regression baselines rendered next to our measurement.
REFERENCE_SINE_MSE = {"maml": 0.208, "mela": 0.129}


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageRecord:
    completed: bool = False
    seconds: float = 0.0
    checksum: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunManifest:
    experiment: str
    master_seed: int
    stages: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    def record(self, stage: str, seconds: float, checksum: str | None = None) -> None:
        self.stages[stage] = StageRecord(completed=True, seconds=seconds,
                                         checksum=checksum)

    def record_failure(self, stage: str, error: str) -> None:
        self.stages[stage] = StageRecord(completed=False, error=error)

    def is_complete(self, stage: str) -> bool:
        rec = self.stages.get(stage)
        return bool(rec and rec.completed)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "master_seed": self.master_seed,
            "stages": {k: v.to_dict() for k, v in self.stages.items()},
            "versions": self.versions,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        manifest = cls(experiment=d["experiment"], master_seed=d["master_seed"],
                       versions=d.get("versions", {}))
        for name, rec in d.get("stages", {}).items():
            manifest.stages[name] = StageRecord(**rec)
        return manifest


def _versions() -> dict:
    return {
        "rcmeta": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "python": ".".join(map(str, sys.version_info[:3])),
    }


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Worker-pool plumbing.  Heavy shared state (library, topology, model) is
# published module-globally before forking so workers inherit it without
# pickling; results are gathered in index order so output is independent
# of scheduling.
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _features_worker(index: int) -> np.ndarray:
    config: ExperimentConfig = _CTX["config"]
    member = _CTX["members"][index]
    features = train_member(_CTX["topology"], member, config.train)
    return features.flatten()


def _fit_worker(index: int) -> dict:
    config: ExperimentConfig = _CTX["config"]
    topology = _CTX["topology"]
    model: AutoencoderModel = _CTX["model"]
    latents: np.ndarray = _CTX["latents"]
    anchor: float | None = _CTX["anchor"]

    sample_seed = derive_seed(config.master_seed, "test_signal", index)
    test = sample_test_signal(config.system, config.test_signal_mode,
                              config.test_signal_length, sample_seed,
                              eval_start=anchor)
    window_start = anchor if anchor is not None else float(test.signal.times[0])

    search = SearchConfig(
        bounds=_CTX["bounds"],
        max_global_iterations=config.search.max_global_iterations,
        max_evaluations=config.search.max_evaluations,
        initial_temp=config.search.initial_temp,
        visit=config.search.visit,
        accept=config.search.accept,
        nm_max_evaluations=config.search.nm_max_evaluations,
        nm_tolerance=config.search.nm_tolerance,
        warm_start_sample=config.search.warm_start_sample,
        rng_seed=derive_seed(config.master_seed, "fit", index),
    )
    result = fit(model, topology, test.signal, search, config.train.dt,
                 window_start=window_start, library_latents=latents)

    horizon = _CTX["horizon_times"] if _CTX["horizon_times"] is not None else test.truth.times
    prediction = forecast(model, topology, result, horizon, config.train.dt)
    return {
        "index": index,
        "signal_times": test.signal.times,
        "signal_values": test.signal.values,
        "truth_times": test.truth.times,
        "truth_values": test.truth.values,
        "params": test.params,
        "fit": result.to_dict(),
        "forecast_times": prediction.times,
        "forecast_values": prediction.values,
        "window_start": window_start,
    }


def _run_indexed(worker, count: int, jobs: int) -> list:
    if jobs <= 1:
        return [worker(i) for i in range(count)]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=jobs) as pool:
        return pool.map(worker, range(count))


# ---------------------------------------------------------------------------
# The run itself
# ---------------------------------------------------------------------------

class ExperimentRun:
    """One experiment bound to a run directory; stages load-or-compute."""

    def __init__(self, config: ExperimentConfig, run_dir, jobs: int = 1):
        diags = validate_config(config)
        errors = config_errors(diags)
        if errors:
            raise ConfigurationError(
                "invalid config: " + "; ".join(d.message for d in errors)
            )
        self.config = config
        self.run_dir = Path(run_dir)
        self.jobs = max(1, int(jobs))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.library_dir = self.run_dir / "library"
        self.topology_file = self.run_dir / "topology" / "topology.json"
        self.features_dir = self.run_dir / "features"
        self.autoencoder_dir = self.run_dir / "autoencoder"
        self.fits_dir = self.run_dir / "fits"
        self.reports_dir = self.run_dir / "reports"
        self.manifest_file = self.run_dir / "manifest.json"
        if self.manifest_file.exists():
            self.manifest = RunManifest.load(self.manifest_file)
        else:
            self.manifest = RunManifest(experiment=config.experiment,
                                        master_seed=config.master_seed,
                                        versions=_versions())
        save_config(config, self.run_dir / "config.json")

    # -- plumbing ---------------------------------------------------------

    def _stage_done(self, stage: str, key_artifact: Path) -> bool:
        return self.manifest.is_complete(stage) and key_artifact.exists()

    def _require(self, *stages: str) -> None:
        missing = [s for s in stages if not self.manifest.is_complete(s)]
        if missing:
            raise PipelineError(
                f"upstream stage(s) not completed: {', '.join(missing)}"
            )

    def _finish(self, stage: str, seconds: float, key_artifact: Path | None) -> None:
        checksum = _sha256_file(key_artifact) if key_artifact else None
        self.manifest.record(stage, seconds, checksum)
        self.manifest.save(self.manifest_file)

    @property
    def warmup_rows(self) -> int:
        return self.config.train.warmup_rows()

    @property
    def anchor_time(self) -> float | None:
        """Forecast anchor: where decoded initial states live on the time axis.

        Function families anchor at the first post-warm-up grid time (the
        start of the window the trained forecasters reproduce); the
        autonomous Lorenz family anchors at each test signal's own start.
        """
        if self.config.experiment == "lorenz":
            return None
        return float(self.config.system.grid.times()[self.warmup_rows])

    # -- stages -----------------------------------------------------------

    def stage_generate(self) -> LibraryBundle:
        key = self.library_dir / "metadata.json"
        if self._stage_done("generate", key):
            return LibraryBundle.load_dir(self.library_dir)
        start = time.perf_counter()
        bundle = generate_library(self.config.system)
        bundle.save_dir(self.library_dir)
        self._finish("generate", time.perf_counter() - start, key)
        return bundle

    def stage_topology(self):
        self._require("generate")
        if self._stage_done("topology", self.topology_file):
            return load_topology(self.topology_file)
        start = time.perf_counter()
        r = self.config.reservoir
        topology = build_topology(
            n_nodes=r.n_nodes,
            mean_degree=r.mean_degree,
            spectral_radius=r.spectral_radius,
            input_scale=r.input_scale,
            bias_scale=r.bias_scale,
            time_constant=r.time_constant,
            input_dim=self.config.observed_dim,
            rng_seed=derive_seed(self.config.master_seed, "topology"),
        )
        self.topology_file.parent.mkdir(parents=True, exist_ok=True)
        save_topology(topology, self.topology_file)
        self._finish("topology", time.perf_counter() - start, self.topology_file)
        return topology

    def stage_features(self) -> list:
        self._require("generate", "topology")
        key = self.features_dir / "manifest.json"
        if self._stage_done("features", key):
            return load_features(self.features_dir)
        start = time.perf_counter()
        bundle = self.stage_generate()
        topology = self.stage_topology()
        _CTX.update(config=self.config, topology=topology, members=bundle.members)
        flats = _run_indexed(_features_worker, len(bundle), self.jobs)
        features = [RcFeatures.unflatten(f, topology.n_nodes) for f in flats]
        save_features(features, self.features_dir, topology)
        self._finish("features", time.perf_counter() - start, key)
        return features

    def stage_autoencoder(self):
        self._require("features")
        model_file = self.autoencoder_dir / "model.bin"
        if self._stage_done("autoencoder", model_file):
            model = load_autoencoder(model_file)
            latents = np.load(self.autoencoder_dir / "latents.npy")
            return model, latents
        start = time.perf_counter()
        features = self.stage_features()
        matrix = np.stack([f.flatten() for f in features])
        ae = self.config.autoencoder
        model, report = train_autoencoder(
            matrix,
            ae.layer_dims(matrix.shape[1]),
            learning_rate=ae.learning_rate,
            validation_fraction=ae.validation_fraction,
            patience=ae.patience,
            epoch_cap=ae.epoch_cap,
            rng_seed=derive_seed(self.config.master_seed, "autoencoder"),
            feature_shape=(self.config.reservoir.n_nodes, self.config.observed_dim),
        )
        latents = encode_matrix(model, matrix)
        self.autoencoder_dir.mkdir(parents=True, exist_ok=True)
        save_autoencoder(model, model_file)
        np.save(self.autoencoder_dir / "latents.npy", latents)
        report_dict = report.to_dict()
        report_dict["library_reconstruction_mse"] = reconstruction_mse(model, matrix)
        _json_dump(report_dict, self.autoencoder_dir / "training_report.json")
        self._finish("autoencoder", time.perf_counter() - start, model_file)
        return model, latents

    def stage_fits(self) -> None:
        self._require("autoencoder")
        key = self.fits_dir / "manifest.json"
        if self._stage_done("fits", key):
            return
        start = time.perf_counter()
        topology = self.stage_topology()
        model, latents = self.stage_autoencoder()
        anchor = self.anchor_time
        if self.config.experiment == "lorenz":
            horizon = None  # each signal's own dense grid
        else:
            horizon = self.config.system.grid.times()[self.warmup_rows:]
        _CTX.update(
            config=self.config,
            topology=topology,
            model=model,
            latents=latents,
            bounds=latent_bounds(latents, self.config.search.bounds_margin),
            anchor=anchor,
            horizon_times=horizon,
        )
        results = _run_indexed(_fit_worker, self.config.test_signal_count, self.jobs)
        for res in results:
            sig_dir = self.fits_dir / f"signal_{res['index']:05d}"
            sig_dir.mkdir(parents=True, exist_ok=True)
            TimeSeries(res["signal_times"], res["signal_values"]).to_csv(sig_dir / "signal.csv")
            truth = TimeSeries(res["truth_times"], res["truth_values"])
            truth.to_csv(sig_dir / "truth.csv")
            _json_dump(res["params"], sig_dir / "params.json")
            _json_dump(res["fit"], sig_dir / "fit.json")
            pred = TimeSeries(res["forecast_times"], res["forecast_values"])
            pred.to_csv(sig_dir / "forecast.csv")
            frame = {"t": pred.times}
            for j in range(truth.dim):
                frame[f"truth_y{j + 1}"] = np.interp(pred.times, truth.times,
                                                     truth.values[:, j])
            for j in range(pred.dim):
                frame[f"forecast_y{j + 1}"] = pred.values[:, j]
            pd.DataFrame(frame).to_csv(sig_dir / "truth_vs_forecast.csv", index=False)
        _json_dump(
            {"count": len(results), "window_start_mode":
             "grid" if anchor is not None else "per-signal"},
            key,
        )
        self._finish("fits", time.perf_counter() - start, key)

    # -- evaluation -------------------------------------------------------

    def _load_fit_artifacts(self, index: int):
        sig_dir = self.fits_dir / f"signal_{index:05d}"
        signal = TimeSeries.from_csv(sig_dir / "signal.csv")
        truth = TimeSeries.from_csv(sig_dir / "truth.csv")
        prediction = TimeSeries.from_csv(sig_dir / "forecast.csv")
        fit_info = json.loads((sig_dir / "fit.json").read_text())
        params = json.loads((sig_dir / "params.json").read_text())
        return signal, truth, prediction, fit_info, params

    def stage_evaluate(self) -> dict:
        self._require("fits")
        key = self.reports_dir / "aggregates.json"
        if self._stage_done("evaluate", key):
            return json.loads(key.read_text())
        start = time.perf_counter()
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        if self.config.experiment == "lorenz":
            aggregates = self._evaluate_lorenz()
        else:
            aggregates = self._evaluate_function_family()
        _json_dump(aggregates, key)
        self._finish("evaluate", time.perf_counter() - start, key)
        return aggregates

    def _evaluate_function_family(self) -> dict:
        n_warm = self.warmup_rows
        values, extras = [], []
        for i in range(self.config.test_signal_count):
            _, truth, prediction, fit_info, params = self._load_fit_artifacts(i)
            mse = full_curve_mse(prediction, truth.slice(n_warm))
            values.append(mse)
            extra = {"fit_loss": fit_info["loss"],
                     "evaluations": fit_info["evaluations"]}
            if "family" in params:
                extra["family"] = params["family"]
            extras.append(extra)
        score = ScoreReport.from_values("full_curve_mse", values, extra=extras)
        pd.DataFrame(score.per_signal).to_csv(self.reports_dir / "scores.csv", index=False)
        return {"metric": "full_curve_mse", "scores": score.to_dict()}

    def _evaluate_lorenz(self) -> dict:
        spec = ValidTimeSpec(lyapunov_time=LORENZ_LYAPUNOV_TIME)
        skip = self.config.test_signal_length - 1  # score from the end of the observed window
        marc_values, short_values, extras = [], [], []
        topology = self.stage_topology()
        short_cfg = TrainConfig(alpha=self.config.train.alpha, t_init=0.0,
                                dt=self.config.train.dt)
        for i in range(self.config.test_signal_count):
            signal, truth, prediction, fit_info, _ = self._load_fit_artifacts(i)
            marc_tv = valid_time(prediction.slice(skip), truth.slice(skip), spec)
            marc_values.append(marc_tv)
            # Plain RC trained on only the observed points, run on from the
            # last observed state.
            states = drive(topology, signal)
            w_out = train_readout(states, signal.values, short_cfg)
            short_features = RcFeatures(r_0=states[-1].copy(), w_out=w_out)
            short_pred = predict(topology, short_features, truth.times[skip:],
                                 self.config.train.dt, start_time=truth.times[skip])
            short_values.append(valid_time(short_pred, truth.slice(skip), spec))
            extras.append({"fit_loss": fit_info["loss"],
                           "evaluations": fit_info["evaluations"],
                           "short_baseline_valid_time": short_values[-1]})

        # Full-data baseline: the trained library forecasters replayed over
        # their own members' evaluation windows.
        bundle = self.stage_generate()
        features = self.stage_features()
        n_warm = self.warmup_rows
        baseline_count = min(20, len(bundle))
        baseline_values = []
        for i in range(baseline_count):
            member = bundle.members[i]
            window = member.slice(n_warm)
            pred = predict(topology, features[i], window.times, self.config.train.dt,
                           start_time=window.times[0])
            baseline_values.append(valid_time(pred, window, spec))

        marc = ScoreReport.from_values("valid_time_lyapunov", marc_values, extra=extras)
        short = ScoreReport.from_values("valid_time_lyapunov", short_values)
        baseline = ScoreReport.from_values("valid_time_lyapunov", baseline_values)
        pd.DataFrame(marc.per_signal).to_csv(self.reports_dir / "scores.csv", index=False)
        return {
            "metric": "valid_time_lyapunov",
            "scores": marc.to_dict(),
            "short_baseline": short.to_dict(),
            "full_data_baseline": baseline.to_dict(),
            "lyapunov_time_seconds": LORENZ_LYAPUNOV_TIME,
        }

    # -- reporting --------------------------------------------------------

    def stage_report(self) -> dict:
        self._require("evaluate")
        start = time.perf_counter()
        aggregates = json.loads((self.reports_dir / "aggregates.json").read_text())
        ae_report = json.loads(
            (self.autoencoder_dir / "training_report.json").read_text()
        )
        latents = np.load(self.autoencoder_dir / "latents.npy")
        bundle_meta = json.loads((self.library_dir / "metadata.json").read_text())

        pca = latent_pca_export(latents, bundle_meta["ground_truth_params"])
        pca.to_csv(self.reports_dir / "pca.csv", index=False)

        scores = aggregates["scores"]
        paths = {
            "scores": "reports/scores.csv",
            "pca": "reports/pca.csv",
            "example_fits": [
                f"fits/signal_{i:05d}/truth_vs_forecast.csv"
                for i in range(min(4, self.config.test_signal_count))
            ],
        }
        report = {
            "experiment": self.config.experiment,
            "profile": self.config.profile,
            "master_seed": self.config.master_seed,
            "test_signal_count": self.config.test_signal_count,
            "metric": aggregates["metric"],
            "aggregates": {k: scores[k] for k in ("mean", "median", "stddev")},
            "autoencoder": ae_report,
            "paths": paths,
        }

        if self.config.experiment == "sine":
            report["comparison_mse"] = {
                "maml_reported": REFERENCE_SINE_MSE["maml"],
                "mela_reported": REFERENCE_SINE_MSE["mela"],
                "this_run_mean": scores["mean"],
            }
        if self.config.experiment == "lorenz":
            report["valid_times_lyapunov"] = {
                "marc_mean": scores["mean"],
                "full_data_baseline_mean": aggregates["full_data_baseline"]["mean"],
                "short_baseline_mean": aggregates["short_baseline"]["mean"],
            }
        if self.config.experiment == "multimodal":
            mses = [row["value"] for row in scores["per_signal"]]
            losses = [row["fit_loss"] for row in scores["per_signal"]]
            frame = pd.DataFrame({
                "fit_loss": losses,
                "full_curve_mse": mses,
                "family": [row.get("family") for row in scores["per_signal"]],
            })
            frame.to_csv(self.reports_dir / "loss_vs_mse.csv", index=False)
            from scipy.stats import spearmanr
            rho = spearmanr(losses, mses).statistic
            report["loss_mse_spearman"] = float(rho)
            paths["loss_vs_mse"] = "reports/loss_vs_mse.csv"
        if scores.get("histogram"):
            hist = scores["histogram"]
            pd.DataFrame({
                "bin_left_log10": hist["bin_edges_log10"][:-1],
                "bin_right_log10": hist["bin_edges_log10"][1:],
                "count": hist["counts"],
            }).to_csv(self.reports_dir / "histogram.csv", index=False)
            paths["histogram"] = "reports/histogram.csv"

        report_file = self.reports_dir / "report.json"
        _json_dump(report, report_file)
        (self.reports_dir / "report.txt").write_text(_render_text_report(report))
        self._finish("report", time.perf_counter() - start, report_file)
        return report

    # -- driver -----------------------------------------------------------

    def run_all(self) -> RunManifest:
        stages = (
            ("generate", self.stage_generate),
            ("topology", self.stage_topology),
            ("features", self.stage_features),
            ("autoencoder", self.stage_autoencoder),
            ("fits", self.stage_fits),
            ("evaluate", self.stage_evaluate),
            ("report", self.stage_report),
        )
        for name, fn in stages:
            try:
                fn()
            except Exception as exc:
                self.manifest.record_failure(name, f"{type(exc).__name__}: {exc}")
                self.manifest.save(self.manifest_file)
                raise PipelineError(f"stage {name!r} failed: {exc}") from exc
        return self.manifest


def run_pipeline(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> RunManifest:
    """Execute all stages into ``out_dir`` (resumable), returning the manifest."""
    target = out_dir or config.out_dir
    if target is None:
        raise ConfigurationError("no output directory given")
    return ExperimentRun(config, target, jobs=jobs).run_all()


def _render_text_report(report: dict) -> str:
    lines = [
        f"experiment: {report['experiment']} (profile {report['profile']}, "
        f"seed {report['master_seed']})",
        f"test signals: {report['test_signal_count']}",
        f"metric: {report['metric']}",
        "aggregates: " + ", ".join(
            f"{k}={v:.6g}" for k, v in report["aggregates"].items()
        ),
        "autoencoder: "
        f"epochs={report['autoencoder']['epochs_run']}, "
        f"stop={report['autoencoder']['stop_reason']}, "
        f"validation_mse={report['autoencoder']['final_validation_mse']:.3g}, "
        f"library_mse={report['autoencoder']['library_reconstruction_mse']:.3g}",
    ]
    if "comparison_mse" in report:
        c = report["comparison_mse"]
        lines.append("comparison (full-curve MSE):")
        lines.append(f"  maml (reported)  {c['maml_reported']:.4f}")
        lines.append(f"  mela (reported)  {c['mela_reported']:.4f}")
        lines.append(f"  this run (mean)  {c['this_run_mean']:.4f}")
    if "valid_times_lyapunov" in report:
        v = report["valid_times_lyapunov"]
        lines.append("valid times (lyapunov units):")
        lines.append(f"  full-data baseline mean  {v['full_data_baseline_mean']:.3f}")
        lines.append(f"  short-data baseline mean {v['short_baseline_mean']:.3f}")
        lines.append(f"  latent-fit mean          {v['marc_mean']:.3f}")
    if "loss_mse_spearman" in report:
        lines.append(f"loss/MSE spearman: {report['loss_mse_spearman']:.3f}")
    lines.append("artifact paths: " + json.dumps(report["paths"], sort_keys=True))
    return "\n".join(lines) + "\n"
