"""Deep feedforward autoencoder over flattened readout features.

Architecture: seven unit layers
    (m+1)N -> h1 -> h2 -> latent -> h2' -> h1' -> (m+1)N
with sigmoid activations on every hidden layer and a linear output layer.
Training minimizes mean squared reconstruction error with full-batch Adam
and early stopping on a held-out validation split.

Raw readout weights span several orders of magnitude and would saturate
the sigmoids, so inputs pass through a per-component affine normalizer
mapping the library range onto [0.1, 0.9]; the normalizer is stored in
the model and inverted on decoding, making the decoder self-contained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DataError, TrainingError
from .reservoir import RcFeatures

_NORM_LO = 0.1
_NORM_HI = 0.9

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-component affine map sending the library range to [0.1, 0.9].

    Components that are constant across the library map to 0.5 and invert
    back to the stored constant.
    """

    scale: np.ndarray
    offset: np.ndarray
    constant_mask: np.ndarray
    constant_values: np.ndarray

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = x * self.scale + self.offset
        if self.constant_mask.any():
            out[:, self.constant_mask] = 0.5
        return out

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        safe_scale = np.where(self.constant_mask, 1.0, self.scale)
        out = (y - self.offset) / safe_scale
        if self.constant_mask.any():
            out[:, self.constant_mask] = self.constant_values[self.constant_mask]
        return out

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.tolist(),
            "offset": self.offset.tolist(),
            "constant_mask": self.constant_mask.astype(int).tolist(),
            "constant_values": self.constant_values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        return cls(
            scale=np.asarray(d["scale"], dtype=float),
            offset=np.asarray(d["offset"], dtype=float),
            constant_mask=np.asarray(d["constant_mask"], dtype=bool),
            constant_values=np.asarray(d["constant_values"], dtype=float),
        )


def fit_normalizer(features: np.ndarray) -> FeatureNormalizer:
    """Fit the affine normalizer to a matrix of library feature vectors."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DataError("need a matrix of at least 2 feature vectors")
    if not np.all(np.isfinite(features)):
        raise DataError("features contain non-finite entries")
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = hi - lo
    constant = span == 0
    safe_span = np.where(constant, 1.0, span)
    scale = (_NORM_HI - _NORM_LO) / safe_span
    offset = _NORM_LO - lo * scale
    return FeatureNormalizer(
        scale=np.where(constant, 0.0, scale),
        offset=np.where(constant, 0.5, offset),
        constant_mask=constant,
        constant_values=np.where(constant, lo, 0.0),
    )


@dataclass
class AutoencoderModel:
    """Trained autoencoder: layer parameters plus the input normalizer.

    ``feature_shape`` records (n_nodes, output_dim) so decoded vectors can
    be unflattened back into RcFeatures.
    """

    layer_dims: tuple
    weights: list
    biases: list
    normalizer: FeatureNormalizer
    feature_shape: tuple  # (n_nodes, output_dim)

    LATENT_LAYER = 3  # index into layer_dims; encoder spans transforms 0..2

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) != 7:
            raise ConfigurationError("expected 7 layer dims (input, 5 hidden, output)")
        if self.layer_dims[0] != self.layer_dims[-1]:
            raise ConfigurationError("autoencoder input and output dims must match")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def latent_dim(self) -> int:
        return self.layer_dims[self.LATENT_LAYER]


def _init_params(layer_dims, rng: np.random.Generator):
    """Glorot-uniform weights, zero biases; keeps sigmoids in their active range."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _forward(weights, biases, x: np.ndarray):
    """All layer activations; sigmoid everywhere except the linear output."""
    activations = [x]
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        a = z if i == last else expit(z)
        activations.append(a)
    return activations


def _loss_and_grads(weights, biases, x: np.ndarray):
    """Mean squared reconstruction error and its parameter gradients."""
    activations = _forward(weights, biases, x)
    recon = activations[-1]
    diff = recon - x
    loss = float(np.mean(diff**2))
    delta = (2.0 / diff.size) * diff
    grads_w = [None] * len(weights)
    grads_b = [None] * len(biases)
    for i in range(len(weights) - 1, -1, -1):
        a_prev = activations[i]
        grads_w[i] = a_prev.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            a = activations[i]  # sigmoid output of layer i
            delta = (delta @ weights[i].T) * (a * (1.0 - a))
    return loss, grads_w, grads_b


def _reconstruction_mse(weights, biases, x: np.ndarray) -> float:
    recon = _forward(weights, biases, x)[-1]
    return float(np.mean((recon - x) ** 2))


@dataclass
class TrainingReport:
    """What happened during autoencoder training."""

    epochs_run: int
    final_training_mse: float
    final_validation_mse: float
    stop_reason: str  # "early-stop" | "epoch-cap"
    best_epoch: int
    training_history: list = field(default_factory=list)
    validation_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "final_training_mse": self.final_training_mse,
            "final_validation_mse": self.final_validation_mse,
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
        }


def train_autoencoder(features: np.ndarray, layer_dims, learning_rate: float = 1e-4,
                      validation_fraction: float = 0.1, patience: int = 200,
                      epoch_cap: int = 20000, rng_seed: int = 0,
                      feature_shape: tuple | None = None):
    """Train on library feature vectors; returns (model, report).

    Full-batch Adam on the normalized features, with the last 10% of a
    seed-deterministic shuffle held out for validation.  Training stops
    when validation MSE has not improved for ``patience`` epochs or at the
    epoch cap, and the parameters achieving the best validation error seen
    are returned.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 10:
        raise DataError("need at least 10 feature vectors to train")
    layer_dims = tuple(int(d) for d in layer_dims)
    if layer_dims[0] != features.shape[1] or layer_dims[-1] != features.shape[1]:
        raise ConfigurationError(
            f"layer dims {layer_dims} do not match feature dimension {features.shape[1]}"
        )
    if not (0 < validation_fraction < 1):
        raise ConfigurationError("validation_fraction must lie in (0, 1)")
    if patience < 1 or epoch_cap < 1:
        raise ConfigurationError("patience and epoch_cap must be >= 1")
    if feature_shape is None:
        feature_shape = (features.shape[1] // 2, 1)

    normalizer = fit_normalizer(features)
    x = normalizer.transform(features)

    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(x.shape[0])
    n_val = max(1, int(round(validation_fraction * x.shape[0])))
    train_idx, val_idx = perm[:-n_val], perm[-n_val:]
    x_train, x_val = x[train_idx], x[val_idx]

    weights, biases = _init_params(layer_dims, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]

    best_val = np.inf
    best_epoch = 0
    best_weights = [w.copy() for w in weights]
    best_biases = [b.copy() for b in biases]
    train_history, val_history = [], []
    stop_reason = "epoch-cap"

    epoch = 0
    for epoch in range(1, epoch_cap + 1):
        loss, grads_w, grads_b = _loss_and_grads(weights, biases, x_train)
        if not np.isfinite(loss):
            raise TrainingError(f"training loss became non-finite at epoch {epoch}")
        t = epoch
        corr1 = 1.0 - ADAM_BETA1**t
        corr2 = 1.0 - ADAM_BETA2**t
        for i in range(len(weights)):
            m_w[i] = ADAM_BETA1 * m_w[i] + (1 - ADAM_BETA1) * grads_w[i]
            v_w[i] = ADAM_BETA2 * v_w[i] + (1 - ADAM_BETA2) * grads_w[i] ** 2
            weights[i] -= learning_rate * (m_w[i] / corr1) / (np.sqrt(v_w[i] / corr2) + ADAM_EPS)
            m_b[i] = ADAM_BETA1 * m_b[i] + (1 - ADAM_BETA1) * grads_b[i]
            v_b[i] = ADAM_BETA2 * v_b[i] + (1 - ADAM_BETA2) * grads_b[i] ** 2
            biases[i] -= learning_rate * (m_b[i] / corr1) / (np.sqrt(v_b[i] / corr2) + ADAM_EPS)

        val_mse = _reconstruction_mse(weights, biases, x_val)
        if not np.isfinite(val_mse):
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}")
        train_history.append(loss)
        val_history.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_weights = [w.copy() for w in weights]
            best_biases = [b.copy() for b in biases]
        elif epoch - best_epoch >= patience:
            stop_reason = "early-stop"
            break

    model = AutoencoderModel(
        layer_dims=layer_dims,
        weights=best_weights,
        biases=best_biases,
        normalizer=normalizer,
        feature_shape=tuple(feature_shape),
    )
    report = TrainingReport(
        epochs_run=epoch,
        final_training_mse=_reconstruction_mse(best_weights, best_biases, x_train),
        final_validation_mse=best_val,
        stop_reason=stop_reason,
        best_epoch=best_epoch,
        training_history=train_history,
        validation_history=val_history,
    )
    return model, report


def reconstruction_mse(model: AutoencoderModel, features: np.ndarray) -> float:
    """Normalized-space reconstruction MSE of the trained model."""
    x = model.normalizer.transform(np.asarray(features, dtype=float))
    return _reconstruction_mse(model.weights, model.biases, x)


def encode(model: AutoencoderModel, features: RcFeatures) -> np.ndarray:
    """Map one feature pair to its latent vector."""
    return encode_matrix(model, features.flatten()[None, :])[0]


def encode_matrix(model: AutoencoderModel, features: np.ndarray) -> np.ndarray:
    """Encode a matrix of flattened feature vectors, one row each."""
    x = model.normalizer.transform(np.asarray(features, dtype=float))
    if x.shape[1] != model.input_dim:
        raise DataError(f"feature dim {x.shape[1]} does not match model {model.input_dim}")
    a = x
    for i in range(model.LATENT_LAYER):
        a = expit(a @ model.weights[i] + model.biases[i])
    return a


def decode(model: AutoencoderModel, latent: np.ndarray) -> RcFeatures:
    """Map a latent vector back to a feature pair (r_0, W_out)."""
    latent = np.asarray(latent, dtype=float).ravel()
    if latent.shape[0] != model.latent_dim:
        raise DataError(f"latent dim {latent.shape[0]} does not match model {model.latent_dim}")
    a = latent[None, :]
    last = len(model.weights) - 1
    for i in range(model.LATENT_LAYER, len(model.weights)):
        z = a @ model.weights[i] + model.biases[i]
        a = z if i == last else expit(z)
    flat = model.normalizer.inverse(a)[0]
    return RcFeatures.unflatten(flat, model.feature_shape[0])


def save_autoencoder(model: AutoencoderModel, path) -> None:
    """Single file: JSON header line + float64 weights in layer order."""
    header = {
        "layer_dims": list(model.layer_dims),
        "feature_shape": list(model.feature_shape),
        "activation": "sigmoid-hidden-linear-output",
        "normalizer": model.normalizer.to_dict(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(b, dtype=np.float64).tobytes())


def load_autoencoder(path) -> AutoencoderModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    dims = tuple(header["layer_dims"])
    weights, biases = [], []
    offset = 0
    buf = np.frombuffer(raw, dtype=np.float64)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(buf[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        biases.append(buf[offset:offset + fan_out].copy())
        offset += fan_out
    if offset != buf.size:
        raise DataError(f"model file {path} has {buf.size - offset} unexpected trailing values")
    return AutoencoderModel(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        normalizer=FeatureNormalizer.from_dict(header["normalizer"]),
        feature_shape=tuple(header["feature_shape"]),
    )
