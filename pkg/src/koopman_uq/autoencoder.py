"""Overcomplete MLP autoencoder used as the lifting and reconstruction maps.

The encoder normalizes its input, then applies ``tanh`` layers all the way to
the lifted state (so lifted coordinates lie in ``(-1, 1)``). The decoder has
``tanh`` hidden layers followed by a purely linear, bias-free output layer in
physical state units. Gradients are computed by hand-written backpropagation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from scipy import optimize

from .dataset import Normalizer, SplitDataset, TrajectoryDataset, fit_normalizer
from .errors import (ArtifactIOError, TrainingError,
                     UnsupportedArchitectureError, ValidationError)

log = logging.getLogger(__name__)

Activation = Literal["tanh", "linear"]
FORMAT = "koopman_uq.autoencoder/1"


@dataclass(frozen=True)
class LayerParams:
    W: np.ndarray
    b: np.ndarray
    activation: Activation = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "linear"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValidationError(
                f"layer shapes do not agree: W {self.W.shape}, b {self.b.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValidationError("layer parameters must be finite")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def __call__(self, a: np.ndarray) -> np.ndarray:
        z = self.W @ a + (self.b if a.ndim == 1 else self.b[:, None])
        return np.tanh(z) if self.activation == "tanh" else z


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    Both optimizers are deterministic and full-batch, so there is no batch
    size or learning-rate schedule to configure. ``epochs`` caps the number
    of optimizer iterations; ``patience`` stops early once the validation
    loss has not improved for that many iterations. When :func:`train` is
    given a selector, it is evaluated every ``select_every`` iterations and
    ``patience`` is not used.
    """

    rho: float = 1e-4
    epochs: int = 1000
    optimizer: Literal["scg", "lbfgs"] = "lbfgs"
    patience: int = 300
    seed: int = 0
    select_every: int = 50

    def __post_init__(self):
        if self.rho < 0:
            raise ValidationError("rho must be non-negative")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.select_every < 1:
            raise ValidationError("select_every must be >= 1")


@dataclass(frozen=True)
class AEModel:
    normalizer: Normalizer
    encoder: tuple[LayerParams, ...]
    decoder: tuple[LayerParams, ...]
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "decoder", tuple(self.decoder))
        layers = self.encoder + self.decoder
        if not self.encoder or not self.decoder:
            raise ValidationError("encoder and decoder need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ValidationError(
                    f"layer dims do not chain: {prev.n_out} -> {nxt.n_in}")
        n = self.encoder[0].n_in
        if self.decoder[-1].n_out != n:
            raise ValidationError("decoder output must match encoder input dim")
        if self.lifted_dim <= n:
            raise ValidationError(
                f"lifted dim {self.lifted_dim} must exceed state dim {n}")
        if any(l.activation != "tanh" for l in self.encoder + self.decoder[:-1]):
            raise ValidationError("hidden and encoder-output layers must be tanh")
        last = self.decoder[-1]
        if last.activation != "linear" or np.any(last.b != 0):
            raise ValidationError(
                "decoder output layer must be linear with zero bias")
        if self.normalizer.scale.shape != (n,):
            raise ValidationError("normalizer dimension does not match state")

    @property
    def n_states(self) -> int:
        return self.encoder[0].n_in

    @property
    def lifted_dim(self) -> int:
        return self.encoder[-1].n_out

    @property
    def layers(self) -> tuple[LayerParams, ...]:
        return self.encoder + self.decoder


def build_autoencoder(n_states: int,
                      hidden_size: int,
                      lifted_dim: int,
                      normalizer: Normalizer,
                      seed: int = 0) -> AEModel:
    """Single-hidden-layer encoder and decoder with seeded uniform init.

    Weights and biases are drawn from ``U[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
    The decoder output bias is fixed at zero.
    """
    rng = np.random.default_rng(seed)
    dims = [(n_states, hidden_size), (hidden_size, lifted_dim),
            (lifted_dim, hidden_size), (hidden_size, n_states)]
    layers = []
    for i, (n_in, n_out) in enumerate(dims):
        bound = 1.0 / np.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        act: Activation = "tanh"
        if i == len(dims) - 1:
            b = np.zeros(n_out)
            act = "linear"
        layers.append(LayerParams(W, b, act))
    return AEModel(normalizer, layers[:2], layers[2:])


def encode(model: AEModel, x: np.ndarray) -> np.ndarray:
    """Lift physical states, shape ``(n,)`` or ``(n, K)``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite state passed to encode")
    a = model.normalizer.normalize(x)
    for layer in model.encoder:
        a = layer(a)
    return a


def decode(model: AEModel, z: np.ndarray) -> np.ndarray:
    """Reconstruct physical states from lifted states."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite lifted state passed to decode")
    a = z
    for layer in model.decoder:
        a = layer(a)
    return a


def reconstruct(model: AEModel, x: np.ndarray) -> np.ndarray:
    return decode(model, encode(model, x))


def _data_matrix(batch: TrajectoryDataset | np.ndarray) -> np.ndarray:
    X = batch.X if isinstance(batch, TrajectoryDataset) else np.asarray(batch)
    return np.asarray(X, dtype=float)


def weight_penalty(model: AEModel) -> float:
    return float(sum(np.sum(l.W * l.W) for l in model.layers))


def reconstruction_mse(model: AEModel, batch: TrajectoryDataset | np.ndarray) -> float:
    """Mean over samples of the squared Euclidean reconstruction error."""
    X = _data_matrix(batch)
    if X.shape[1] == 0:
        raise ValidationError("empty batch")
    r = reconstruct(model, X) - X
    return float(np.sum(r * r) / X.shape[1])


def ae_loss(model: AEModel, batch: TrajectoryDataset | np.ndarray, rho: float) -> float:
    """Reconstruction MSE plus ``rho`` times the squared Frobenius norm of all
    weight matrices. Biases are not penalized."""
    return reconstruction_mse(model, batch) + rho * weight_penalty(model)


def loss_and_grad(model: AEModel,
                  X: np.ndarray,
                  rho: float) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss and per-layer ``(dW, db)`` gradients by backpropagation."""
    X = np.asarray(X, dtype=float)
    D = X.shape[1]
    acts = [model.normalizer.normalize(X)]
    for layer in model.layers:
        acts.append(layer(acts[-1]))
    resid = acts[-1] - X
    loss = float(np.sum(resid * resid) / D) + rho * weight_penalty(model)

    grads = []
    delta = (2.0 / D) * resid
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "tanh":
            a_out = acts[i + 1]
            delta = delta * (1.0 - a_out * a_out)
        dW = delta @ acts[i].T + 2.0 * rho * layer.W
        db = delta.sum(axis=1)
        grads.append((dW, db))
        if i > 0:
            delta = layer.W.T @ delta
    grads.reverse()
    return loss, grads


# --------------------------------------------------------------------------
# Flat parameter vectors (decoder output bias is fixed, so it is left out)
# --------------------------------------------------------------------------

def _trainable(model: AEModel):
    n = len(model.layers)
    for i, layer in enumerate(model.layers):
        yield i, "W", layer.W
        if i != n - 1:
            yield i, "b", layer.b


def pack(model: AEModel) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, _, arr in _trainable(model)])


def pack_grads(model: AEModel, grads) -> np.ndarray:
    parts = []
    for i, kind, _ in _trainable(model):
        parts.append(grads[i][0 if kind == "W" else 1].ravel())
    return np.concatenate(parts)


def unpack(model: AEModel, theta: np.ndarray) -> AEModel:
    theta = np.asarray(theta, dtype=float)
    expected = sum(arr.size for _, _, arr in _trainable(model))
    if theta.shape != (expected,):
        raise ValidationError(f"expected {expected} parameters, got {theta.size}")
    new = {i: {"W": l.W, "b": l.b} for i, l in enumerate(model.layers)}
    pos = 0
    for i, kind, arr in _trainable(model):
        new[i][kind] = theta[pos:pos + arr.size].reshape(arr.shape).copy()
        pos += arr.size
    layers = [LayerParams(new[i]["W"], new[i]["b"], l.activation)
              for i, l in enumerate(model.layers)]
    k = len(model.encoder)
    return AEModel(model.normalizer, layers[:k], layers[k:], model.info)


def gradient_check(model: AEModel,
                   batch: TrajectoryDataset | np.ndarray,
                   rho: float,
                   n_params: int = 40,
                   h: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences.

    Compares on a random subset of ``n_params`` trainable parameters. The
    relative error uses ``|a - b| / max(|a| + |b|, 1e-8)``; entries where both
    gradients vanish count as exact.
    """
    X = _data_matrix(batch)
    theta = pack(model)
    _, grads = loss_and_grad(model, X, rho)
    analytic = pack_grads(model, grads)
    rng = np.random.default_rng(seed)
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    for j in idx:
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (_loss_at(model, tp, X, rho) - _loss_at(model, tm, X, rho)) / (2 * h)
        a = analytic[j]
        denom = max(abs(a) + abs(fd), 1e-8)
        err = 0.0 if a == fd else abs(a - fd) / denom
        worst = max(worst, err)
    return worst


def _loss_at(model: AEModel, theta: np.ndarray, X: np.ndarray, rho: float) -> float:
    m = unpack(model, theta)
    if X.shape[1] == 0:
        return rho * weight_penalty(m)
    return ae_loss(m, X, rho)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

Selector = Callable[[AEModel], float]


class _Objective:
    """Loss/gradient closure over flat parameters with validation tracking.

    Without a selector the tracked snapshot is the one with the lowest
    validation reconstruction MSE. With one, the snapshot with the lowest
    selector score among every ``select_every``-th iterate is kept.
    """

    def __init__(self, model: AEModel, X: np.ndarray, Xval: np.ndarray | None,
                 rho: float, selector: Selector | None = None,
                 select_every: int = 50):
        self.model = model
        self.X = X
        self.Xval = Xval
        self.rho = rho
        self.selector = selector
        self.select_every = select_every
        self.best_val = np.inf
        self.best_score = np.inf
        self.best_theta: np.ndarray | None = None
        self.best_epoch = -1
        self.last: tuple[int, np.ndarray] | None = None
        self.history: list[tuple[int, float, float]] = []
        self.scores: list[tuple[int, float]] = []

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        m = unpack(self.model, theta)
        loss, grads = loss_and_grad(m, self.X, self.rho)
        return loss, pack_grads(m, grads)

    def loss(self, theta: np.ndarray) -> float:
        return ae_loss(unpack(self.model, theta), self.X, self.rho)

    def observe(self, epoch: int, theta: np.ndarray, train_loss: float) -> int:
        """Record an accepted iterate; returns iterations since last improvement."""
        if not np.isfinite(train_loss):
            raise TrainingError(f"training loss became non-finite at epoch {epoch}",
                                epoch=epoch)
        if self.Xval is not None and self.Xval.shape[1] > 0:
            val = reconstruction_mse(unpack(self.model, theta), self.Xval)
        else:
            val = train_loss
        self.history.append((epoch, train_loss, val))
        self.last = (epoch, theta.copy())
        if self.selector is not None:
            if epoch % self.select_every == 0:
                self.score(epoch, theta)
            return 0
        if val < self.best_val:
            self.best_val = val
            self.best_theta = theta.copy()
            self.best_epoch = epoch
        return epoch - self.best_epoch

    def score(self, epoch: int, theta: np.ndarray) -> None:
        value = float(self.selector(unpack(self.model, theta)))
        self.scores.append((epoch, value))
        if value < self.best_score:
            self.best_score = value
            self.best_val = self.history[-1][2]
            self.best_theta = theta.copy()
            self.best_epoch = epoch

    def finish(self) -> None:
        """Score the final iterate if the schedule skipped it."""
        if self.selector is not None and self.last is not None:
            epoch, theta = self.last
            if not self.scores or self.scores[-1][0] != epoch:
                self.score(epoch, theta)


def _run_lbfgs(obj: _Objective, theta0: np.ndarray, cfg: TrainConfig) -> None:
    epoch = [0]

    def callback(intermediate_result):
        epoch[0] += 1
        stale = obj.observe(epoch[0], intermediate_result.x,
                            float(intermediate_result.fun))
        if stale >= cfg.patience:
            raise StopIteration

    optimize.minimize(obj, theta0, jac=True, method="L-BFGS-B",
                      callback=callback,
                      options={"maxiter": cfg.epochs, "maxcor": 20,
                               "ftol": 0.0, "gtol": 1e-12})


def _run_scg(obj: _Objective, theta0: np.ndarray, cfg: TrainConfig) -> None:
    # Moller's scaled conjugate gradient, with the usual trainscg constants.
    sigma = 5e-5
    lam = 5e-7
    lam_bar = 0.0
    w = theta0.copy()
    f_w, g_w = obj(w)
    r = -g_w
    p = r.copy()
    success = True
    n_params = w.size
    delta = 0.0
    for epoch in range(1, cfg.epochs + 1):
        p2 = float(p @ p)
        if p2 == 0.0:
            break
        if success:
            sigma_k = sigma / np.sqrt(p2)
            _, g_s = obj(w + sigma_k * p)
            s = (g_s - g_w) / sigma_k
            delta = float(p @ s)
        delta += (lam - lam_bar) * p2
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / p2)
            delta = -delta + lam * p2
            lam = lam_bar
        mu = float(p @ r)
        alpha = mu / delta
        w_new = w + alpha * p
        f_new, g_new = obj(w_new)
        cmp = 2.0 * delta * (f_w - f_new) / (mu * mu) if mu != 0 else -1.0
        if np.isfinite(f_new) and cmp >= 0:
            r_new = -g_new
            lam_bar = 0.0
            success = True
            if epoch % n_params == 0:
                p = r_new.copy()
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                p = r_new + beta * p
            w, f_w, g_w, r = w_new, f_new, g_new, r_new
            if cmp >= 0.75:
                lam *= 0.25
        else:
            lam_bar = lam
            success = False
        if cmp < 0.25:
            lam += delta * (1.0 - cmp) / p2
        # Keep the damping in a sane range after long rejection streaks.
        lam = min(max(lam, 1e-15), 1e100)
        stale = obj.observe(epoch, w, f_w)
        if stale >= cfg.patience or not np.any(r):
            break


def train(model: AEModel, data: SplitDataset, cfg: TrainConfig,
          selector: Selector | None = None) -> AEModel:
    """Fit the autoencoder on ``data.train.X``.

    Without ``selector``, returns the iterate with the lowest validation
    reconstruction MSE. Otherwise the full iteration budget runs and the
    returned iterate is the one, among every ``cfg.select_every``-th and
    the last, that minimizes ``selector(model)``.
    """
    if model.n_states != data.train.X.shape[0]:
        raise ValidationError("model and data state dimensions differ")
    theta0 = pack(model)
    info = {"train_config": {"rho": cfg.rho, "epochs": cfg.epochs,
                             "optimizer": cfg.optimizer,
                             "patience": cfg.patience, "seed": cfg.seed,
                             "selector": selector is not None,
                             "select_every": cfg.select_every}}
    if cfg.epochs == 0:
        return replace(model, info={**model.info, **info})
    obj = _Objective(model, np.asarray(data.train.X, float),
                     np.asarray(data.validation.X, float), cfg.rho,
                     selector, cfg.select_every)
    obj.observe(0, theta0, obj.loss(theta0))
    if cfg.optimizer == "lbfgs":
        _run_lbfgs(obj, theta0, cfg)
    elif cfg.optimizer == "scg":
        _run_scg(obj, theta0, cfg)
    else:
        raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")
    obj.finish()
    best = unpack(model, obj.best_theta)
    info.update({
        "best_epoch": obj.best_epoch,
        "epochs_run": obj.history[-1][0],
        "best_val_mse": obj.best_val,
        "final_train_loss": obj.history[-1][1],
    })
    if selector is not None:
        info["best_selector_score"] = obj.best_score
    log.info("trained AE: best validation MSE %.3e at epoch %d of %d",
             obj.best_val, obj.best_epoch, obj.history[-1][0])
    return replace(best, info={**model.info, **info})


def train_autoencoder(data: SplitDataset,
                      hidden_size: int = 60,
                      lifted_dim: int = 20,
                      cfg: TrainConfig = TrainConfig(),
                      selector: Selector | None = None) -> AEModel:
    """Normalize on the training split, initialize, and train."""
    norm = fit_normalizer(data.train)
    model = build_autoencoder(data.train.X.shape[0], hidden_size, lifted_dim,
                              norm, seed=cfg.seed)
    return train(model, data, cfg, selector)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _layer_to_dict(l: LayerParams) -> dict:
    return {"in": l.n_in, "out": l.n_out, "activation": l.activation,
            "W": l.W.ravel(order="C").tolist(), "b": l.b.tolist()}


def _layer_from_dict(d: dict) -> LayerParams:
    W = np.array(d["W"], dtype=float).reshape(d["out"], d["in"])
    return LayerParams(W, np.array(d["b"], dtype=float), d["activation"])


def model_to_dict(model: AEModel) -> dict:
    return {
        "format": FORMAT,
        "normalizer": model.normalizer.to_dict(),
        "encoder": [_layer_to_dict(l) for l in model.encoder],
        "decoder": [_layer_to_dict(l) for l in model.decoder],
        "info": model.info,
    }


def model_from_dict(d: dict) -> AEModel:
    if d.get("format") != FORMAT:
        raise ValidationError(f"not an autoencoder artifact: {d.get('format')!r}")
    return AEModel(Normalizer.from_dict(d["normalizer"]),
                   [_layer_from_dict(l) for l in d["encoder"]],
                   [_layer_from_dict(l) for l in d["decoder"]],
                   d.get("info", {}))


def dumps(model: AEModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model: AEModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(model))
    return path


def load_model(path: str | Path) -> AEModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(
            f"cannot read autoencoder {path}; run `train-ae` first") from exc
    return model_from_dict(json.loads(text))


def decoder_weights(model: AEModel) -> tuple[np.ndarray, np.ndarray]:
    """``(W0, W1)`` of a single-hidden-layer decoder."""
    if len(model.decoder) != 2:
        raise UnsupportedArchitectureError(
            f"decoder has {len(model.decoder) - 1} hidden layers; "
            "certification supports exactly one")
    return model.decoder[0].W, model.decoder[1].W

