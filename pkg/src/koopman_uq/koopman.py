"""Lifted linear model on autoencoder coordinates and its residual bound."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .autoencoder import AEModel, decode, encode
from .dataset import TrajectoryDataset
from .errors import ArtifactIOError, ValidationError
from .regression import DEFAULT_TIKHONOV, solve_normal_equations

FORMAT = "koopman_uq.koopman/1"


@dataclass(frozen=True)
class KoopmanModel:
    """``z+ = Phi z + Gamma u`` plus the data-derived residual bound.

    ``w_max`` is the largest infinity-norm one-step residual on the fitting
    data and ``w_box`` its per-coordinate counterpart. Both are ``nan`` until
    :func:`residual_bound` has been applied.
    """

    Phi: np.ndarray
    Gamma: np.ndarray
    w_max: float = float("nan")
    w_box: np.ndarray | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        N = self.Phi.shape[0]
        if self.Phi.shape != (N, N) or self.Gamma.shape[0] != N:
            raise ValidationError(
                f"bad shapes: Phi {self.Phi.shape}, Gamma {self.Gamma.shape}")
        if not (np.all(np.isfinite(self.Phi)) and np.all(np.isfinite(self.Gamma))):
            raise ValidationError("Phi and Gamma must be finite")

    @property
    def lifted_dim(self) -> int:
        return self.Phi.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.Gamma.shape[1]


def lift_dataset(ae: AEModel, ds: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    """Encoded current states and encoded successors, each ``N x M``."""
    return encode(ae, ds.X), encode(ae, ds.Y)


def fit_phi_gamma(Zx: np.ndarray,
                  Zy: np.ndarray,
                  U: np.ndarray,
                  tikhonov: float = DEFAULT_TIKHONOV) -> KoopmanModel:
    Zx = np.atleast_2d(np.asarray(Zx, dtype=float))
    Zy = np.atleast_2d(np.asarray(Zy, dtype=float))
    U = np.asarray(U, dtype=float).reshape(-1, Zx.shape[1])
    N = Zx.shape[0]
    M = solve_normal_equations(Zy, np.vstack([Zx, U]), tikhonov)
    return KoopmanModel(M[:, :N], M[:, N:], info={"tikhonov": tikhonov})


def stabilize(model: KoopmanModel, rho_max: float) -> KoopmanModel:
    """Pull every eigenvalue of ``Phi`` with modulus above ``rho_max`` radially
    onto the circle of radius ``rho_max``.

    Eigenvectors are kept, so conjugate pairs stay paired and the result is
    real. Models that already satisfy the bound are returned unchanged. The
    residual bound must be recomputed afterwards.
    """
    if not 0 < rho_max < 1:
        raise ValidationError(f"rho_max must lie in (0, 1), got {rho_max}")
    lam, V = linalg.eig(model.Phi)
    mod = np.abs(lam)
    if mod.max() <= rho_max:
        return model
    lam = np.where(mod > rho_max, lam / mod * rho_max, lam)
    Phi = np.real(V @ np.diag(lam) @ linalg.inv(V))
    info = {**model.info, "stabilized": {"rho_max": rho_max,
                                         "rho_before": float(mod.max())}}
    return KoopmanModel(Phi, model.Gamma.copy(), info=info)


def predict_lifted(model: KoopmanModel, z0: np.ndarray, u_seq) -> np.ndarray:
    """Linear rollout; returns ``(len(u_seq) + 1, N)``."""
    z = np.asarray(z0, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.n_inputs)
    out = np.empty((len(u_seq) + 1, model.lifted_dim))
    out[0] = z
    for k, u in enumerate(u_seq):
        z = model.Phi @ z + model.Gamma @ u
        out[k + 1] = z
    return out


def residuals(model: KoopmanModel,
              Zx: np.ndarray,
              Zy: np.ndarray,
              U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=float).reshape(model.n_inputs, -1)
    return Zy - model.Phi @ Zx - model.Gamma @ U


def multistep_mse(ae: AEModel, model: KoopmanModel, ds: TrajectoryDataset) -> float:
    """Mean squared state error of open-loop rollouts over whole trajectories.

    Each trajectory is encoded once at its first state and driven by its own
    inputs; the error is averaged over every predicted step and state.
    """
    if ds.n_trajectories == 0:
        raise ValidationError("no trajectories to roll out")
    by_len: dict[int, list[int]] = {}
    for a, b in ds.boundaries:
        by_len.setdefault(b - a, []).append(a)
    total, count = 0.0, 0
    for K, starts in by_len.items():
        cols = np.array(starts)
        z = encode(ae, ds.X[:, cols])
        for k in range(K):  # all trajectories of this length step together
            z = model.Phi @ z + model.Gamma @ ds.U[:, cols + k]
            err = decode(ae, z) - ds.Y[:, cols + k]
            total += float(np.sum(err * err))
            count += err.size
    return total / count


def residual_bound(ae: AEModel,
                   model: KoopmanModel,
                   ds: TrajectoryDataset) -> tuple[float, np.ndarray]:
    """Largest infinity-norm and per-coordinate one-step lifted residuals."""
    if ds.n_samples == 0:
        raise ValidationError("cannot bound residuals on an empty dataset")
    Zx, Zy = lift_dataset(ae, ds)
    W = np.abs(residuals(model, Zx, Zy, ds.U))
    w_box = W.max(axis=1)
    return float(w_box.max()), w_box


def fit_koopman(ae: AEModel,
                ds: TrajectoryDataset,
                tikhonov: float = DEFAULT_TIKHONOV,
                rho_max: float | None = None) -> KoopmanModel:
    """Lift, fit, optionally stabilize, then attach the residual bound."""
    Zx, Zy = lift_dataset(ae, ds)
    model = fit_phi_gamma(Zx, Zy, ds.U, tikhonov)
    if rho_max is not None:
        model = stabilize(model, rho_max)
    W = np.abs(residuals(model, Zx, Zy, ds.U))
    w_box = W.max(axis=1)
    return replace(model, w_max=float(w_box.max()), w_box=w_box)


def model_to_dict(model: KoopmanModel) -> dict:
    N, m = model.Gamma.shape
    return {
        "format": FORMAT,
        "lifted_dim": N,
        "n_inputs": m,
        "Phi": model.Phi.ravel(order="C").tolist(),
        "Gamma": model.Gamma.ravel(order="C").tolist(),
        "w_max": model.w_max,
        "w_box": None if model.w_box is None else model.w_box.tolist(),
        "info": model.info,
    }


def model_from_dict(d: dict) -> KoopmanModel:
    if d.get("format") != FORMAT:
        raise ValidationError(f"not a Koopman artifact: {d.get('format')!r}")
    N, m = d["lifted_dim"], d["n_inputs"]
    w_box = None if d["w_box"] is None else np.array(d["w_box"], dtype=float)
    return KoopmanModel(np.array(d["Phi"], float).reshape(N, N),
                        np.array(d["Gamma"], float).reshape(N, m),
                        float(d["w_max"]), w_box, d.get("info", {}))


def save_model(model: KoopmanModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model), indent=1) + "\n")
    return path


def load_model(path: str | Path) -> KoopmanModel:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise ArtifactIOError(
            f"cannot read Koopman model {path}; run `fit-koopman` first") from exc
