"""EDMD baseline: thin-plate spline RBF dictionary plus the raw state."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TrajectoryDataset
from .errors import ArtifactIOError, ValidationError
from .regression import DEFAULT_TIKHONOV, solve_normal_equations

FORMAT = "koopman_uq.edmd/1"


def thin_plate_rbf(x: np.ndarray, center: np.ndarray) -> float:
    """``r log r`` with ``r = ||x - center||_2``, extended by 0 at ``r = 0``."""
    r = float(np.linalg.norm(np.asarray(x, float) - np.asarray(center, float)))
    return 0.0 if r == 0.0 else r * np.log(r)


@dataclass(frozen=True)
class RbfLifting:
    """Dictionary ``[tps(x, c_1), ..., tps(x, c_K), x]``."""

    centers: np.ndarray  # (K, n)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 2 or not np.all(np.isfinite(c)):
            raise ValidationError("centers must be a finite (K, n) array")
        object.__setattr__(self, "centers", c)

    @property
    def n_states(self) -> int:
        return self.centers.shape[1]

    @property
    def lifted_dim(self) -> int:
        return self.centers.shape[0] + self.n_states

    @classmethod
    def random(cls, n_centers: int = 100, n_states: int = 2,
               seed: int = 0) -> "RbfLifting":
        """Centers drawn uniformly from the box ``[-1, 1]^n``."""
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-1.0, 1.0, size=(n_centers, n_states)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return lift(self, x)


def lift(rbf: RbfLifting, x: np.ndarray) -> np.ndarray:
    """Lift a state ``(n,)`` or a batch ``(n, K)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[:, None] if single else x
    if X.shape[0] != rbf.n_states:
        raise ValidationError(
            f"state has {X.shape[0]} rows, lifting expects {rbf.n_states}")
    diff = X[None, :, :] - rbf.centers[:, :, None]   # (K, n, M)
    r = np.sqrt(np.einsum("knm,knm->km", diff, diff))
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)
    out = np.vstack([phi, X])
    return out[:, 0] if single else out


@dataclass(frozen=True)
class EdmdModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    rbf: RbfLifting
    info: dict = field(default_factory=dict, compare=False)


def fit_AB(Xlift: np.ndarray,
           Ylift: np.ndarray,
           U: np.ndarray,
           tikhonov: float = DEFAULT_TIKHONOV) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``A, B`` for ``Ylift ~ A Xlift + B U``."""
    Xlift = np.atleast_2d(np.asarray(Xlift, float))
    U = np.asarray(U, float).reshape(-1, Xlift.shape[1])
    N = Xlift.shape[0]
    M = solve_normal_equations(Ylift, np.vstack([Xlift, U]), tikhonov)
    return M[:, :N], M[:, N:]


def fit_C(X: np.ndarray, Xlift: np.ndarray,
          tikhonov: float = DEFAULT_TIKHONOV) -> np.ndarray:
    """Least-squares reconstruction matrix ``C`` for ``X ~ C Xlift``."""
    return solve_normal_equations(X, Xlift, tikhonov)


def fit_edmd(ds: TrajectoryDataset,
             rbf: RbfLifting,
             tikhonov: float = DEFAULT_TIKHONOV) -> EdmdModel:
    Xl = lift(rbf, ds.X)
    Yl = lift(rbf, ds.Y)
    A, B = fit_AB(Xl, Yl, ds.U, tikhonov)
    C = fit_C(ds.X, Xl, tikhonov)
    return EdmdModel(A, B, C, rbf, {"tikhonov": tikhonov})


def edmd_predict(model: EdmdModel, x0: np.ndarray, u_seq) -> np.ndarray:
    """Lift once, iterate ``A, B`` in lifted space, map each step back with ``C``.

    Returns states of shape ``(len(u_seq) + 1, n)``.
    """
    z = lift(model.rbf, np.asarray(x0, float))
    m = model.B.shape[1]
    u_seq = np.asarray(u_seq, float).reshape(-1, m)
    out = np.empty((len(u_seq) + 1, model.C.shape[0]))
    out[0] = model.C @ z
    for k, u in enumerate(u_seq):
        z = model.A @ z + model.B @ u
        out[k + 1] = model.C @ z
    return out


def model_to_dict(model: EdmdModel) -> dict:
    return {
        "format": FORMAT,
        "centers": model.rbf.centers.tolist(),
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "C": model.C.tolist(),
        "info": model.info,
    }


def model_from_dict(d: dict) -> EdmdModel:
    if d.get("format") != FORMAT:
        raise ValidationError(f"not an EDMD artifact: {d.get('format')!r}")
    return EdmdModel(np.array(d["A"], float), np.array(d["B"], float),
                     np.array(d["C"], float), RbfLifting(np.array(d["centers"])),
                     d.get("info", {}))


def save_model(model: EdmdModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model), indent=1) + "\n")
    return path


def load_model(path: str | Path) -> EdmdModel:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise ArtifactIOError(
            f"cannot read EDMD model {path}; run `fit-edmd` first") from exc
