"""Snapshot datasets built from randomly excited trajectories."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import (N_INPUTS, N_STATES, SimConfig, rk4_step, rk4_update,
                       vdp_derivative, vdp_field)
from .errors import ArtifactIOError, IntegrationError, ValidationError

log = logging.getLogger(__name__)

MAX_RESAMPLES = 100


@dataclass(frozen=True)
class TrajectoryDataset:
    """Aligned snapshot matrices.

    Column ``k`` of ``Y`` is the successor of column ``k`` of ``X`` under
    input column ``k`` of ``U``. ``boundaries`` holds half-open column
    ranges, one per trajectory; pairs never straddle two ranges.
    """

    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    boundaries: tuple[tuple[int, int], ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("X", "U", "Y"):
            arr = np.array(getattr(self, name), dtype=float, order="C")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        M = self.X.shape[1]
        if self.U.shape[1] != M or self.Y.shape[1] != M:
            raise ValidationError(
                f"column counts differ: X {self.X.shape}, U {self.U.shape}, "
                f"Y {self.Y.shape}")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValidationError("X and Y must have the same number of rows")
        covered = sum(b - a for a, b in self.boundaries)
        if covered != M:
            raise ValidationError(
                f"trajectory boundaries cover {covered} of {M} columns")

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]

    @property
    def n_trajectories(self) -> int:
        return len(self.boundaries)

    def trajectory(self, i: int) -> "TrajectoryDataset":
        a, b = self.boundaries[i]
        return TrajectoryDataset(self.X[:, a:b], self.U[:, a:b], self.Y[:, a:b],
                                 ((0, b - a),))

    def select(self, indices: Sequence[int]) -> "TrajectoryDataset":
        """Sub-dataset made of whole trajectories, in the given order."""
        cols = []
        bounds = []
        start = 0
        for i in indices:
            a, b = self.boundaries[i]
            cols.append(np.arange(a, b))
            bounds.append((start, start + b - a))
            start += b - a
        idx = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        return TrajectoryDataset(self.X[:, idx], self.U[:, idx], self.Y[:, idx],
                                 tuple(bounds))


@dataclass(frozen=True)
class SplitDataset:
    train: TrajectoryDataset
    validation: TrajectoryDataset
    test: TrajectoryDataset
    indices: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]] = ()


def _draw_trajectory(rng: np.random.Generator, steps: int):
    x0 = rng.uniform(-1.0, 1.0, size=N_STATES)
    u = rng.uniform(-1.0, 1.0, size=(steps, N_INPUTS))
    return x0, u


def generate_dataset(num_traj: int,
                     steps: int,
                     cfg: SimConfig,
                     seed: int) -> TrajectoryDataset:
    """Simulate ``num_traj`` randomly excited trajectories.

    Each trajectory draws its initial state and inputs uniformly from
    ``[-1, 1]`` using its own child of ``SeedSequence(seed)``, so the result
    does not depend on the order in which trajectories are produced. The
    trajectories are integrated together as one batch; because the vector
    field is elementwise, each column matches :func:`rk4_step` exactly.
    Trajectories that blow up are redrawn from the same substream.
    """
    if num_traj < 1 or steps < 1:
        raise ValidationError("num_traj and steps must both be >= 1")
    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(seed).spawn(num_traj)]
    x0 = np.empty((N_STATES, num_traj))
    u = np.empty((steps, N_INPUTS, num_traj))
    for j, rng in enumerate(streams):
        x0[:, j], u[:, :, j] = _draw_trajectory(rng, steps)

    rejected = 0
    pending = np.arange(num_traj)
    states = np.empty((steps + 1, N_STATES, num_traj))
    for _ in range(MAX_RESAMPLES + 1):
        x = x0[:, pending]
        states[0][:, pending] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(steps):
                x = rk4_update(x, u[k][:, pending], cfg.dt, vdp_field)
                states[k + 1][:, pending] = x
        bad = ~np.all(np.isfinite(states[:, :, pending]), axis=(0, 1))
        if not bad.any():
            break
        rejected += int(bad.sum())
        pending = pending[bad]
        for j in pending:
            x0[:, j], u[:, :, j] = _draw_trajectory(streams[j], steps)
    else:
        raise IntegrationError(
            f"{len(pending)} trajectories still non-finite after "
            f"{MAX_RESAMPLES} redraws")
    if rejected:
        log.warning("rejected and redrew %d non-finite trajectories", rejected)

    # (steps, n, traj) -> (n, traj * steps), trajectory-major columns.
    X = states[:-1].transpose(1, 2, 0).reshape(N_STATES, -1)
    Y = states[1:].transpose(1, 2, 0).reshape(N_STATES, -1)
    U = u.transpose(1, 2, 0).reshape(N_INPUTS, -1)
    bounds = tuple((j * steps, (j + 1) * steps) for j in range(num_traj))
    meta = {"seed": seed, "dt": cfg.dt, "steps": steps,
            "num_traj": num_traj, "rejected": rejected}
    return TrajectoryDataset(X, U, Y, bounds, meta)


def split(ds: TrajectoryDataset,
          ratios: Sequence[float] = (0.7, 0.2, 0.1),
          seed: int = 0) -> SplitDataset:
    """Shuffle whole trajectories and cut them into train/validation/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    n = ds.n_trajectories
    parts = sum(r > 0 for r in ratios)
    if n < parts:
        raise ValidationError(
            f"cannot split {n} trajectories into {parts} non-empty parts")
    counts = [int(round(r * n)) for r in ratios]
    # Keep every requested part non-empty, then fix rounding drift on train.
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            counts[i] = 1
    largest = int(np.argmax(ratios))
    counts[largest] += n - sum(counts)
    order = np.random.default_rng(seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    idx = (tuple(int(i) for i in order[:a]),
           tuple(int(i) for i in order[a:b]),
           tuple(int(i) for i in order[b:]))
    return SplitDataset(ds.select(idx[0]), ds.select(idx[1]),
                        ds.select(idx[2]), idx)


@dataclass(frozen=True)
class Normalizer:
    """Per-feature affine map ``x -> scale * x + offset``."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ValidationError("normalizer scale must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.scale * x + self.offset
        return self.scale[:, None] * x + self.offset[:, None]

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            return (y - self.offset) / self.scale
        return (y - self.offset[:, None]) / self.scale[:, None]

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["offset"], dtype=float),
                   np.array(d["scale"], dtype=float))


def fit_normalizer(ds: TrajectoryDataset | np.ndarray) -> Normalizer:
    """Map the per-feature ``[min, max]`` of ``X`` onto ``[-1, 1]``."""
    X = ds.X if isinstance(ds, TrajectoryDataset) else np.asarray(ds, float)
    if X.size == 0:
        raise ValidationError("cannot fit a normalizer on an empty dataset")
    lo = X.min(axis=1)
    hi = X.max(axis=1)
    for i in range(X.shape[0]):
        if not hi[i] > lo[i]:
            raise ValidationError(f"feature {i} is constant ({lo[i]!r})")
    scale = 2.0 / (hi - lo)
    offset = -1.0 - lo * scale
    return Normalizer(offset, scale)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _write_long_csv(path: Path, A: np.ndarray) -> None:
    rows, cols = A.shape
    feat = np.repeat(np.arange(rows), cols)
    samp = np.tile(np.arange(cols), rows)
    with open(path, "w") as f:
        f.write("feature_index,sample_index,value\n")
        f.writelines(f"{i},{j},{v!r}\n"
                     for i, j, v in zip(feat.tolist(), samp.tolist(),
                                        A.ravel().tolist()))


def _read_long_csv(path: Path, shape: tuple[int, int]) -> np.ndarray:
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2,
                         dtype=float)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    A = np.full(shape, np.nan)
    if raw.size:
        A[raw[:, 0].astype(int), raw[:, 1].astype(int)] = raw[:, 2]
    if np.isnan(A).any():
        raise ValidationError(f"{path} does not fill a {shape} matrix")
    return A


def save_dataset(ds: TrajectoryDataset, directory: str | Path) -> Path:
    """Write ``X.csv``, ``U.csv``, ``Y.csv`` and ``dataset.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, A in (("X", ds.X), ("U", ds.U), ("Y", ds.Y)):
        _write_long_csv(d / f"{name}.csv", A)
    sidecar = dict(ds.meta)
    sidecar.update({
        "n_states": ds.X.shape[0],
        "n_inputs": ds.U.shape[0],
        "n_samples": ds.n_samples,
        "boundaries": [list(b) for b in ds.boundaries],
    })
    path = d / "dataset.json"
    path.write_text(json.dumps(sidecar, indent=1) + "\n")
    return path


def load_dataset(directory: str | Path) -> TrajectoryDataset:
    d = Path(directory)
    try:
        sidecar = json.loads((d / "dataset.json").read_text())
    except OSError as exc:
        raise ArtifactIOError(
            f"no dataset sidecar in {d}; run `gen-data` first") from exc
    M = sidecar["n_samples"]
    n = sidecar["n_states"]
    m = sidecar["n_inputs"]
    X = _read_long_csv(d / "X.csv", (n, M))
    U = _read_long_csv(d / "U.csv", (m, M))
    Y = _read_long_csv(d / "Y.csv", (n, M))
    meta = {k: v for k, v in sidecar.items()
            if k not in ("boundaries", "n_states", "n_inputs", "n_samples")}
    return TrajectoryDataset(X, U, Y,
                             tuple(tuple(b) for b in sidecar["boundaries"]),
                             meta)


def successor_check(ds: TrajectoryDataset, dt: float) -> bool:
    """True when every ``Y`` column is exactly the RK4 successor of ``X``."""
    pred = rk4_step(ds.X, ds.U, dt, rhs=vdp_derivative)
    return bool(np.array_equal(pred, ds.Y))
