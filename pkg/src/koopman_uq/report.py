"""Multi-step evaluation, error metrics, containment checks and artifact files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autoencoder import AEModel, decode, encode
from .errors import ArtifactIOError, ValidationError
from .koopman import KoopmanModel, predict_lifted

DISK_TIMES = (2.1, 2.9, 4.7, 5.5)


@dataclass(frozen=True)
class PredictionRun:
    """A true trajectory next to its open-loop prediction, both ``(K + 1, n)``."""

    true_states: np.ndarray
    predicted_states: np.ndarray
    inputs: np.ndarray
    lifted_pred: np.ndarray | None = None
    r: float | None = None
    label: str = ""

    def __post_init__(self):
        t = np.asarray(self.true_states, float)
        p = np.asarray(self.predicted_states, float)
        if t.shape != p.shape or t.ndim != 2:
            raise ValidationError(
                f"true {t.shape} and predicted {p.shape} trajectories differ")
        if len(self.inputs) != len(t) - 1:
            raise ValidationError("need one input per transition")
        object.__setattr__(self, "true_states", t)
        object.__setattr__(self, "predicted_states", p)

    @property
    def errors(self) -> np.ndarray:
        return self.true_states - self.predicted_states

    def with_radius(self, r: float) -> "PredictionRun":
        return PredictionRun(self.true_states, self.predicted_states,
                             self.inputs, self.lifted_pred, float(r), self.label)


@dataclass(frozen=True)
class MetricsTable:
    label: str
    me: np.ndarray
    mse: np.ndarray
    n_points: int
    L_star: float | None = None


@dataclass(frozen=True)
class ContainmentReport:
    inside: np.ndarray          # ||x_k - x_hat_k||_2 <= r
    premise: np.ndarray         # all residuals before step k lie in W
    step_residual_ok: np.ndarray  # residual at step k itself lies in W
    err2: np.ndarray
    r: float
    first_violation: int | None
    info: dict = field(default_factory=dict)

    @property
    def fraction(self) -> float:
        return float(self.inside.mean()) if self.inside.size else 1.0

    @property
    def premise_fraction(self) -> float:
        return float(self.step_residual_ok.mean()) if self.step_residual_ok.size else 1.0

    @property
    def violations_under_premise(self) -> int:
        return int(np.sum(self.premise & ~self.inside))

    @property
    def violations_under_step_premise(self) -> int:
        """Steps ``k >= 1`` outside the ball although the residual of the
        transition into them lies in W."""
        return int(np.sum(self.step_residual_ok & ~self.inside[1:]))


def rollout_predict(ae: AEModel, model: KoopmanModel, x0, u_seq,
                    true_states: np.ndarray | None = None,
                    label: str = "ae-koopman") -> PredictionRun:
    """Encode ``x0`` once, roll the linear model forward, decode every step.

    Without ``true_states`` the prediction itself is stored in both slots.
    """
    u_seq = np.asarray(u_seq, float).reshape(-1, model.n_inputs)
    Z = predict_lifted(model, encode(ae, np.asarray(x0, float)), u_seq)
    X_hat = decode(ae, Z.T).T
    truth = X_hat if true_states is None else true_states
    return PredictionRun(truth, X_hat, u_seq, Z, None, label)


def metrics(run: PredictionRun | Sequence[PredictionRun],
            label: str | None = None, L_star: float | None = None) -> MetricsTable:
    """Per-state maximum absolute error and mean squared error.

    A sequence of runs is treated as their concatenation.
    """
    runs = [run] if isinstance(run, PredictionRun) else list(run)
    if not runs:
        raise ValidationError("no runs to score")
    E = np.vstack([r.errors for r in runs])
    if E.shape[0] == 0:
        raise ValidationError("empty run")
    return MetricsTable(label if label is not None else runs[0].label,
                        np.abs(E).max(axis=0), (E * E).mean(axis=0),
                        E.shape[0], L_star)


def lifted_residuals(ae: AEModel, model: KoopmanModel, run: PredictionRun) -> np.ndarray:
    """One-step residuals ``E(x_{k+1}) - Phi E(x_k) - Gamma u_k`` along the
    true trajectory, shape ``(K, N)``."""
    Z = encode(ae, run.true_states.T)
    U = np.asarray(run.inputs, float).reshape(-1, model.n_inputs).T
    return (Z[:, 1:] - model.Phi @ Z[:, :-1] - model.Gamma @ U).T


def containment_report(run: PredictionRun,
                       residuals: np.ndarray | None = None,
                       w_max: float | None = None) -> ContainmentReport:
    """Flag each step with ``||x_k - x_hat_k||_2 <= r``.

    When residuals and ``w_max`` are given, step ``k`` also carries the
    premise flag: every residual at steps ``0..k-1`` lies in the cube of
    radius ``w_max``. Without them the premise is taken to hold everywhere.
    """
    if run.r is None:
        raise ValidationError("run has no reconstruction radius attached")
    err2 = np.linalg.norm(run.errors, axis=1)
    inside = err2 <= run.r
    K = len(err2)
    if residuals is None or w_max is None:
        ok = np.ones(K - 1, dtype=bool)
    else:
        ok = np.abs(np.asarray(residuals)).max(axis=1) <= w_max
    premise = np.concatenate([[True], np.cumprod(ok).astype(bool)])
    bad = np.flatnonzero(~inside)
    return ContainmentReport(inside, premise, ok, err2, float(run.r),
                             int(bad[0]) if bad.size else None)


# --------------------------------------------------------------------------
# Artifact files
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics_csv(path: Path, tables: Sequence[MetricsTable]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "state", "ME", "MSE", "n_points", "L_star"])
        for t in tables:
            for j in range(len(t.me)):
                w.writerow([t.label, f"x{j + 1}", _fmt(t.me[j]), _fmt(t.mse[j]),
                            t.n_points, _fmt(t.L_star)])


def write_trajectory_csv(path: Path, run: PredictionRun | None, dt: float,
                         report: ContainmentReport | None = None) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "x1", "x2", "x1_hat", "x2_hat", "err2", "r",
                    "inside"])
        if run is None:
            return
        err2 = np.linalg.norm(run.errors, axis=1)
        for k in range(len(run.true_states)):
            x, xh = run.true_states[k], run.predicted_states[k]
            inside = None if report is None else bool(report.inside[k])
            w.writerow([k, _fmt(k * dt), _fmt(x[0]), _fmt(x[1]), _fmt(xh[0]),
                        _fmt(xh[1]), _fmt(err2[k]), _fmt(run.r), _fmt(inside)])


def phase_plane_svg(run: PredictionRun | None, dt: float,
                    disk_times: Sequence[float] = DISK_TIMES,
                    width: int = 640, height: int = 480) -> str:
    """Self-contained SVG of the ``(x1, x2)`` phase plane.

    True trajectory in black, prediction dashed red, and disks of radius
    ``r`` around the prediction at ``disk_times``. The view is fitted to the
    trajectories, so large disks are clipped to the plotting area.
    """
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')
    if run is None or len(run.true_states) == 0:
        return head + "</svg>\n"
    pts = np.vstack([run.true_states, run.predicted_states])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - 0.1 * span, hi + 0.1 * span
    m = 50
    sx = (width - 2 * m) / (hi[0] - lo[0])
    sy = (height - 2 * m) / (hi[1] - lo[1])

    def px(p):
        return m + (p[0] - lo[0]) * sx, height - m - (p[1] - lo[1]) * sy

    def poly(P):
        return " ".join("%.2f,%.2f" % px(p) for p in P)

    out = [head,
           f'<clipPath id="plot"><rect x="{m}" y="{m}" width="{width - 2 * m}" '
           f'height="{height - 2 * m}"/></clipPath>\n',
           f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" '
           'fill="none" stroke="#888"/>\n',
           '<g clip-path="url(#plot)">\n']
    if run.r is not None:
        for t in disk_times:
            k = int(round(t / dt))
            if 0 <= k < len(run.predicted_states):
                cx, cy = px(run.predicted_states[k])
                out.append(f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" '
                           f'rx="{run.r * sx:.2f}" ry="{run.r * sy:.2f}" '
                           'fill="#4a90d9" fill-opacity="0.15" stroke="#4a90d9"/>\n')
    out.append(f'<polyline points="{poly(run.true_states)}" fill="none" '
               'stroke="black" stroke-width="1.5"/>\n')
    out.append(f'<polyline points="{poly(run.predicted_states)}" fill="none" '
               'stroke="#d0312d" stroke-width="1.5" stroke-dasharray="5,3"/>\n')
    out.append("</g>\n")
    for t in disk_times:
        k = int(round(t / dt))
        if 0 <= k < len(run.predicted_states):
            cx, cy = px(run.predicted_states[k])
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="#4a90d9"/>\n'
                       f'<text x="{cx + 5:.2f}" y="{cy - 5:.2f}" font-size="11" '
                       f'font-family="sans-serif">k={t:g}s</text>\n')
    label = "" if run.r is None else f", disk radius r={run.r:.4g}"
    out.append(f'<text x="{m}" y="{m - 15}" font-size="13" font-family="sans-serif">'
               f'phase plane: true (black), predicted (red dashed){label}</text>\n')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 15}" font-size="12" '
               'font-family="sans-serif" text-anchor="middle">x1</text>\n'
               f'<text x="15" y="{height / 2:.0f}" font-size="12" '
               'font-family="sans-serif">x2</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def emit_artifacts(path: str | Path,
                   run: PredictionRun | None,
                   tables: Sequence[MetricsTable],
                   certificate: dict | None = None,
                   rpi: dict | None = None,
                   dt: float = 0.01,
                   report: ContainmentReport | None = None,
                   disk_times: Sequence[float] = DISK_TIMES) -> dict[str, Path]:
    """Write ``metrics.csv``, ``trajectory.csv``, ``phase_plane.svg`` and,
    when given, ``certificate.json`` and ``rpi.json`` into ``path``."""
    path = Path(path)
    files = {}
    try:
        path.mkdir(parents=True, exist_ok=True)
        files["metrics"] = path / "metrics.csv"
        write_metrics_csv(files["metrics"], tables)
        files["trajectory"] = path / "trajectory.csv"
        write_trajectory_csv(files["trajectory"], run, dt, report)
        files["phase_plane"] = path / "phase_plane.svg"
        files["phase_plane"].write_text(phase_plane_svg(run, dt, disk_times))
        for name, obj in (("certificate", certificate), ("rpi", rpi)):
            if obj is not None:
                files[name] = path / f"{name}.json"
                files[name].write_text(json.dumps(obj, indent=1) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write report artifacts to {path}: {exc}") from exc
    return files
