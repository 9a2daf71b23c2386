"""Invariant sets for the lifted error dynamics ``e+ = Phi e + w``.

The disturbance set is the cube ``W = {w : ||w||_inf <= w_max}``. For a Schur
stable ``Phi`` we look for ``s`` and ``alpha < 1`` with ``Phi^s W`` inside
``alpha W`` and scale the partial Minkowski sum ``W + Phi W + ... +
Phi^(s-1) W`` by ``1 / (1 - alpha)``. The result is a zonotope centred at the
origin containing the minimal robust positively invariant set.

For a cube, ``Phi^s W`` fits in ``alpha W`` exactly when
``||Phi^s||_inf <= alpha``, so the containment test is a single induced norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InstabilityError, NumericalError, ValidationError

FORMAT = "koopman_uq.rpi/1"


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box centred at the origin."""

    radius: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.radius, dtype=float)
        if np.any(r < 0):
            raise ValidationError("box radii must be non-negative")
        object.__setattr__(self, "radius", r)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Membership of points laid out as ``(N,)`` or ``(K, N)``."""
        p = np.abs(np.asarray(points, dtype=float))
        return np.all(p <= self.radius + tol, axis=-1)


@dataclass(frozen=True)
class ZonotopeSet:
    """``{G xi : ||xi||_inf <= 1}``."""

    generators: np.ndarray

    def interval_hull(self) -> BoxSet:
        return BoxSet(np.abs(self.generators).sum(axis=1))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        xi = rng.uniform(-1.0, 1.0, size=(self.generators.shape[1], n))
        return (self.generators @ xi).T


@dataclass(frozen=True)
class RpiCertificate:
    s: int
    alpha: float
    w_max: float
    interval_hull: BoxSet
    l2_radius: float
    generator_norm_sum: float
    Phi: np.ndarray | None = None

    @property
    def lifted_dim(self) -> int:
        return self.interval_hull.radius.shape[0]

    def zonotope(self) -> ZonotopeSet:
        """Explicit generator matrix, ``N x (N s)``. Needs ``Phi``."""
        if self.Phi is None:
            raise ValidationError("certificate was stored without Phi")
        return rpi_zonotope(self.Phi, self.w_max, self.s, self.alpha)


@dataclass(frozen=True)
class ReconstructionBall:
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValidationError("ball radius must be non-negative")


def spectral_radius(Phi: np.ndarray) -> float:
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != Phi.shape[1]:
        raise ValidationError(f"need a square matrix, got {Phi.shape}")
    try:
        ev = np.linalg.eigvals(Phi)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigenvalue computation failed") from exc
    return float(np.max(np.abs(ev))) if ev.size else 0.0


def inf_norm(A: np.ndarray) -> float:
    """Induced infinity norm: max absolute row sum."""
    return float(np.abs(A).sum(axis=1).max())


def contraction_factor(Phi: np.ndarray, s: int) -> float:
    """Smallest ``alpha`` with ``Phi^s W`` inside ``alpha W`` for a cube ``W``."""
    if s < 1:
        raise ValidationError("s must be >= 1")
    return inf_norm(np.linalg.matrix_power(np.asarray(Phi, float), s))


def find_s_alpha(Phi: np.ndarray,
                 alpha_target: float = 0.1,
                 s_max: int = 200) -> tuple[int, float]:
    """Smallest ``s <= s_max`` whose contraction factor is at most
    ``alpha_target``; returns ``(s, alpha)``."""
    if not 0 < alpha_target < 1:
        raise ValidationError("alpha_target must lie in (0, 1)")
    Phi = np.asarray(Phi, dtype=float)
    rho = spectral_radius(Phi)
    if rho >= 1:
        raise InstabilityError(
            f"spectral radius of Phi is {rho:.6g} >= 1; the outer RPI "
            "approximation needs a strictly stable Phi")
    P = np.eye(Phi.shape[0])
    for s in range(1, s_max + 1):
        P = P @ Phi
        alpha = inf_norm(P)
        if alpha <= alpha_target:
            return s, alpha
    raise NumericalError(
        f"no s <= {s_max} gives ||Phi^s||_inf <= {alpha_target} "
        f"(spectral radius {rho:.6g}); raise s_max or alpha_target")


def rpi_set(Phi: np.ndarray,
            w_max: float,
            s: int,
            alpha: float,
            keep_Phi: bool = True) -> RpiCertificate:
    """Outer approximation ``(1 - alpha)^-1 (W + Phi W + ... + Phi^(s-1) W)``.

    The generator matrix is never formed here. The interval hull and both
    l2 bounds (sum of generator norms, norm of the hull corner) are
    accumulated one power of ``Phi`` at a time.
    """
    if not 0 <= alpha < 1:
        raise ValidationError(f"alpha must lie in [0, 1), got {alpha}")
    if s < 1 or w_max < 0:
        raise ValidationError("need s >= 1 and w_max >= 0")
    Phi = np.asarray(Phi, dtype=float)
    N = Phi.shape[0]
    scale = w_max / (1.0 - alpha)
    hull = np.zeros(N)
    gen_norms = 0.0
    P = np.eye(N)
    for i in range(s):
        if i:
            P = P @ Phi
        hull += np.abs(P).sum(axis=1)
        gen_norms += float(np.sqrt((P * P).sum(axis=0)).sum())
    hull *= scale
    gen_norms *= scale
    l2 = min(gen_norms, float(np.linalg.norm(hull)))
    return RpiCertificate(s, float(alpha), float(w_max), BoxSet(hull), l2,
                          gen_norms, Phi.copy() if keep_Phi else None)


def rpi_zonotope(Phi: np.ndarray, w_max: float, s: int, alpha: float) -> ZonotopeSet:
    Phi = np.asarray(Phi, dtype=float)
    N = Phi.shape[0]
    blocks = []
    P = np.eye(N)
    for i in range(s):
        if i:
            P = P @ Phi
        blocks.append(P.copy())
    return ZonotopeSet(np.hstack(blocks) * (w_max / (1.0 - alpha)))


def compute_rpi(Phi: np.ndarray,
                w_max: float,
                alpha_target: float = 0.1,
                s_max: int = 200) -> RpiCertificate:
    s, alpha = find_s_alpha(Phi, alpha_target, s_max)
    return rpi_set(Phi, w_max, s, alpha)


def reconstruction_radius(L_star: float, cert: RpiCertificate) -> ReconstructionBall:
    """Radius of the ball around the decoded prediction that holds the true
    state: Lipschitz constant times the l2 radius of the error set."""
    if L_star < 0:
        raise ValidationError("Lipschitz constant must be non-negative")
    return ReconstructionBall(float(L_star) * cert.l2_radius)


def cert_to_dict(cert: RpiCertificate, include_generators: bool = False) -> dict:
    d = {
        "format": FORMAT,
        "s": cert.s,
        "alpha": cert.alpha,
        "w_max": cert.w_max,
        "interval_hull": cert.interval_hull.radius.tolist(),
        "l2_radius": cert.l2_radius,
        "generator_norm_sum": cert.generator_norm_sum,
        "Phi": None if cert.Phi is None else cert.Phi.tolist(),
    }
    if include_generators:
        d["generators"] = cert.zonotope().generators.tolist()
    return d


def cert_from_dict(d: dict) -> RpiCertificate:
    if d.get("format") != FORMAT:
        raise ValidationError(f"not an RPI artifact: {d.get('format')!r}")
    Phi = None if d.get("Phi") is None else np.array(d["Phi"], dtype=float)
    return RpiCertificate(int(d["s"]), float(d["alpha"]), float(d["w_max"]),
                          BoxSet(np.array(d["interval_hull"], dtype=float)),
                          float(d["l2_radius"]), float(d["generator_norm_sum"]),
                          Phi)


def save_cert(cert: RpiCertificate, path: str | Path, extra: dict | None = None,
              include_generators: bool = False) -> Path:
    d = cert_to_dict(cert, include_generators)
    if extra:
        d.update(extra)
    path = Path(path)
    path.write_text(json.dumps(d, indent=1) + "\n")
    return path
