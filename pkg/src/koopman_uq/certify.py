"""Lipschitz certificate for a one-hidden-layer decoder ``x = W1 sigma(W0 z + b0)``.

For an activation whose difference quotients lie in ``[slope_lo, slope_hi]``
and a diagonal multiplier ``T >= 0``, the decoder is ``L``-Lipschitz in the
Euclidean norm whenever

    P(L^2, T) = [[-2 a b W0' T W0 - L^2 I,  (a + b) W0' T],
                 [(a + b) T W0,             W1' W1 - 2 T ]]

is negative semidefinite (``a = slope_lo``, ``b = slope_hi``). The smallest
certified ``L`` is found by bisection on ``L^2``. For each trial value the
largest eigenvalue of ``P`` is pushed down over ``T`` by projected
subgradient descent. A trial ``L^2`` counts as certified only if a concrete
``T`` with ``lambda_max(P) <= 1e-8`` has been found, so a weak inner solve
can only make the answer conservative.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .autoencoder import AEModel, decode, decoder_weights
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

FORMAT = "koopman_uq.certificate/1"
FEAS_TOL = 1e-8
BISECTION_RTOL = 1e-4
INNER_ITERS = 500
INNER_STOP = -1e-10


@dataclass(frozen=True)
class SlopeBounds:
    slope_lo: float = 0.0
    slope_hi: float = 1.0

    def __post_init__(self):
        if not self.slope_lo <= self.slope_hi:
            raise ValidationError("slope_lo must not exceed slope_hi")


TANH = SlopeBounds(0.0, 1.0)


@dataclass(frozen=True)
class Multiplier:
    """Diagonal of ``T``."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 1 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValidationError("multiplier must be a finite non-negative vector")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class LipschitzCertificate:
    L_star: float
    multiplier: Multiplier
    margin: float
    empirical_lo: float
    spectral_hi: float
    degraded: bool = False
    info: dict = field(default_factory=dict, compare=False)


def _check_dims(W0: np.ndarray, W1: np.ndarray, lam: np.ndarray | None = None):
    if W0.ndim != 2 or W1.ndim != 2 or W1.shape[1] != W0.shape[0]:
        raise ValidationError(
            f"W0 {W0.shape} and W1 {W1.shape} do not compose")
    if lam is not None and lam.shape != (W0.shape[0],):
        raise ValidationError(
            f"multiplier has length {lam.shape[0]}, hidden width is {W0.shape[0]}")


def lmi_matrix(W0: np.ndarray,
               W1: np.ndarray,
               L_sq: float,
               T: Multiplier,
               slopes: SlopeBounds = TANH) -> np.ndarray:
    """Symmetric ``(N + h) x (N + h)`` matrix ``P(L^2, T)``."""
    W0 = np.asarray(W0, dtype=float)
    W1 = np.asarray(W1, dtype=float)
    lam = T.lam
    _check_dims(W0, W1, lam)
    a, b = slopes.slope_lo, slopes.slope_hi
    h, N = W0.shape
    TW0 = lam[:, None] * W0
    P11 = -2.0 * a * b * (W0.T @ TW0) - L_sq * np.eye(N)
    P22 = W1.T @ W1 - 2.0 * np.diag(lam)
    P = np.empty((N + h, N + h))
    # symmetrize the diagonal blocks and mirror the coupling block so the
    # result is exactly symmetric
    P[:N, :N] = 0.5 * (P11 + P11.T)
    P[N:, N:] = 0.5 * (P22 + P22.T)
    P[N:, :N] = (a + b) * TW0
    P[:N, N:] = P[N:, :N].T
    return P


def _lambda_max(P: np.ndarray) -> tuple[float, np.ndarray]:
    try:
        w, V = linalg.eigh(P, subset_by_index=[P.shape[0] - 1, P.shape[0] - 1])
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("eigenvalue computation failed") from exc
    return float(w[0]), V[:, 0]


def is_feasible(W0, W1, L_sq: float, T: Multiplier,
                slopes: SlopeBounds = TANH) -> tuple[bool, float]:
    """``(lambda_max(P) <= 1e-8, lambda_max(P))``."""
    margin, _ = _lambda_max(lmi_matrix(W0, W1, L_sq, T, slopes))
    return margin <= FEAS_TOL, margin


def spectral_bound(W0, W1, slopes: SlopeBounds = TANH) -> float:
    """Product of the layer spectral norms times the largest slope magnitude."""
    s = max(abs(slopes.slope_lo), abs(slopes.slope_hi))
    return float(s * np.linalg.norm(W1, 2) * np.linalg.norm(W0, 2))


def _margin_subgradient(W0, lam, v, N, a, b) -> np.ndarray:
    """Gradient of ``v' P v`` with respect to the diagonal of ``T``."""
    q = W0 @ v[:N]
    v2 = v[N:]
    return -2.0 * a * b * q * q + 2.0 * (a + b) * q * v2 - 2.0 * v2 * v2


def minimize_margin(W0, W1, L_sq: float, lam0: np.ndarray,
                    slopes: SlopeBounds = TANH,
                    iters: int = INNER_ITERS) -> tuple[np.ndarray, float, int]:
    """Projected subgradient descent on ``lambda_max(P(L_sq, T))`` over ``T >= 0``.

    Polyak steps aim a little below zero, since only the sign of the margin
    matters to the caller. Returns the best ``(lam, margin, iterations)``.
    """
    W0 = np.asarray(W0, float)
    a, b = slopes.slope_lo, slopes.slope_hi
    N = W0.shape[1]
    scale = max(L_sq, float(np.linalg.norm(W1, 2)) ** 2, 1e-12)
    target = -1e-6 * scale
    lam = np.maximum(np.asarray(lam0, float), 0.0)
    best_lam, best = lam.copy(), np.inf
    for it in range(1, iters + 1):
        f, v = _lambda_max(lmi_matrix(W0, W1, L_sq, Multiplier(lam), slopes))
        if f < best:
            best, best_lam = f, lam.copy()
        if f <= INNER_STOP:
            return best_lam, best, it
        g = _margin_subgradient(W0, lam, v, N, a, b)
        gg = float(g @ g)
        if gg == 0.0:
            break
        lam = np.maximum(lam - (f - target) / gg * g, 0.0)
    return best_lam, best, iters


def certify_lipschitz(W0: np.ndarray,
                      W1: np.ndarray,
                      slopes: SlopeBounds = TANH,
                      empirical_lo: float = 0.0,
                      rtol: float = BISECTION_RTOL,
                      inner_iters: int = INNER_ITERS) -> LipschitzCertificate:
    """Smallest certified Lipschitz constant by bisection on ``L^2``.

    ``empirical_lo`` is a known lower bound (any sampled difference
    quotient); the upper end of the bracket is the spectral bound, which the
    multiplier ``T = ||W1||_2^2 I`` certifies exactly for slopes ``(0, 1)``.
    """
    W0 = np.asarray(W0, dtype=float)
    W1 = np.asarray(W1, dtype=float)
    _check_dims(W0, W1)
    h = W0.shape[0]
    hi_L = spectral_bound(W0, W1, slopes)
    lo_L = min(max(empirical_lo, 0.0), hi_L)
    info = {"feasibility_tol": FEAS_TOL, "bisection_rtol": rtol,
            "inner_iters": inner_iters, "trials": 0, "inner_iterations": 0}

    if hi_L == 0.0:
        lam = np.zeros(h)
        ok, margin = is_feasible(W0, W1, 0.0, Multiplier(lam), slopes)
        if not ok:
            # W0 = 0 but W1 != 0: any positive multiplier large enough works
            lam = np.full(h, float(np.linalg.norm(W1, 2)) ** 2)
            ok, margin = is_feasible(W0, W1, 0.0, Multiplier(lam), slopes)
        return LipschitzCertificate(0.0, Multiplier(lam), margin, 0.0, 0.0,
                                    not ok, info)

    witness = np.full(h, float(np.linalg.norm(W1, 2)) ** 2)
    ok, margin = is_feasible(W0, W1, hi_L ** 2, Multiplier(witness), slopes)
    if not ok:
        witness, margin, _ = minimize_margin(W0, W1, hi_L ** 2, witness,
                                             slopes, inner_iters)
        if margin > FEAS_TOL:
            raise NumericalError(
                f"no multiplier certifies even the spectral bound {hi_L:.6g}; "
                f"slopes {slopes} may not suit this certificate")
    best_L, best_lam, best_margin = hi_L, witness, margin
    improved = False
    lam = witness.copy()
    while best_L - lo_L > rtol * best_L:
        mid = 0.5 * (lo_L + best_L)
        cand, m, n_it = minimize_margin(W0, W1, mid * mid, lam, slopes,
                                        inner_iters)
        info["trials"] += 1
        info["inner_iterations"] += n_it
        if m <= FEAS_TOL:
            best_L, best_lam, best_margin = mid, cand, m
            lam = cand
            improved = True
        else:
            lo_L = mid
    ok, margin = is_feasible(W0, W1, best_L ** 2, Multiplier(best_lam), slopes)
    if not ok:
        raise NumericalError("final certificate failed re-verification")
    degraded = not improved and lo_L < hi_L * (1 - rtol)
    if degraded:
        log.warning("Lipschitz bisection never certified below the spectral "
                    "bound; returning it as a degraded certificate")
    return LipschitzCertificate(float(best_L), Multiplier(best_lam), margin,
                                float(empirical_lo), hi_L, degraded, info)


def empirical_lipschitz(decoder, probe_points: np.ndarray, pairs: int = 2000,
                        seed: int = 0) -> float:
    """Largest sampled difference quotient ``||f(z) - f(z + d)|| / ||d||``.

    ``decoder`` is an :class:`AEModel` or any callable mapping ``(N, K)`` to
    ``(n, K)``. Pairs start at random probe points; ``||d||`` is log-uniform
    in ``[1e-4, 1e-1]``. Half of the directions are random, the other half
    follow the top right singular vector of the local Jacobian (when the
    decoder is an :class:`AEModel`), which tends to tighten the bound.
    """
    f = (lambda z: decode(decoder, z)) if isinstance(decoder, AEModel) else decoder
    Z = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if Z.shape[1] == 0 or pairs <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    N = Z.shape[0]
    base = Z[:, rng.integers(0, Z.shape[1], size=pairs)]
    dirs = rng.standard_normal((N, pairs))
    if isinstance(decoder, AEModel) and len(decoder.decoder) == 2:
        W0, W1 = decoder_weights(decoder)
        b0 = decoder.decoder[0].b
        half = pairs // 2
        for j in range(half):
            s = 1.0 - np.tanh(W0 @ base[:, j] + b0) ** 2
            J = W1 @ (s[:, None] * W0)
            dirs[:, j] = np.linalg.svd(J)[2][0]
    dirs /= np.linalg.norm(dirs, axis=0)
    mags = 10.0 ** rng.uniform(-4.0, -1.0, size=pairs)
    d = dirs * mags
    num = np.linalg.norm(f(base + d) - f(base), axis=0)
    return float(np.max(num / np.linalg.norm(d, axis=0)))


def certify_decoder(ae: AEModel,
                    probe_points: np.ndarray,
                    slopes: SlopeBounds = TANH,
                    pairs: int = 2000,
                    seed: int = 0,
                    rtol: float = BISECTION_RTOL,
                    inner_iters: int = INNER_ITERS) -> LipschitzCertificate:
    """Empirical lower bound, then the multiplier certificate, on a trained
    autoencoder's decoder."""
    W0, W1 = decoder_weights(ae)
    lo = empirical_lipschitz(ae, probe_points, pairs, seed)
    return certify_lipschitz(W0, W1, slopes, lo, rtol, inner_iters)


def cert_to_dict(cert: LipschitzCertificate) -> dict:
    return {
        "format": FORMAT,
        "L_star": cert.L_star,
        "lambda": cert.multiplier.lam.tolist(),
        "margin": cert.margin,
        "empirical_lo": cert.empirical_lo,
        "spectral_hi": cert.spectral_hi,
        "degraded": cert.degraded,
        "info": cert.info,
    }


def cert_from_dict(d: dict) -> LipschitzCertificate:
    if d.get("format") != FORMAT:
        raise ValidationError(f"not a Lipschitz certificate: {d.get('format')!r}")
    return LipschitzCertificate(float(d["L_star"]),
                                Multiplier(np.array(d["lambda"], float)),
                                float(d["margin"]), float(d["empirical_lo"]),
                                float(d["spectral_hi"]), bool(d["degraded"]),
                                d.get("info", {}))


def save_cert(cert: LipschitzCertificate, path: str | Path,
              extra: dict | None = None) -> Path:
    d = cert_to_dict(cert)
    if extra:
        d.update(extra)
    path = Path(path)
    path.write_text(json.dumps(d, indent=1) + "\n")
    return path
