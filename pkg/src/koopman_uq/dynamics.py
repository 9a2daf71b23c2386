"""Forced Van der Pol benchmark and a fixed-step RK4 integrator.

All state arrays are laid out feature-first: a single state has shape
``(n,)`` and a batch of states has shape ``(n, K)``. The right-hand side is
written with elementwise operations only, so integrating a batch gives
bit-identical columns to integrating each state on its own.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, IntegrationError, ValidationError

N_STATES = 2
N_INPUTS = 1

#: Half-period of the evaluation square wave, in seconds.
SQUARE_WAVE_HALF_PERIOD = 0.3


class Integrator(str, enum.Enum):
    RK4 = "RK4"


@dataclass(frozen=True)
class SimConfig:
    """Discretization settings.

    Parameters
    ----------
    dt : float
        Sample time in seconds.
    steps : int
        Number of integration steps per trajectory.
    integrator : Integrator
        Only classical RK4 is supported.
    """

    dt: float = 0.01
    steps: int = 200
    integrator: Integrator = Integrator.RK4

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError(f"dt must be positive and finite, got {self.dt}")
        if self.steps < 0:
            raise ValidationError(f"steps must be non-negative, got {self.steps}")


RhsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def vdp_derivative(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Continuous-time forced Van der Pol vector field.

    ``x1' = 2 x2`` and ``x2' = -0.8 x1 - 10 x1^2 x2 + 2 x2 - u``.

    Parameters
    ----------
    x : np.ndarray
        State, shape ``(2,)`` or ``(2, K)``.
    u : np.ndarray
        Input, shape ``(1,)`` or ``(1, K)``.

    Returns
    -------
    np.ndarray
        Time derivative with the same shape as ``x``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[0] != N_STATES or u.shape[0] != N_INPUTS:
        raise DomainError(
            f"expected state of length {N_STATES} and input of length "
            f"{N_INPUTS}, got {x.shape} and {u.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise DomainError("non-finite state or input")
    return vdp_field(x, u)


def vdp_field(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Unchecked Van der Pol vector field; lets non-finite values through."""
    x1 = x[0]
    x2 = x[1]
    return np.stack([
        2.0 * x2,
        -0.8 * x1 - 10.0 * x1 * x1 * x2 + 2.0 * x2 - u[0],
    ])


def rk4_update(x: np.ndarray, u: np.ndarray, dt: float, rhs: RhsFn) -> np.ndarray:
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * dt * k1, u)
    k3 = rhs(x + 0.5 * dt * k2, u)
    k4 = rhs(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x: np.ndarray,
             u: np.ndarray,
             dt: float,
             rhs: RhsFn = vdp_derivative,
             step: int | None = None) -> np.ndarray:
    """One classical RK4 step with ``u`` held constant over the interval."""
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            x_next = rk4_update(x, u, dt, rhs)
    except DomainError as exc:
        where = "" if step is None else f" at step {step}"
        raise IntegrationError(f"integration left the finite domain{where}",
                               step=step) from exc
    if not np.all(np.isfinite(x_next)):
        where = "" if step is None else f" at step {step}"
        raise IntegrationError(f"state overflowed{where}", step=step)
    return x_next


def simulate(x0: Sequence[float] | np.ndarray,
             inputs: Sequence | np.ndarray,
             cfg: SimConfig,
             rhs: RhsFn = vdp_derivative) -> np.ndarray:
    """Roll the discretized system forward.

    Parameters
    ----------
    x0 : array_like
        Initial state, shape ``(n,)``.
    inputs : array_like
        Inputs ``u_0 .. u_{steps-1}``, shape ``(steps, m)`` or ``(steps,)``
        for scalar inputs.
    cfg : SimConfig
        ``cfg.steps`` must equal ``len(inputs)``.

    Returns
    -------
    np.ndarray
        States ``x_0 .. x_steps``, shape ``(steps + 1, n)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    u_seq = np.asarray(inputs, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, np.newaxis]
    if u_seq.shape[0] != cfg.steps:
        raise ValidationError(
            f"got {u_seq.shape[0]} inputs for {cfg.steps} steps")
    out = np.empty((cfg.steps + 1, x.shape[0]))
    out[0] = x
    for k in range(cfg.steps):
        x = rk4_step(x, u_seq[k], cfg.dt, rhs=rhs, step=k)
        out[k + 1] = x
    return out


def square_wave(t: float, half_period: float = SQUARE_WAVE_HALF_PERIOD) -> float:
    """Unit square wave that starts at +1 and flips sign every half period."""
    if t < 0:
        raise ValidationError(f"t must be non-negative, got {t}")
    # Guard against t = k*dt landing a hair below a switching instant.
    phase = math.floor(t / half_period + 1e-9)
    return 1.0 if phase % 2 == 0 else -1.0


def square_wave_inputs(steps: int,
                       dt: float,
                       half_period: float = SQUARE_WAVE_HALF_PERIOD) -> np.ndarray:
    """Sampled square wave as an input sequence of shape ``(steps, 1)``."""
    return np.array([[square_wave(k * dt, half_period)] for k in range(steps)],
                    dtype=float).reshape(steps, N_INPUTS)


def write_trajectory_csv(path: str | Path,
                         states: np.ndarray,
                         inputs: np.ndarray,
                         dt: float) -> None:
    """Write ``k,t,x1,x2,u``; the final row has no input and leaves ``u`` empty."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "t", "x1", "x2", "u"])
        for k, x in enumerate(states):
            u = repr(float(inputs[k])) if k < len(inputs) else ""
            w.writerow([k, repr(k * dt), repr(float(x[0])), repr(float(x[1])), u])
