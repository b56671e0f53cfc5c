"""Fourth-order exponential time differencing Runge-Kutta for diagonal stiff operators.

The phi-function combinations are averaged over points on a circle in the complex
plane around ``L * dt`` so that the cancellation near ``L * dt = 0`` never happens
in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CONTOUR = 32


@dataclass(frozen=True)
class ETDRK4Coefficients:
    dt: float
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray


def etdrk4_coefficients(linear_symbol, dt: float, n_contour: int = N_CONTOUR) -> ETDRK4Coefficients:
    if dt <= 0:
        raise ValueError("dt must be positive")
    L = np.asarray(linear_symbol, dtype=np.float64)
    roots = np.exp(2j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    LR = dt * L[..., None] + roots
    eLR = np.exp(LR)
    eLR2 = np.exp(LR / 2.0)
    LR2, LR3 = LR * LR, LR**3
    Q = dt * np.real(np.mean((eLR2 - 1.0) / LR, axis=-1))
    f1 = dt * np.real(np.mean((-4.0 - LR + eLR * (4.0 - 3.0 * LR + LR2)) / LR3, axis=-1))
    f2 = dt * np.real(np.mean((2.0 + LR + eLR * (LR - 2.0)) / LR3, axis=-1))
    f3 = dt * np.real(np.mean((-4.0 - 3.0 * LR - LR2 + eLR * (4.0 - LR)) / LR3, axis=-1))
    return ETDRK4Coefficients(dt, np.exp(dt * L), np.exp(dt * L / 2.0), Q, f1, f2, f3)


def etdrk4_step(v: np.ndarray, c: ETDRK4Coefficients, nonlinear) -> np.ndarray:
    """Advance spectral state ``v`` one step; ``nonlinear(v)`` returns the spectral N(v)."""
    Nv = nonlinear(v)
    a = c.E2 * v + c.Q * Nv
    Na = nonlinear(a)
    b = c.E2 * v + c.Q * Na
    Nb = nonlinear(b)
    cc = c.E2 * a + c.Q * (2.0 * Nb - Nv)
    Nc = nonlinear(cc)
    return c.E * v + Nv * c.f1 + 2.0 * (Na + Nb) * c.f2 + Nc * c.f3
