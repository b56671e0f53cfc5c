"""Kuramoto-Sivashinsky equation u_t + u u_x + u_xx + u_xxxx = 0 on a periodic domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .etdrk4 import etdrk4_coefficients, etdrk4_step
from .pendulum import NumericalError


class KSSolver:
    """Pseudospectral ETDRK4 integrator on ``n_grid`` points over ``[0, length)``.

    Fields are carried as real-FFT coefficients; the quadratic term is dealiased
    with the 2/3 rule.
    """

    def __init__(self, n_grid: int = 128, length: float = 22.0, dt: float = 0.25, nonlinear: bool = True):
        self.n_grid, self.length, self.dt = n_grid, length, dt
        self.include_nonlinear = nonlinear
        n = np.arange(n_grid // 2 + 1)
        self.k = 2.0 * np.pi * n / length
        self.linear_symbol = self.k**2 - self.k**4
        self.dealias = (n <= n_grid // 3).astype(np.float64)
        self.ik = 1j * self.k * self.dealias
        self.coeffs = etdrk4_coefficients(self.linear_symbol, dt)
        self.x = length * np.arange(n_grid) / n_grid

    def to_spectral(self, u: np.ndarray) -> np.ndarray:
        return np.fft.rfft(u, axis=-1)

    def to_physical(self, u_hat: np.ndarray) -> np.ndarray:
        return np.fft.irfft(u_hat, n=self.n_grid, axis=-1)

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        if not self.include_nonlinear:
            return np.zeros_like(u_hat)
        u = self.to_physical(u_hat * self.dealias)
        return -0.5 * self.ik * np.fft.rfft(u * u, axis=-1)

    def step(self, u_hat: np.ndarray) -> np.ndarray:
        out = etdrk4_step(u_hat, self.coeffs, self.nonlinear)
        if not np.all(np.isfinite(out)):
            raise NumericalError("KS blow-up: non-finite spectral coefficients")
        return out


def ks_step(u_hat: np.ndarray, solver: KSSolver) -> np.ndarray:
    return solver.step(u_hat)


@dataclass
class KSConfig:
    n_per_regime: int = 200
    n_grid: int = 128
    length: float = 22.0
    dt: float = 0.25
    t_transient: float = 50.0
    steps_per_snapshot: int = 3
    t_record: float = 30.0
    blowup_bound: float = 1e3
    max_attempts: int = 20
    train_fraction: float = 0.8
    seed: int = 0
    n_trajectories: int | None = None  # overrides n_per_regime; regimes as even as possible

    @property
    def dt_model(self) -> float:
        return self.dt * self.steps_per_snapshot

    @property
    def n_snapshots(self) -> int:
        return int(round(self.t_record / self.dt_model)) + 1


def simulate_ks(u0: np.ndarray, cfg: KSConfig, solver: KSSolver | None = None) -> np.ndarray:
    """Run a batch of initial fields (B, N_x) through transient and recording windows.

    Returns (B, N_t, N_x); rows that blow up come back as NaN.
    """
    solver = solver or KSSolver(cfg.n_grid, cfg.length, cfg.dt)
    v = solver.to_spectral(np.atleast_2d(u0))
    out = np.full((v.shape[0], cfg.n_snapshots, cfg.n_grid), np.nan)
    n_trans = int(round(cfg.t_transient / cfg.dt))
    with np.errstate(all="ignore"):
        for _ in range(n_trans):
            v = etdrk4_step(v, solver.coeffs, solver.nonlinear)
        for n in range(cfg.n_snapshots):
            if n:
                for _ in range(cfg.steps_per_snapshot):
                    v = etdrk4_step(v, solver.coeffs, solver.nonlinear)
            out[:, n] = solver.to_physical(v)
    return out
