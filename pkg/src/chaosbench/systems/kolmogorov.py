"""Forced 2-D Navier-Stokes (Kolmogorov flow) in vorticity-streamfunction form.

    omega_t + J(psi, omega) = (1/Re) lap(omega) + sin(k_f y),   lap(psi) = -omega

on ``[0, 2pi)^2``. Arrays are laid out (..., y, x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .etdrk4 import etdrk4_coefficients, etdrk4_step
from .pendulum import NumericalError


class KFSolver:
    def __init__(self, n_grid: int = 64, reynolds: float = 35.0, k_forcing: int = 4, dt: float = 0.01):
        self.n_grid, self.reynolds, self.k_forcing, self.dt = n_grid, reynolds, k_forcing, dt
        kx = np.arange(n_grid // 2 + 1, dtype=np.float64)
        ky = np.fft.fftfreq(n_grid, d=1.0 / n_grid)
        self.kx = kx[None, :]
        self.ky = ky[:, None]
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        cutoff = n_grid // 3
        self.dealias = ((np.abs(self.kx) <= cutoff) & (np.abs(self.ky) <= cutoff)).astype(np.float64)
        self.linear_symbol = -self.k2 / reynolds
        self.coeffs = etdrk4_coefficients(self.linear_symbol, dt)
        grid = 2.0 * np.pi * np.arange(n_grid) / n_grid
        self.x = grid[None, :]
        self.y = grid[:, None]
        self.forcing = np.sin(k_forcing * self.y) * np.ones((1, n_grid))
        self.forcing_hat = np.fft.rfft2(self.forcing)

    def to_spectral(self, w: np.ndarray) -> np.ndarray:
        return np.fft.rfft2(w, axes=(-2, -1))

    def to_physical(self, w_hat: np.ndarray) -> np.ndarray:
        return np.fft.irfft2(w_hat, s=(self.n_grid, self.n_grid), axes=(-2, -1))

    def streamfunction_hat(self, w_hat: np.ndarray) -> np.ndarray:
        return w_hat * self.inv_k2

    def jacobian_hat(self, w_hat: np.ndarray) -> np.ndarray:
        """Dealiased spectral J(psi, omega) = psi_x omega_y - psi_y omega_x."""
        wd = w_hat * self.dealias
        psi = self.streamfunction_hat(wd)
        psi_x = self.to_physical(1j * self.kx * psi)
        psi_y = self.to_physical(1j * self.ky * psi)
        w_x = self.to_physical(1j * self.kx * wd)
        w_y = self.to_physical(1j * self.ky * wd)
        return self.to_spectral(psi_x * w_y - psi_y * w_x) * self.dealias

    def nonlinear(self, w_hat: np.ndarray) -> np.ndarray:
        return self.forcing_hat - self.jacobian_hat(w_hat)

    def step(self, w_hat: np.ndarray) -> np.ndarray:
        out = etdrk4_step(w_hat, self.coeffs, self.nonlinear)
        if not np.all(np.isfinite(out)):
            raise NumericalError("Kolmogorov blow-up: non-finite spectral coefficients")
        return out

    def laminar_state(self) -> np.ndarray:
        return (self.reynolds / self.k_forcing**2) * self.forcing


def poisson_solve(w: np.ndarray, solver: KFSolver | None = None) -> np.ndarray:
    """Streamfunction with lap(psi) = -omega and zero mean."""
    n = w.shape[-1]
    solver = solver or KFSolver(n_grid=n)
    return solver.to_physical(solver.streamfunction_hat(solver.to_spectral(w)))


def poisson_residual(w_hat: np.ndarray, solver: KFSolver) -> float:
    """max |lap(psi) + omega| over nonzero modes, in spectral space (normalized by grid size)."""
    psi = solver.streamfunction_hat(w_hat)
    res = -solver.k2 * psi + w_hat
    res = np.where(solver.k2 > 0, res, 0.0)
    return float(np.max(np.abs(res))) / solver.n_grid**2


def kf_step(w_hat: np.ndarray, solver: KFSolver) -> np.ndarray:
    return solver.step(w_hat)


@dataclass
class KFConfig:
    n_per_regime: int = 200
    n_grid: int = 64
    reynolds: float = 35.0
    k_forcing: int = 4
    dt: float = 0.01
    t_transient: float = 50.0
    steps_per_snapshot: int = 75
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


def simulate_kf(w0: np.ndarray, cfg: KFConfig, solver: KFSolver | None = None) -> np.ndarray:
    solver = solver or KFSolver(cfg.n_grid, cfg.reynolds, cfg.k_forcing, cfg.dt)
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim == 2:
        w0 = w0[None]
    v = solver.to_spectral(w0)
    out = np.full((v.shape[0], cfg.n_snapshots, cfg.n_grid, cfg.n_grid), np.nan)
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
