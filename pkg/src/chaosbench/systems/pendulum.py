"""Planar double pendulum with unit masses and unit rod lengths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

G = 9.81


class NumericalError(FloatingPointError):
    """Non-finite values appeared during integration."""


def dp_derivatives(state: np.ndarray, g: float = G) -> np.ndarray:
    """Time derivative of ``(theta1, theta2, omega1, omega2)`` along the last axis.

    Equations of motion for m1 = m2 = 1 and L1 = L2 = 1.
    """
    th1, th2, w1, w2 = np.moveaxis(np.asarray(state, dtype=np.float64), -1, 0)
    d = th1 - th2
    sd, cd = np.sin(d), np.cos(d)
    den = 3.0 - np.cos(2.0 * d)
    a1 = (-3.0 * g * np.sin(th1) - g * np.sin(th1 - 2.0 * th2) - 2.0 * sd * (w2 * w2 + w1 * w1 * cd)) / den
    a2 = 2.0 * sd * (2.0 * w1 * w1 + 2.0 * g * np.cos(th1) + w2 * w2 * cd) / den
    return np.stack([w1, w2, a1, a2], axis=-1)


def dp_energy(state: np.ndarray, g: float = G) -> np.ndarray:
    """Kinetic plus potential energy; potential is zero at pivot height."""
    th1, th2, w1, w2 = np.moveaxis(np.asarray(state, dtype=np.float64), -1, 0)
    kinetic = w1 * w1 + 0.5 * w2 * w2 + w1 * w2 * np.cos(th1 - th2)
    potential = -g * (2.0 * np.cos(th1) + np.cos(th2))
    return kinetic + potential


def rk4_step(f, y: np.ndarray, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite state in rk4_step")
    return out


def integrate(f, y0: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    y = np.asarray(y0, dtype=np.float64)
    for _ in range(n_steps):
        y = rk4_step(f, y, dt)
    return y


def to_sincos(state: np.ndarray) -> np.ndarray:
    """(theta1, theta2, omega1, omega2) -> (sin t1, cos t1, sin t2, cos t2, omega1, omega2)."""
    th1, th2, w1, w2 = np.moveaxis(state, -1, 0)
    return np.stack([np.sin(th1), np.cos(th1), np.sin(th2), np.cos(th2), w1, w2], axis=-1)


def from_sincos(x: np.ndarray, unwrap: bool = True) -> np.ndarray:
    """Inverse of :func:`to_sincos` via atan2; angles unwrapped along the time axis (-2)."""
    x = np.asarray(x)
    th1 = np.arctan2(x[..., 0], x[..., 1])
    th2 = np.arctan2(x[..., 2], x[..., 3])
    if unwrap and x.ndim >= 2:
        th1 = np.unwrap(th1, axis=-1)
        th2 = np.unwrap(th2, axis=-1)
    return np.stack([th1, th2, x[..., 4], x[..., 5]], axis=-1)


def relative_energy_drift(energies: np.ndarray) -> np.ndarray:
    """max_t |E(t) - E(0)| / max(|E(0)|, 1) along the last axis.

    The floor of 1 J keeps the ratio meaningful for trajectories whose total
    energy happens to sit near the (arbitrary) zero of the potential.
    """
    e0 = energies[..., :1]
    return np.max(np.abs(energies - e0), axis=-1) / np.maximum(np.abs(e0[..., 0]), 1.0)


@dataclass
class DPConfig:
    n_trajectories: int = 2000
    t_final: float = 10.0
    dt_save: float = 0.05
    substeps: int = 10
    theta_max: float = np.pi
    omega_max: float = 6.0
    g: float = G
    max_abs_omega: float = 50.0
    max_energy_drift: float = 1e-3
    max_attempts: int = 20
    train_fraction: float = 0.8
    seed: int = 0

    @property
    def n_snapshots(self) -> int:
        return int(round(self.t_final / self.dt_save)) + 1


def simulate_dp(ic: np.ndarray, cfg: DPConfig) -> np.ndarray:
    """Integrate a batch of initial states (B, 4); returns (B, N_t, 4) physical states."""
    dt = cfg.dt_save / cfg.substeps
    f = lambda y: dp_derivatives(y, cfg.g)  # noqa: E731
    y = np.array(ic, dtype=np.float64)
    out = np.empty((y.shape[0], cfg.n_snapshots, 4))
    out[:, 0] = y
    with np.errstate(all="ignore"):
        for n in range(1, cfg.n_snapshots):
            for _ in range(cfg.substeps):
                k1 = f(y)
                k2 = f(y + 0.5 * dt * k1)
                k3 = f(y + 0.5 * dt * k2)
                k4 = f(y + dt * k3)
                y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[:, n] = y
    return out


def accept_mask(traj: np.ndarray, cfg: DPConfig) -> np.ndarray:
    finite = np.all(np.isfinite(traj), axis=(1, 2))
    ok = finite.copy()
    safe = np.where(np.isfinite(traj), traj, 0.0)
    ok &= np.max(np.abs(safe[..., 2:]), axis=(1, 2)) <= cfg.max_abs_omega
    drift = relative_energy_drift(dp_energy(safe, cfg.g))
    ok &= drift <= cfg.max_energy_drift
    return ok


def sample_dp_ic(rng: np.random.Generator, cfg: DPConfig) -> np.ndarray:
    th = rng.uniform(-cfg.theta_max, cfg.theta_max, size=2)
    om = rng.uniform(-cfg.omega_max, cfg.omega_max, size=2)
    return np.concatenate([th, om])
