"""Embedded Dormand-Prince 5(4) integrator with per-row adaptive step control.

Works on plain numpy arrays and on autodiff ``Tensor`` values alike: stage
combinations use only ``+`` and multiplication by arrays, so gradients flow
through every accepted step. Step sizes themselves are treated as constants.
Each row (leading index) carries its own clock and step size, which keeps the
result for one sample independent of what else shares the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor

# Butcher tableau
C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
B5 = A[6] + (0.0,)
B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
E = tuple(b5 - b4 for b5, b4 in zip(B5, B4))


class StiffnessError(RuntimeError):
    """The step budget ran out before reaching the end of the interval."""


@dataclass(frozen=True)
class Dopri5Config:
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 1000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _combine(y, h, coeffs, ks):
    acc = None
    for a, k in zip(coeffs, ks):
        if a == 0.0:
            continue
        term = k * a
        acc = term if acc is None else acc + term
    return y + acc * h


def _blend(new, old, mask: np.ndarray):
    if mask.all():
        return new
    if not mask.any():
        return old
    m = mask.astype(np.float64)
    return new * m + old * (1.0 - m)


def dopri5_integrate(f, y0, h_total: float, config: Dopri5Config | None = None, stats: dict | None = None):
    """Integrate ``dy/ds = f(y)`` from s = 0 to ``h_total``; returns y(h_total).

    ``y0`` has shape (..., D); error control is per leading index.
    """
    cfg = config or Dopri5Config()
    if h_total <= 0:
        raise ValueError("integration interval must be positive")
    y = y0
    shape = _val(y0).shape[:-1] + (1,)
    t = np.zeros(shape)
    h = np.full(shape, float(h_total))
    done = np.zeros(shape, dtype=bool)
    k1 = f(y)
    attempts = 0
    n_accepted = 0
    while not done.all():
        attempts += 1
        if attempts > cfg.max_steps:
            raise StiffnessError(f"dopri5 exceeded {cfg.max_steps} steps")
        remaining = h_total - t
        last = h >= remaining
        hh = np.where(done, 0.0, np.where(last, remaining, h))
        ks = [k1]
        for i in range(1, 6):
            ks.append(f(_combine(y, hh, A[i], ks)))
        y5 = _combine(y, hh, A[6], ks)
        k7 = f(y5)
        ks.append(k7)

        kv = [_val(k) for k in ks]
        err = hh * sum(e * k for e, k in zip(E, kv) if e != 0.0)
        yv, y5v = _val(y), _val(y5)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(yv), np.abs(y5v))
        with np.errstate(invalid="ignore", over="ignore"):
            err_norm = np.sqrt(np.mean((err / scale) ** 2, axis=-1, keepdims=True))
        if not np.all(np.isfinite(err_norm[~done])):
            raise StiffnessError("non-finite error estimate in dopri5")
        accept = (~done) & (err_norm <= 1.0)
        y = _blend(y5, y, accept)
        k1 = _blend(k7, k1, accept)
        t = np.where(accept, np.where(last, h_total, t + hh), t)
        done = done | (accept & last)
        with np.errstate(divide="ignore"):
            fac = np.where(err_norm > 0, cfg.safety * err_norm ** (-0.2), cfg.max_factor)
        fac = np.clip(fac, cfg.min_factor, np.where(accept, cfg.max_factor, 1.0))
        h = np.where(done, h, hh * fac)
        n_accepted += int(accept.sum())
    if stats is not None:
        stats["attempts"] = attempts
        stats["accepted"] = n_accepted
    return y
