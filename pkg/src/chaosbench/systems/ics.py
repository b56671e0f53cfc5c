"""Low-pass filtered random Fourier initial conditions for the PDE benchmarks."""

from __future__ import annotations

import numpy as np

# regime -> (max retained wavenumber, RMS amplitude band)
REGIMES: dict[str, tuple[int, tuple[float, float]]] = {
    "low": (3, (0.1, 0.4)),
    "medium": (5, (0.4, 0.8)),
    "high": (7, (0.8, 1.2)),
}


def filtered_fourier_spectrum(regime: str, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Real-FFT coefficients of a zero-mean random field band-limited to the regime cutoff.

    Coefficients above the cutoff (and the mean) are exactly zero. The field is
    rescaled so its RMS falls uniformly inside the regime's amplitude band.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}")
    cutoff, (lo, hi) = REGIMES[regime]
    noise = rng.standard_normal(shape)
    if len(shape) == 1:
        spec = np.fft.rfft(noise)
        n = np.arange(spec.shape[-1])
        keep = (n >= 1) & (n <= cutoff)
    elif len(shape) == 2:
        spec = np.fft.rfft2(noise)
        ky = np.fft.fftfreq(shape[0], d=1.0 / shape[0])[:, None]
        kx = np.arange(spec.shape[-1])[None, :]
        kk = np.sqrt(kx**2 + ky**2)
        keep = (kk > 0) & (kk <= cutoff)
    else:
        raise ValueError("only 1-D and 2-D fields are supported")
    spec = np.where(keep, spec, 0.0)
    field = _inverse(spec, shape)
    rms = np.sqrt(np.mean(field**2))
    target = rng.uniform(lo, hi)
    return spec * (target / rms)


def _inverse(spec: np.ndarray, shape) -> np.ndarray:
    if len(shape) == 1:
        return np.fft.irfft(spec, n=shape[0])
    return np.fft.irfft2(spec, s=shape)


def sample_filtered_fourier_ic(regime: str, seed, shape: tuple[int, ...] = (128,)) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _inverse(filtered_fourier_spectrum(regime, rng, shape), shape)
