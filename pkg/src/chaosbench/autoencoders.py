"""Autoencoders that compress PDE snapshots into the latent spaces the surrogates evolve.

A dense network handles 1-D Kuramoto-Sivashinsky fields and a strided
convolutional network handles 2-D vorticity fields. Both standardize their
input per grid point with training-split statistics before encoding and undo
it after decoding, so callers always work in physical units.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import ContainerError, read_container, write_container
from .nn import MLP, Linear, Module, uniform_init
from .optim import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class AETrainingError(RuntimeError):
    pass


class FrozenError(RuntimeError):
    pass


class Autoencoder(Module):
    kind = "base"

    def __init__(self, input_shape: tuple, latent_dim: int):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        self.mu = np.zeros(self.input_shape)
        self.sigma = np.ones(self.input_shape)
        self.frozen = False

    # subclasses implement the normalized-space networks
    def encode_t(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def decode_t(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def set_normalization(self, mu: np.ndarray, sigma: np.ndarray) -> None:
        if self.frozen:
            raise FrozenError("autoencoder is frozen")
        self.mu = np.asarray(mu, dtype=np.float64).reshape(self.input_shape)
        self.sigma = np.maximum(np.asarray(sigma, dtype=np.float64).reshape(self.input_shape), SIGMA_FLOOR)

    def fit_normalization(self, snapshots: np.ndarray) -> None:
        self.set_normalization(snapshots.mean(axis=0), snapshots.std(axis=0))

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-len(self.input_shape):] != self.input_shape:
            raise ad.ShapeError(f"expected trailing shape {self.input_shape}, got {x.shape}")
        return x

    def encode(self, x: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Physical fields (..., *input_shape) -> latents (..., d_z)."""
        x = self._check(x)
        lead = x.shape[: x.ndim - len(self.input_shape)]
        flat = ((x - self.mu) / self.sigma).reshape((-1,) + self.input_shape)
        out = np.empty((flat.shape[0], self.latent_dim))
        with ad.no_grad():
            for s in range(0, flat.shape[0], chunk):
                out[s : s + chunk] = self.encode_t(Tensor(flat[s : s + chunk])).data
        return out.reshape(lead + (self.latent_dim,))

    def decode(self, z: np.ndarray, chunk: int = 512) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise ad.ShapeError(f"expected latent width {self.latent_dim}, got {z.shape}")
        lead = z.shape[:-1]
        flat = z.reshape(-1, self.latent_dim)
        out = np.empty((flat.shape[0],) + self.input_shape)
        with ad.no_grad():
            for s in range(0, flat.shape[0], chunk):
                out[s : s + chunk] = self.decode_t(Tensor(flat[s : s + chunk])).data
        return (out * self.sigma + self.mu).reshape(lead + self.input_shape)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))

    def freeze(self) -> "Autoencoder":
        self.frozen = True
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.data.flags.writeable = False
        self.mu.flags.writeable = False
        self.sigma.flags.writeable = False
        return self

    def load_state_dict(self, state) -> None:
        if self.frozen:
            raise FrozenError("autoencoder is frozen")
        super().load_state_dict(state)

    def config(self) -> dict:
        raise NotImplementedError


class DenseAE(Autoencoder):
    """GELU MLP encoder n -> widths -> d_z and a mirrored decoder."""

    kind = "dense"

    def __init__(self, n_grid: int = 128, hidden=(128, 64), latent_dim: int = 32, seed: int = 0):
        super().__init__((n_grid,), latent_dim)
        rng = np.random.default_rng([seed, 11])
        self.hidden = tuple(hidden)
        sizes = [n_grid, *self.hidden, latent_dim]
        self.encoder = self.add_module("encoder", MLP(sizes, rng))
        self.decoder = self.add_module("decoder", MLP(sizes[::-1], rng))

    def encode_t(self, x):
        return self.encoder(x)

    def decode_t(self, z):
        return self.decoder(z)

    def config(self):
        return {"n_grid": self.input_shape[0], "hidden": list(self.hidden), "latent_dim": self.latent_dim}


class ConvAE(Autoencoder):
    """Three stride-2 convolutions and a linear projection; transpose convolutions on the way back."""

    kind = "conv"

    def __init__(self, n_grid: int = 64, channels=(16, 32, 64), latent_dim: int = 256, kernel: int = 3, seed: int = 0):
        super().__init__((n_grid, n_grid), latent_dim)
        if n_grid % (2 ** len(channels)):
            raise ValueError("grid size must be divisible by 2**len(channels)")
        rng = np.random.default_rng([seed, 12])
        self.channels, self.kernel = tuple(channels), kernel
        self.bottleneck = n_grid // 2 ** len(channels)
        chans = (1, *self.channels)
        self.enc = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            m = Module()
            m.add_param("w", uniform_init(rng, (b, a, kernel, kernel), a * kernel * kernel))
            m.add_param("b", uniform_init(rng, (b,), a * kernel * kernel))
            self.enc.append(self.add_module(f"enc.{i}", m))
        flat = self.channels[-1] * self.bottleneck**2
        self.to_latent = self.add_module("to_latent", Linear(flat, latent_dim, rng))
        self.from_latent = self.add_module("from_latent", Linear(latent_dim, flat, rng))
        self.dec = []
        rev = chans[::-1]
        for i, (a, b) in enumerate(zip(rev[:-1], rev[1:])):
            m = Module()
            m.add_param("w", uniform_init(rng, (a, b, kernel, kernel), a * kernel * kernel))
            m.add_param("b", uniform_init(rng, (b,), a * kernel * kernel))
            self.dec.append(self.add_module(f"dec.{i}", m))

    def encode_t(self, x):
        B = x.shape[0]
        h = x.reshape(B, 1, *self.input_shape)
        pad = self.kernel // 2
        for m in self.enc:
            h = ad.gelu(ad.conv2d(h, m._params["w"], m._params["b"], stride=2, padding=pad))
        return self.to_latent(h.reshape(B, -1))

    def decode_t(self, z):
        B = z.shape[0]
        s = self.bottleneck
        h = ad.gelu(self.from_latent(z)).reshape(B, self.channels[-1], s, s)
        pad = self.kernel // 2
        for i, m in enumerate(self.dec):
            h = ad.conv_transpose2d(h, m._params["w"], m._params["b"], stride=2, padding=pad, output_padding=1)
            if i < len(self.dec) - 1:
                h = ad.gelu(h)
        return h.reshape(B, *self.input_shape)

    def config(self):
        return {"n_grid": self.input_shape[0], "channels": list(self.channels),
                "latent_dim": self.latent_dim, "kernel": self.kernel}


AE_TYPES = {"dense": DenseAE, "conv": ConvAE}


def default_autoencoder(system: str, seed: int = 0) -> Autoencoder:
    if system == "ks":
        return DenseAE(128, (128, 64), 32, seed=seed)
    if system == "kf":
        return ConvAE(64, (16, 32, 64), 256, seed=seed)
    raise ValueError(f"no autoencoder defined for system {system!r}")


def save_autoencoder(path, ae: Autoencoder, meta: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in ae.state_dict().items()}
    arrays["norm.mu"] = ae.mu
    arrays["norm.sigma"] = ae.sigma
    header = {"kind": "autoencoder", "architecture": {"type": ae.kind, "config": ae.config()}, "extra": meta or {}}
    write_container(path, arrays, header)


def load_autoencoder(path, freeze: bool = True) -> Autoencoder:
    arrays, header = read_container(path)
    if header.get("kind") != "autoencoder":
        raise ContainerError(f"{path}: not an autoencoder checkpoint")
    arch = header["architecture"]
    ae = AE_TYPES[arch["type"]](**arch["config"])
    ae.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
    ae.set_normalization(arrays["norm.mu"], arrays["norm.sigma"])
    return ae.freeze() if freeze else ae


@dataclass
class AEConfig:
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid autoencoder training config {self}")


def _recon_loss(ae: Autoencoder, x: np.ndarray) -> Tensor:
    xt = Tensor(x)
    diff = ae.decode_t(ae.encode_t(xt)) - xt
    return ad.sq_norm(diff) * (1.0 / x.size)


def _val_mse(ae: Autoencoder, x: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    with ad.no_grad():
        for s in range(0, x.shape[0], chunk):
            total += float(_recon_loss(ae, x[s : s + chunk]).data) * x[s : s + chunk].size
    return total / x.size


def train_autoencoder(dataset, config: AEConfig | None = None, ae: Autoencoder | None = None):
    """Fit on training-split snapshots; returns the frozen best-validation model and the epoch log.

    The reconstruction MSE is measured on standardized fields. Each log row is
    ``(epoch, train_mse, val_mse)``.
    """
    cfg = config or AEConfig()
    train = dataset.split("train")
    val = dataset.split("val")
    if train.shape[0] == 0:
        raise ValueError("training split is empty")
    shape = dataset.state_shape
    x_train = train.reshape((-1,) + shape)
    x_val = val.reshape((-1,) + shape) if val.shape[0] else x_train
    if ae is None:
        ae = default_autoencoder(dataset.system, cfg.seed)
    ae.fit_normalization(x_train)
    xt = (x_train - ae.mu) / ae.sigma
    xv = (x_val - ae.mu) / ae.sigma

    rng = np.random.default_rng([cfg.seed, 13])
    params = ae.parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = (np.inf, -1, ae.state_dict())
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(xt.shape[0])
        running = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            batch = xt[perm[s : s + cfg.batch_size]]
            ae.zero_grad()
            loss = _recon_loss(ae, batch)
            if not np.isfinite(loss.data):
                raise AETrainingError(f"non-finite reconstruction loss at epoch {epoch}")
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            if cfg.clip is not None:
                grads, _ = clip_grad_norm(grads, cfg.clip)
            new, state = adam_step({k: p.data for k, p in params.items()}, grads, state)
            for k, p in params.items():
                p.data = new[k]
            running += float(loss.data) * batch.shape[0]
        train_mse = running / xt.shape[0]
        val_mse = _val_mse(ae, xv)
        if not np.isfinite(val_mse):
            raise AETrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_mse, val_mse))
        if val_mse < best[0]:
            best = (val_mse, epoch, ae.state_dict())
        log.debug("ae epoch %d train %.3e val %.3e", epoch, train_mse, val_mse)
    ae.load_state_dict(best[2])
    ae.best_epoch = best[1]
    ae.train_config = asdict(cfg)
    return ae.freeze(), history


def energy_spectrum(fields: np.ndarray, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean energy per wavenumber (shell) over leading axes.

    Normalized so the spectrum of each field sums to the grid mean of the squared
    field: 1-D uses one-sided rfft amplitudes |u_k|^2 / N^2 doubled for the paired
    modes; 2-D sums |w_k|^2 / N^4 of the full transform into shells round(|k|).
    """
    f = np.asarray(fields, dtype=np.float64)
    if ndim == 1:
        n = f.shape[-1]
        spec = np.abs(np.fft.rfft(f, axis=-1)) ** 2 / n**2
        weight = np.full(spec.shape[-1], 2.0)
        weight[0] = 1.0
        if n % 2 == 0:
            weight[-1] = 1.0
        e = (spec * weight).reshape(-1, spec.shape[-1]).mean(axis=0)
        return np.arange(spec.shape[-1]), e
    if ndim == 2:
        ny, nx = f.shape[-2:]
        power = np.abs(np.fft.fft2(f, axes=(-2, -1))) ** 2 / (nx * ny) ** 2
        ky = np.fft.fftfreq(ny, d=1.0 / ny)[:, None]
        kx = np.fft.fftfreq(nx, d=1.0 / nx)[None, :]
        shell = np.rint(np.sqrt(kx**2 + ky**2)).astype(int).ravel()
        mean_power = power.reshape(-1, ny * nx).mean(axis=0)
        e = np.bincount(shell, weights=mean_power)
        return np.arange(e.size), e
    raise ValueError("ndim must be 1 or 2")


@dataclass
class ReconstructionReport:
    relative_error: np.ndarray  # (N_t,)
    wavenumbers: np.ndarray
    spectrum_true: np.ndarray
    spectrum_recon: np.ndarray

    @property
    def mean_relative_error(self) -> float:
        return float(np.mean(self.relative_error))


def reconstruction_report(ae, dataset, split: str = "val") -> ReconstructionReport:
    if getattr(ae, "frozen", True) is False:
        raise FrozenError("reconstruction reports require a frozen autoencoder")
    x = dataset.split(split)
    if x.shape[0] == 0:
        x = dataset.split("all")
    xr = ae.reconstruct(x)
    axes = tuple(range(2, x.ndim))
    num = np.sqrt(np.sum((xr - x) ** 2, axis=axes))
    den = np.sqrt(np.sum(x**2, axis=axes))
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    ndim = x.ndim - 2
    k, e_true = energy_spectrum(x, ndim)
    _, e_rec = energy_spectrum(xr, ndim)
    return ReconstructionReport(rel.mean(axis=0), k, e_true, e_rec)


def encode_dataset(ae: Autoencoder, dataset):
    """Latent copy of a field dataset (same split, regimes and seed)."""
    from .systems.dataset import TrajectoryDataset

    z = ae.encode(dataset.trajectories)
    meta = dict(dataset.meta)
    meta["latent"] = True
    return TrajectoryDataset(dataset.system, z, dataset.dt_model, list(dataset.regimes),
                             dataset.train_mask.copy(), dataset.seed, meta)
