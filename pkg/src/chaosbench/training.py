"""One-step teacher-forcing training shared by every surrogate."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    source_split: str = "train"
    n_samples: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_FLOOR)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same shape")

    def arrays(self) -> dict:
        return {"norm.mu": self.mu, "norm.sigma": self.sigma}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "NormStats":
        return cls(arrays["norm.mu"], arrays["norm.sigma"], meta.get("source_split", "train"), meta.get("n_samples", 0))


def compute_norm_stats(data, split: str = "train") -> NormStats:
    """Componentwise mean/std over every snapshot of the split.

    ``data`` is a TrajectoryDataset or a raw (N, T, D) array (treated as the split itself).
    """
    arr = data.split(split) if hasattr(data, "split") else np.asarray(data, dtype=np.float64)
    if arr.size == 0 or arr.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    flat = arr.reshape(-1, arr.shape[-1])
    return NormStats(flat.mean(axis=0), flat.std(axis=0), split, flat.shape[0])


def normalize(s, stats: NormStats):
    return (np.asarray(s) - stats.mu) / stats.sigma


def denormalize(s, stats: NormStats):
    return np.asarray(s) * stats.sigma + stats.mu


def teacher_forcing_loss(model, batch) -> Tensor:
    """Mean over trajectories and transitions of the squared one-step error norm."""
    seq = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    if seq.ndim != 3:
        raise ad.ShapeError(f"expected (B, T, D) batch, got {seq.shape}")
    B, T, _ = seq.shape
    if T < 2:
        raise ValueError("teacher forcing needs T >= 2")
    pred = model.teacher_forced(seq)
    return ad.sq_norm(pred - seq[:, 1:, :]) * (1.0 / (B * (T - 1)))


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    clip: float = 1.0
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1")


@dataclass
class TrainResult:
    model: object
    stats: NormStats
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss or nan)
    best_epoch: int = 0
    best_val: float = float("inf")
    config: dict = field(default_factory=dict)


def _batched_loss(model, data: np.ndarray, chunk: int = 64) -> float:
    total = 0.0
    with ad.no_grad():
        for s in range(0, data.shape[0], chunk):
            part = data[s : s + chunk]
            total += float(teacher_forcing_loss(model, part).data) * part.shape[0]
    return total / data.shape[0]


def train_model(model, dataset, config: TrainConfig | None = None, stats: NormStats | None = None) -> TrainResult:
    """Adam on the teacher-forcing loss; restores the parameters with lowest validation loss.

    The training split alone determines ``stats`` when they are not supplied.
    """
    cfg = config or TrainConfig()
    stats = stats or compute_norm_stats(dataset, "train")
    if stats.source_split != "train":
        raise TrainingError(f"normalization statistics come from split {stats.source_split!r}, not 'train'")
    train = normalize(dataset.split("train"), stats)
    val = normalize(dataset.split("val"), stats)
    if train.shape[0] == 0:
        raise TrainingError("training split is empty")
    if val.shape[0] == 0:
        log.warning("validation split is empty; selecting on training loss")
        val = train

    rng = np.random.default_rng([cfg.seed, 21])
    params = model.parameters()
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model, stats, config=asdict(cfg))
    best_state = model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train.shape[0])
        running = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            batch = train[perm[s : s + cfg.batch_size]]
            model.zero_grad()
            loss = teacher_forcing_loss(model, batch)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite training loss at epoch {epoch} (batch offset {s})")
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            grads, _ = clip_grad_norm(grads, cfg.clip)
            new, opt = adam_step({k: p.data for k, p in params.items()}, grads, opt)
            for k, p in params.items():
                p.data = new[k]
            running += float(loss.data) * batch.shape[0]
        train_loss = running / train.shape[0]
        val_loss = float("nan")
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            val_loss = _batched_loss(model, val)
            if not np.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            if val_loss < result.best_val:
                result.best_val, result.best_epoch = val_loss, epoch
                best_state = model.state_dict()
        result.history.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.4e val %.4e", epoch, train_loss, val_loss)
    model.load_state_dict(best_state)
    return result


def write_log_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
