"""Trajectory datasets: assembly for the three benchmarks and the on-disk container."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..container import read_container, write_container
from .ics import REGIMES, sample_filtered_fourier_ic
from .kolmogorov import KFConfig, KFSolver, simulate_kf
from .ks import KSConfig, KSSolver, simulate_ks
from .pendulum import DPConfig, accept_mask, dp_energy, sample_dp_ic, simulate_dp, to_sincos

log = logging.getLogger(__name__)

SYSTEMS = ("dp", "ks", "kf")
REGIME_ORDER = ("low", "medium", "high")


class GenerationError(RuntimeError):
    """Rejection sampling ran out of attempts."""


@dataclass
class TrajectoryDataset:
    system: str
    trajectories: np.ndarray  # (N, N_t, *state_shape)
    dt_model: float
    regimes: list
    train_mask: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        if len(self.regimes) != self.n_trajectories or self.train_mask.shape != (self.n_trajectories,):
            raise ValueError("regimes and split must have one entry per trajectory")
        if not np.all(np.isfinite(self.trajectories)):
            raise ValueError("dataset contains non-finite values")

    @property
    def n_trajectories(self) -> int:
        return self.trajectories.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.trajectories.shape[1]

    @property
    def state_shape(self) -> tuple:
        return self.trajectories.shape[2:]

    def indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.flatnonzero(self.train_mask)
        if split == "val":
            return np.flatnonzero(~self.train_mask)
        if split == "all":
            return np.arange(self.n_trajectories)
        raise ValueError(f"unknown split {split!r}")

    def split(self, name: str) -> np.ndarray:
        return self.trajectories[self.indices(name)]

    def subset(self, idx) -> "TrajectoryDataset":
        idx = np.asarray(idx)
        return TrajectoryDataset(
            self.system, self.trajectories[idx], self.dt_model,
            [self.regimes[i] for i in idx], self.train_mask[idx], self.seed, dict(self.meta),
        )

    def save(self, path) -> None:
        meta = {
            "system": self.system,
            "dt_model": self.dt_model,
            "regimes": list(self.regimes),
            "split": ["train" if m else "val" for m in self.train_mask],
            "seed": self.seed,
            "layout": "[trajectory][time][state]",
            "extra": self.meta,
        }
        write_container(path, {"trajectories": self.trajectories}, meta)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        arrays, meta = read_container(path)
        return cls(
            meta["system"], arrays["trajectories"], meta["dt_model"], meta["regimes"],
            np.array([s == "train" for s in meta["split"]]), meta["seed"], meta.get("extra", {}),
        )


def make_split(n: int, train_fraction: float, seed: int) -> np.ndarray:
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng([seed, 2]).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[:n_train]] = True
    return mask


def _rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, i])


def energy_terciles(values: np.ndarray) -> list[str]:
    if values.size < 3:
        return ["medium"] * values.size
    e1, e2 = np.percentile(values, [100.0 / 3.0, 200.0 / 3.0])
    return [REGIME_ORDER[0] if v <= e1 else REGIME_ORDER[1] if v <= e2 else REGIME_ORDER[2] for v in values]


def generate_dp_dataset(cfg: DPConfig) -> TrajectoryDataset:
    if cfg.n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    rngs = [_rng(cfg.seed, i) for i in range(cfg.n_trajectories)]
    result: list = [None] * cfg.n_trajectories
    pending = list(range(cfg.n_trajectories))
    n_rejected = 0
    for _ in range(cfg.max_attempts):
        if not pending:
            break
        ic = np.stack([sample_dp_ic(rngs[i], cfg) for i in pending])
        traj = simulate_dp(ic, cfg)
        ok = accept_mask(traj, cfg)
        still = []
        for j, i in enumerate(pending):
            if ok[j]:
                result[i] = traj[j]
            else:
                still.append(i)
        n_rejected += len(still)
        pending = still
    if pending:
        raise GenerationError(f"{len(pending)} double-pendulum trajectories rejected {cfg.max_attempts} times")
    phys = np.stack(result)
    e0 = dp_energy(phys[:, 0], cfg.g)
    meta = {"config": asdict(cfg), "rejected": n_rejected, "initial_energy": e0.tolist()}
    return TrajectoryDataset(
        "dp", to_sincos(phys), cfg.dt_save, energy_terciles(e0),
        make_split(cfg.n_trajectories, cfg.train_fraction, cfg.seed), cfg.seed, meta,
    )


def regime_labels(cfg) -> list[str]:
    if cfg.n_trajectories is None:
        counts = [cfg.n_per_regime] * len(REGIME_ORDER)
    else:
        n, k = divmod(cfg.n_trajectories, len(REGIME_ORDER))
        counts = [n + (1 if j < k else 0) for j in range(len(REGIME_ORDER))]
    return [r for r, c in zip(REGIME_ORDER, counts) for _ in range(c)]


def _generate_pde(system: str, cfg, simulate, solver, shape) -> TrajectoryDataset:
    regimes = regime_labels(cfg)
    n = len(regimes)
    if n < 1:
        raise ValueError("need at least one trajectory")
    rngs = [_rng(cfg.seed, i) for i in range(n)]
    result: list = [None] * n
    pending = list(range(n))
    n_rejected = 0
    for _ in range(cfg.max_attempts):
        if not pending:
            break
        ic = np.stack([sample_filtered_fourier_ic(regimes[i], rngs[i], shape) for i in pending])
        traj = simulate(ic, cfg, solver)
        flat = traj.reshape(traj.shape[0], -1)
        ok = np.all(np.isfinite(flat), axis=1)
        ok &= np.max(np.abs(np.where(np.isfinite(flat), flat, np.inf)), axis=1) <= cfg.blowup_bound
        still = []
        for j, i in enumerate(pending):
            if ok[j]:
                result[i] = traj[j]
            else:
                still.append(i)
        n_rejected += len(still)
        pending = still
        log.debug("%s: %d pending after attempt", system, len(pending))
    if pending:
        raise GenerationError(f"{len(pending)} {system} trajectories blew up {cfg.max_attempts} times")
    meta = {"config": asdict(cfg), "rejected": n_rejected}
    return TrajectoryDataset(
        system, np.stack(result), cfg.dt_model, regimes,
        make_split(n, cfg.train_fraction, cfg.seed), cfg.seed, meta,
    )


def generate_ks_dataset(cfg: KSConfig) -> TrajectoryDataset:
    solver = KSSolver(cfg.n_grid, cfg.length, cfg.dt)
    return _generate_pde("ks", cfg, simulate_ks, solver, (cfg.n_grid,))


def generate_kf_dataset(cfg: KFConfig) -> TrajectoryDataset:
    solver = KFSolver(cfg.n_grid, cfg.reynolds, cfg.k_forcing, cfg.dt)
    return _generate_pde("kf", cfg, simulate_kf, solver, (cfg.n_grid, cfg.n_grid))


CONFIG_TYPES = {"dp": DPConfig, "ks": KSConfig, "kf": KFConfig}
GENERATORS = {"dp": generate_dp_dataset, "ks": generate_ks_dataset, "kf": generate_kf_dataset}


def generate_dataset(system: str, params: dict | None = None, seed: int | None = None) -> TrajectoryDataset:
    if system not in GENERATORS:
        raise ValueError(f"unknown system {system!r}")
    params = dict(params or {})
    if seed is not None:
        params["seed"] = seed
    cfg = CONFIG_TYPES[system](**params)
    return GENERATORS[system](cfg)


__all__ = [
    "TrajectoryDataset", "GenerationError", "generate_dataset", "generate_dp_dataset",
    "generate_ks_dataset", "generate_kf_dataset", "make_split", "REGIMES", "SYSTEMS",
]
