"""Closed-loop rollouts and trajectory error metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models.dopri5 import StiffnessError
from .systems.pendulum import G, dp_energy
from .training import NormStats, denormalize, normalize

# states beyond this magnitude (normalized units) are treated as diverged
DIVERGENCE_BOUND = 1e8
MODEL_ORDER = ("mlp", "lstm", "tcn", "node", "cord")


@dataclass
class Rollout:
    normalized: np.ndarray  # (B, T, D)
    latent: np.ndarray  # raw (unnormalized) model state, (B, T, D)
    physical: np.ndarray  # decoded fields for latent benchmarks, else == latent
    diverged_at: np.ndarray  # (B,) first bad step, -1 if none
    model: str = ""

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0


def _step_rows(model, z, cond, rstate):
    try:
        return model.step(Tensor(z), Tensor(cond), rstate)[0].data, None
    except StiffnessError:
        out = np.full_like(z, np.nan)
        failed = np.zeros(z.shape[0], dtype=bool)
        for i in range(z.shape[0]):
            try:
                out[i] = model.step(Tensor(z[i : i + 1]), Tensor(cond[i : i + 1]), None)[0].data[0]
            except StiffnessError:
                failed[i] = True
        return out, failed


def rollout_normalized(model, z0: np.ndarray, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Feed predictions back for ``n_steps - 1`` steps; returns (B, n_steps, D) and diverged_at."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    B, D = z0.shape
    out = np.full((B, n_steps, D), np.nan)
    out[:, 0] = z0
    diverged_at = np.full(B, -1)
    z = z0.copy()
    rstate = model.init_rstate(B)
    stateful = rstate is not None
    with ad.no_grad(), np.errstate(all="ignore"):
        for t in range(1, n_steps):
            if not stateful:
                nxt, failed = _step_rows(model, z, z0, None)
            else:
                y, rstate = model.step(Tensor(z), Tensor(z0), rstate)
                nxt, failed = y.data, None
            bad = ~np.all(np.isfinite(nxt), axis=1) | (np.max(np.abs(nxt), axis=1) > DIVERGENCE_BOUND)
            if failed is not None:
                bad |= failed
            fresh = bad & (diverged_at < 0)
            diverged_at[fresh] = t
            live = diverged_at < 0
            out[live, t] = nxt[live]
            # diverged rows keep stepping from zero so batch arithmetic stays finite; their output is discarded
            z = np.where(live[:, None], nxt, 0.0)
    return out, diverged_at


def rollout(model, s0: np.ndarray, stats: NormStats, n_steps: int, ae=None) -> Rollout:
    """Closed-loop generation from physical initial states ``s0`` (B, *state) conditioned on s~_0."""
    z0 = ae.encode(s0) if ae is not None else np.asarray(s0, dtype=np.float64)
    single = z0.ndim == 1
    z0n = normalize(np.atleast_2d(z0), stats)
    norm, div = rollout_normalized(model, z0n, n_steps)
    norm[:, 0] = z0n
    raw = denormalize(norm, stats)
    if ae is not None:
        phys = ae.decode(np.nan_to_num(raw, nan=0.0))
        phys[np.isnan(raw).any(axis=-1)] = np.nan
    else:
        phys = raw
    r = Rollout(norm, raw, phys, div, getattr(model, "tag", ""))
    if single:
        r = Rollout(norm[0], raw[0], phys[0], div[:1], r.model)
    return r


def state_mse(pred: np.ndarray, true: np.ndarray, window: int | None = None) -> np.ndarray | float:
    """Time mean of the squared L2 state error; (T, D) -> scalar, (B, T, D) -> (B,)."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    if window is not None:
        pred, true = pred[..., :window, :], true[..., :window, :]
    sq = np.sum((pred - true) ** 2, axis=-1)
    res = np.mean(sq, axis=-1)
    return float(res) if res.ndim == 0 else res


def traj_spacetime_mse(pred: np.ndarray, true: np.ndarray, window: int | None = None, batched: bool = False):
    """Mean squared pointwise error over time and space for one trajectory (T, *grid).

    With ``batched=True`` the leading axis indexes trajectories and a vector is returned.
    """
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    if window is not None:
        sl = (slice(None), slice(0, window)) if batched else (slice(0, window),)
        pred, true = pred[sl], true[sl]
    err = (pred - true) ** 2
    if batched:
        return err.reshape(err.shape[0], -1).mean(axis=1)
    return float(err.mean())


def rmse_vs_time(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """RMSE(t) = sqrt(mean over trajectories and state components of e^2), i.e. ||e||/sqrt(D)
    for a single trajectory. Trajectories with non-finite values at t are left out of that t."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    B, T = pred.shape[:2]
    sq = ((pred - true) ** 2).reshape(B, T, -1).mean(axis=2)
    with np.errstate(invalid="ignore"):
        finite = np.isfinite(sq)
        num = np.where(finite, sq, 0.0).sum(axis=0)
        cnt = finite.sum(axis=0)
        return np.sqrt(np.where(cnt > 0, num / np.maximum(cnt, 1), np.nan))


def dp_angles(state6: np.ndarray) -> np.ndarray:
    s = np.asarray(state6)
    th1 = np.arctan2(s[..., 0], s[..., 1])
    th2 = np.arctan2(s[..., 2], s[..., 3])
    return np.stack([th1, th2, s[..., 4], s[..., 5]], axis=-1)


def regime_statistics(trajectory: np.ndarray, system: str) -> float:
    """E(0) for the pendulum, time-mean spatial variance for KS, time-mean enstrophy (1/2 w^2) for KF."""
    x = np.asarray(trajectory, dtype=np.float64)
    if system == "dp":
        return float(dp_energy(dp_angles(x[0]), G))
    if system == "ks":
        return float(np.mean(np.var(x, axis=-1)))
    if system == "kf":
        return float(np.mean(0.5 * x**2))
    raise ValueError(f"unknown system {system!r}")


@dataclass
class RegimeBinning:
    statistic: str
    edges: np.ndarray  # two tercile edges
    bins: np.ndarray  # (N,) in {0, 1, 2}
    models: list
    win_counts: dict
    win_fractions: dict
    box: dict = field(default_factory=dict)  # model -> list of per-bin summaries


def tercile_bins(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=np.float64)
    edges = np.percentile(v, [100.0 / 3.0, 200.0 / 3.0])
    bins = np.where(v <= edges[0], 0, np.where(v <= edges[1], 1, 2))
    return edges, bins


def bin_and_wins(mse: dict, statistic: np.ndarray, statistic_name: str = "", order=None) -> RegimeBinning:
    """Tercile binning by ``statistic`` and the per-bin fraction of trajectories each model wins.

    Ties go to the model listed first in ``order``; diverged rollouts carry MSE = inf.
    """
    models = list(order) if order is not None else [m for m in MODEL_ORDER if m in mse] + sorted(
        m for m in mse if m not in MODEL_ORDER
    )
    if not models:
        raise ValueError("no models to compare")
    stat = np.asarray(statistic, dtype=np.float64)
    if stat.size < 3:
        raise ValueError("need at least three trajectories to form terciles")
    table = np.stack([np.asarray(mse[m], dtype=np.float64) for m in models])
    if table.shape[1] != stat.size:
        raise ValueError("every model needs one MSE per trajectory")
    edges, bins = tercile_bins(stat)
    winner = np.argmin(np.where(np.isnan(table), np.inf, table), axis=0)
    counts, fracs, box = {}, {}, {}
    for j, m in enumerate(models):
        counts[m] = [int(np.sum((winner == j) & (bins == b))) for b in range(3)]
        fracs[m] = [counts[m][b] / max(int(np.sum(bins == b)), 1) for b in range(3)]
        box[m] = []
        for b in range(3):
            vals = table[j, bins == b]
            ok = vals[np.isfinite(vals) & (vals > 0)]
            lg = np.log10(ok)
            q = np.percentile(lg, [25, 50, 75]) if lg.size else [np.nan] * 3
            box[m].append({
                "n": int(vals.size), "diverged": int(np.sum(~np.isfinite(vals))),
                "q1": float(q[0]), "median": float(q[1]), "q3": float(q[2]), "log10_mse": lg.tolist(),
            })
    return RegimeBinning(statistic_name, edges, bins, models, counts, fracs, box)


def early_window(system: str, n_snapshots: int, dt: float) -> int:
    """Snapshots in the early horizon: 0-2 s for the pendulum, first 20% otherwise."""
    if system == "dp":
        return min(n_snapshots, int(round(2.0 / dt)) + 1)
    return max(2, int(0.2 * n_snapshots))


def percentile(values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile that stays finite when only the upper tail is inf."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = q / 100.0 * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    if frac == 0.0 or v[lo] == v[hi]:
        return float(v[lo])
    return float(v[lo] + frac * (v[hi] - v[lo]))


def summarize(values: np.ndarray) -> dict:
    """Mean, median and P90 (linear interpolation); diverged entries (inf) count as inf."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    with np.errstate(invalid="ignore"):
        return {
            "mean": float(np.mean(v)),
            "median": percentile(v, 50),
            "p90": percentile(v, 90),
            "n": int(v.size),
            "n_diverged": int(np.sum(~np.isfinite(v))),
        }


@dataclass
class EvalResult:
    model: str
    traj_ids: np.ndarray
    full_mse: np.ndarray
    early_mse: np.ndarray
    regime_stat: np.ndarray
    bins: np.ndarray
    diverged: np.ndarray
    rmse: np.ndarray
    times: np.ndarray
    rollout: Rollout | None = None

    def aggregate(self) -> dict:
        return {"model": self.model, "full": summarize(self.full_mse), "early": summarize(self.early_mse)}


def evaluate_model(model, dataset, stats: NormStats, ae=None, split: str = "val", keep_rollout: bool = False) -> EvalResult:
    """Roll out from every initial state of ``split`` and score in physical space."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    true = dataset.trajectories[idx]
    T = true.shape[1]
    ro = rollout(model, true[:, 0], stats, T, ae)
    pred = np.where(np.isfinite(ro.physical), ro.physical, np.nan)
    w = early_window(dataset.system, T, dataset.dt_model)
    if dataset.system == "dp":
        full, early = state_mse(pred, true), state_mse(pred, true, w)
    else:
        full = traj_spacetime_mse(pred, true, batched=True)
        early = traj_spacetime_mse(pred, true, w, batched=True)
    full = np.where(ro.diverged | ~np.isfinite(full), np.inf, full)
    early = np.where(~np.isfinite(early), np.inf, early)
    stat = np.array([regime_statistics(x, dataset.system) for x in true])
    bins = tercile_bins(stat)[1] if stat.size >= 3 else np.zeros(stat.size, dtype=int)
    return EvalResult(
        getattr(model, "tag", ""), idx, full, early, stat, bins, ro.diverged,
        rmse_vs_time(pred, true), np.arange(T) * dataset.dt_model, ro if keep_rollout else None,
    )


def _num(x: float) -> str:
    return repr(float(x))


def json_safe(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")


def write_evaluation(out_dir, res: EvalResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "full_mse", "early_mse", "regime_stat", "bin", "diverged"])
        for row in zip(res.traj_ids, res.full_mse, res.early_mse, res.regime_stat, res.bins, res.diverged):
            w.writerow([int(row[0]), _num(row[1]), _num(row[2]), _num(row[3]), int(row[4]), int(row[5])])
    with open(out / "rmse_vs_time.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "rmse"])
        for i, (t, r) in enumerate(zip(res.times, res.rmse)):
            w.writerow([i, _num(t), _num(r)])
    write_json(out / "aggregate.json", res.aggregate())


def read_per_trajectory(path) -> dict:
    cols: dict = {"traj_id": [], "full_mse": [], "early_mse": [], "regime_stat": [], "bin": [], "diverged": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in cols:
                cols[k].append(float(row[k]))
    out = {k: np.array(v) for k, v in cols.items()}
    for k in ("traj_id", "bin", "diverged"):
        out[k] = out[k].astype(int)
    return out
