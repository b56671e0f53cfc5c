"""Local and global dynamical diagnostics of trained surrogates.

Everything is evaluated at operating points (i, t) sampled once and shared by
all models, with architecture-specific context rebuilt from ground truth:
the LSTM hidden state comes from a teacher-forced warm-up over steps 0..t-1,
the TCN window holds the true inputs t-r_f+1..t-1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import dp_angles, rollout, write_json
from .systems.pendulum import G, dp_energy
from .training import NormStats, denormalize, normalize

BIAS_EPS = 1e-8
LOG_FLOOR = -12.0
KDE_BANDWIDTH_FLOOR = 1e-3
MAX_JACOBIAN_ROWS = 4096


@dataclass(frozen=True)
class DiagConfig:
    n_points: int = 200
    horizon: int = 10
    eps_rel: float = 1e-3
    seed: int = 0
    split: str = "val"
    rollout_steps: int | None = None
    kde_points: int = 200


def sample_operating_points(n_traj: int, n_t: int, receptive_field: int, n_points: int, seed: int) -> np.ndarray:
    """(P, 2) array of (trajectory, time) with t in [r_f - 1, N_t - 2]."""
    lo, hi = receptive_field - 1, n_t - 2
    if hi < lo or n_traj < 1:
        raise ValueError(f"no admissible operating points for N_t={n_t}, r_f={receptive_field}")
    rng = np.random.default_rng([seed, 30])
    i = rng.integers(0, n_traj, size=n_points)
    t = rng.integers(lo, hi + 1, size=n_points)
    order = np.lexsort((t, i))
    return np.stack([i[order], t[order]], axis=1)


# -- context ---------------------------------------------------------------------
def _lstm_state_at(model, seqs: np.ndarray, t_idx: np.ndarray):
    """Hidden/cell state after teacher-forced inputs 0..t-1 for each row."""
    P = seqs.shape[0]
    state = model.init_rstate(P)
    hs = [np.zeros((P, model.hidden)) for _ in range(model.layers)]
    cs = [np.zeros((P, model.hidden)) for _ in range(model.layers)]
    cond = Tensor(seqs[:, 0])
    with ad.no_grad():
        for s in range(int(t_idx.max()) if P else 0):
            _, state = model.step(Tensor(seqs[:, s]), cond, state)
            done = t_idx == s + 1
            for layer, (h, c) in enumerate(state):
                hs[layer][done] = h.data[done]
                cs[layer][done] = c.data[done]
    return hs, cs


@dataclass
class Contexts:
    z: np.ndarray  # normalized current state (P, D)
    cond: np.ndarray  # normalized initial state (P, D)
    target: np.ndarray  # normalized true next state (P, D)
    lstm: tuple | None = None  # (list of h, list of c)
    window: np.ndarray | None = None  # (P, r_f - 1, 2D)

    def __len__(self):
        return self.z.shape[0]

    def rstate(self, rows: np.ndarray | None = None, repeat: int = 1):
        def pick(a):
            a = a if rows is None else a[rows]
            return np.repeat(a, repeat, axis=0) if repeat > 1 else a

        if self.lstm is not None:
            hs, cs = self.lstm
            return [(Tensor(pick(h)), Tensor(pick(c))) for h, c in zip(hs, cs)]
        if self.window is not None:
            return Tensor(pick(self.window))
        return None


def build_contexts(model, zn: np.ndarray, points: np.ndarray) -> Contexts:
    """``zn`` holds normalized ground-truth trajectories (N, T, D)."""
    i, t = points[:, 0], points[:, 1]
    ctx = Contexts(zn[i, t], zn[i, 0], zn[i, t + 1])
    arch = getattr(model, "arch", "")
    if arch == "lstm":
        ctx.lstm = _lstm_state_at(model, zn[i], t)
    elif arch == "tcn":
        n = model.receptive_field - 1
        if n > 0:
            if np.any(t < n):
                raise ValueError("operating point earlier than the TCN receptive field")
            offs = np.arange(-n, 0)
            past = zn[i[:, None], t[:, None] + offs[None, :]]
            cond = np.broadcast_to(zn[i, 0][:, None, :], past.shape)
            ctx.window = np.concatenate([past, cond], axis=-1)
        else:
            ctx.window = np.zeros((len(i), 0, 2 * zn.shape[-1]))
    return ctx


def _chunks(n: int, size: int):
    for s in range(0, n, max(size, 1)):
        yield np.arange(s, min(n, s + size))


# -- Jacobians -------------------------------------------------------------------
def one_step_jacobian(model, ctx: Contexts) -> np.ndarray:
    """d(step output)/d(current state) at every context, shape (P, D, D).

    Each point is replicated D times and row j of copy j is back-propagated, so a
    single reverse pass per chunk yields all D rows of every Jacobian. Conditioning
    and recurrent context are constants.
    """
    P, D = ctx.z.shape
    J = np.empty((P, D, D))
    per_chunk = max(1, MAX_JACOBIAN_ROWS // D)
    sel = np.tile(np.eye(D), (per_chunk, 1))
    for rows in _chunks(P, per_chunk):
        n = len(rows)
        z = Tensor(np.repeat(ctx.z[rows], D, axis=0), requires_grad=True)
        cond = Tensor(np.repeat(ctx.cond[rows], D, axis=0))
        y, _ = model.step(z, cond, ctx.rstate(rows, D))
        loss = ad.reduce_sum(y * sel[: n * D])
        loss.backward()
        J[rows] = z.grad.reshape(n, D, D)
    return J


def jacobian_fd(model, ctx: Contexts, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian for cross-checking :func:`one_step_jacobian`."""
    P, D = ctx.z.shape
    J = np.empty((P, D, D))
    with ad.no_grad():
        for k in range(D):
            e = np.zeros(D)
            e[k] = eps
            yp, _ = model.step(Tensor(ctx.z + e), Tensor(ctx.cond), ctx.rstate())
            ym, _ = model.step(Tensor(ctx.z - e), Tensor(ctx.cond), ctx.rstate())
            J[:, :, k] = (yp.data - ym.data) / (2 * eps)
    return J


def spectral_radius(J: np.ndarray) -> float:
    """max |lambda| from the LAPACK Hessenberg-QR eigenvalues; complex Schur form as fallback."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"expected a square matrix, got {J.shape}")
    if not np.all(np.isfinite(J)):
        return float("nan")
    try:
        lam = np.linalg.eigvals(J)
    except np.linalg.LinAlgError:
        T, _ = scipy.linalg.schur(J, output="complex")
        lam = np.diag(T)
    return float(np.max(np.abs(lam)))


# -- bias and FTLE ---------------------------------------------------------------
def _predict(model, ctx: Contexts) -> np.ndarray:
    with ad.no_grad(), np.errstate(all="ignore"):
        y, _ = model.step(Tensor(ctx.z), Tensor(ctx.cond), ctx.rstate())
    return y.data


def relative_bias(model, ctx: Contexts, stats: NormStats, eps: float = BIAS_EPS) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean relative one-step error in raw latent space; returns (B, per-point values, floored log10)."""
    pred = denormalize(_predict(model, ctx), stats)
    true = denormalize(ctx.target, stats)
    return bias_from_predictions(pred, true, eps)


def bias_from_predictions(pred: np.ndarray, true: np.ndarray, eps: float = BIAS_EPS):
    err = np.linalg.norm(pred - true, axis=-1)
    vals = err / (np.linalg.norm(true, axis=-1) + eps)
    return float(np.mean(vals)), vals, floored_log10(vals)


def floored_log10(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log10(x)
    return np.where(x > 0, np.maximum(out, LOG_FLOOR), LOG_FLOOR)


def perturbation_directions(n: int, dim: int, seed: int) -> np.ndarray:
    d = np.random.default_rng([seed, 31]).standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _closed_loop(model, z: np.ndarray, cond: np.ndarray, rstate, steps: int) -> np.ndarray:
    with ad.no_grad(), np.errstate(all="ignore"):
        cur = Tensor(z)
        c = Tensor(cond)
        for _ in range(steps):
            cur, rstate = model.step(cur, c, rstate)
    return cur.data


def ftle(model, ctx: Contexts, eps_pert: float, horizon: int, stats: NormStats, directions: np.ndarray):
    """Per-point (1/K) log10(|dz_K| / eps) for a raw-latent perturbation of size ``eps_pert``.

    Both copies start from the same ground-truth context and are rolled out
    closed-loop with the same conditioning. Non-finite growth is returned as nan.
    """
    if eps_pert <= 0 or horizon < 1:
        raise ValueError("eps_pert must be positive and horizon >= 1")
    P = len(ctx)
    raw = denormalize(ctx.z, stats)
    pert = raw + eps_pert * directions[:P]
    z2 = np.concatenate([ctx.z, normalize(pert, stats)])
    cond2 = np.concatenate([ctx.cond, ctx.cond])
    rows = np.concatenate([np.arange(P), np.arange(P)])
    end = _closed_loop(model, z2, cond2, ctx.rstate(rows), horizon)
    sep = np.linalg.norm(denormalize(end[P:], stats) - denormalize(end[:P], stats), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.log10(sep / eps_pert) / horizon
    return np.where(np.isfinite(lam), lam, np.nan)


# -- attractor diagnostics ---------------------------------------------------------
def snapshot_statistic(x: np.ndarray, system: str) -> np.ndarray:
    """Per-snapshot scalar: spatial variance (KS), mean of 1/2 w^2 (KF), energy (DP)."""
    x = np.asarray(x, dtype=np.float64)
    if system == "ks":
        return np.var(x, axis=-1)
    if system == "kf":
        return np.mean(0.5 * x**2, axis=(-2, -1))
    if system == "dp":
        return dp_energy(dp_angles(x), G)
    raise ValueError(f"unknown system {system!r}")


@dataclass
class AttractorCloud:
    snapshots: np.ndarray  # (M, *grid)
    statistic: np.ndarray  # (M,)
    source: str


def attractor_cloud(model, dataset, ae, stats: NormStats | None = None, split: str = "val",
                    n_steps: int | None = None, source: str = "") -> AttractorCloud:
    """Decoded closed-loop snapshots of ``model``; with ``model=None`` the AE-reconstructed reference."""
    x = dataset.split(split)
    if model is None:
        snaps = ae.reconstruct(x) if ae is not None else x
        snaps = snaps.reshape((-1,) + snaps.shape[2:])
        return AttractorCloud(snaps, snapshot_statistic(snaps, dataset.system), source or "reference")
    T = n_steps or dataset.n_snapshots
    ro = rollout(model, x[:, 0], stats, T, ae)
    snaps = ro.physical.reshape((-1,) + ro.physical.shape[2:])
    ok = np.all(np.isfinite(snaps.reshape(snaps.shape[0], -1)), axis=1)
    snaps = snaps[ok]
    return AttractorCloud(snaps, snapshot_statistic(snaps, dataset.system), source or getattr(model, "tag", "model"))


@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (k, F), rows orthonormal
    variances: np.ndarray  # (k,)
    explained_ratio: np.ndarray
    rank: int


def pca_fit(cloud: np.ndarray, n_components: int = 2, rtol: float = 1e-10) -> PCABasis:
    """Principal axes from the SVD of the centered cloud.

    Sign convention: the largest-magnitude entry of every component is positive.
    ``rank`` counts singular values above ``rtol`` times the largest; fewer than
    ``n_components`` axes are returned when the cloud is degenerate.
    """
    X = np.asarray(cloud, dtype=np.float64).reshape(len(cloud), -1)
    if X.shape[0] <= n_components:
        raise ValueError("cloud must contain more points than projection dimensions")
    mu = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mu, full_matrices=False)
    var = s**2 / (X.shape[0] - 1)
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    k = min(n_components, rank)
    comps = vt[:k].copy()
    for j in range(k):
        if comps[j, np.argmax(np.abs(comps[j]))] < 0:
            comps[j] = -comps[j]
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PCABasis(mu, comps, var[:k], ratio, rank)


def pca_project(cloud: np.ndarray, basis: PCABasis) -> np.ndarray:
    X = np.asarray(cloud, dtype=np.float64).reshape(len(cloud), -1)
    return (X - basis.mean) @ basis.components.T


def scott_bandwidth(samples: np.ndarray) -> float:
    x = np.asarray(samples, dtype=np.float64)
    h = np.std(x, ddof=1) * x.size ** (-1.0 / 5.0)
    return float(max(h, KDE_BANDWIDTH_FLOOR * max(1.0, abs(float(np.mean(x))))))


def kde_1d(samples: np.ndarray, grid: np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density with Scott's-rule bandwidth (floored for degenerate samples)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("kde needs at least two samples")
    h = bandwidth or scott_bandwidth(x)
    g = np.asarray(grid, dtype=np.float64)
    u = (g[:, None] - x[None, :]) / h
    return np.exp(-0.5 * u**2).sum(axis=1) / (x.size * h * np.sqrt(2 * np.pi))


# -- driver ----------------------------------------------------------------------
def median_iqr(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"median": None, "q1": None, "q3": None, "iqr": None, "n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1), "n": int(v.size)}


@dataclass
class DiagnosticsReport:
    points: np.ndarray
    eps_pert: float
    rho: dict = field(default_factory=dict)
    log10_bias: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    ftle: dict = field(default_factory=dict)
    clouds: dict = field(default_factory=dict)
    pca: PCABasis | None = None
    projections: dict = field(default_factory=dict)
    kde_grid: np.ndarray | None = None
    kde: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"eps_pert": self.eps_pert, "n_points": int(len(self.points)), "models": {}}
        for m in self.rho:
            out["models"][m] = {
                "spectral_radius": median_iqr(self.rho[m]),
                "log10_bias": median_iqr(self.log10_bias[m]),
                "bias_mean": self.bias[m],
                "ftle": median_iqr(self.ftle[m]),
                "ftle_flagged": int(np.sum(~np.isfinite(self.ftle[m]))),
            }
        if self.pca is not None:
            out["pca"] = {"rank": self.pca.rank, "explained_ratio": self.pca.explained_ratio.tolist()}
        return out


def latent_trajectories(dataset, ae, split: str) -> np.ndarray:
    x = dataset.split(split)
    return ae.encode(x) if ae is not None else x


def run_diagnostics(models: dict, dataset, ae=None, config: DiagConfig | None = None) -> DiagnosticsReport:
    """``models`` maps tag -> (model, NormStats). ``dataset`` holds physical states or fields."""
    cfg = config or DiagConfig()
    if not models:
        raise ValueError("no models given")
    z_raw = latent_trajectories(dataset, ae, cfg.split)
    N, T, D = z_raw.shape
    r_f = max(getattr(m, "receptive_field", 1) for m, _ in models.values())
    points = sample_operating_points(N, T, r_f, cfg.n_points, cfg.seed)
    eps_pert = cfg.eps_rel * float(np.median(np.linalg.norm(z_raw.reshape(-1, D), axis=1)))
    directions = perturbation_directions(len(points), D, cfg.seed)
    rep = DiagnosticsReport(points, eps_pert)
    for tag, (model, stats) in models.items():
        ctx = build_contexts(model, normalize(z_raw, stats), points)
        J = one_step_jacobian(model, ctx)
        rep.rho[tag] = np.array([spectral_radius(j) for j in J])
        rep.bias[tag], _, rep.log10_bias[tag] = relative_bias(model, ctx, stats)
        rep.ftle[tag] = ftle(model, ctx, eps_pert, cfg.horizon, stats, directions)
    if ae is not None:
        ref = attractor_cloud(None, dataset, ae, split=cfg.split)
        rep.clouds["reference"] = ref
        for tag, (model, stats) in models.items():
            rep.clouds[tag] = attractor_cloud(model, dataset, ae, stats, cfg.split, cfg.rollout_steps, tag)
        rep.pca = pca_fit(ref.snapshots)
        rep.projections = {k: pca_project(c.snapshots, rep.pca) for k, c in rep.clouds.items()}
        allstat = np.concatenate([c.statistic for c in rep.clouds.values() if c.statistic.size])
        lo, hi = np.percentile(allstat, [0.5, 99.5])
        pad = 0.1 * (hi - lo + 1e-12)
        rep.kde_grid = np.linspace(lo - pad, hi + pad, cfg.kde_points)
        rep.kde = {k: kde_1d(c.statistic, rep.kde_grid) for k, c in rep.clouds.items() if c.statistic.size >= 2}
    return rep


def write_diagnostics(out_dir, rep: DiagnosticsReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag in rep.rho:
        with open(out / f"samples_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj", "t", "spectral_radius", "log10_bias", "ftle"])
            for (i, t), r, b, f in zip(rep.points, rep.rho[tag], rep.log10_bias[tag], rep.ftle[tag]):
                w.writerow([int(i), int(t), repr(float(r)), repr(float(b)), repr(float(f))])
    if rep.kde_grid is not None:
        keys = list(rep.kde)
        with open(out / "kde.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x"] + keys)
            for j, x in enumerate(rep.kde_grid):
                w.writerow([repr(float(x))] + [repr(float(rep.kde[k][j])) for k in keys])
        with open(out / "pca.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "pc1", "pc2"])
            for k, xy in rep.projections.items():
                for row in xy:
                    w.writerow([k] + [repr(float(v)) for v in row] + [""] * (2 - len(row)))
    write_json(out / "summary.json", rep.summary())
