import mpmath
import numpy as np
import pytest
import scipy.linalg
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from chaosbench import autodiff as ad
from chaosbench.autodiff import Tensor
from chaosbench.diagnostics import (
    LOG_FLOOR,
    Contexts,
    DiagConfig,
    attractor_cloud,
    bias_from_predictions,
    build_contexts,
    floored_log10,
    ftle,
    jacobian_fd,
    kde_1d,
    median_iqr,
    one_step_jacobian,
    pca_fit,
    pca_project,
    perturbation_directions,
    relative_bias,
    run_diagnostics,
    sample_operating_points,
    scott_bandwidth,
    snapshot_statistic,
    spectral_radius,
    write_diagnostics,
)
from chaosbench.models import build_model
from chaosbench.models.temporal import CoRDModel, MLPModel
from chaosbench.systems import TrajectoryDataset
from chaosbench.training import NormStats

from helpers import IdentityAE, set_linear_field

SMALL = {
    "mlp": {"tag": "mlp", "width": 8, "depth": 3},
    "lstm": {"tag": "lstm", "hidden": 5, "layers": 2},
    "tcn": {"tag": "tcn", "channels": 4, "blocks": 1},
    "node": {"tag": "node", "width": 8, "depth": 2, "rtol": 1e-10, "atol": 1e-12},
    "cord": {"tag": "cord", "width": 8, "depth": 3},
}


def _linear(cls, A, **kw):
    m = cls(A.shape[0], 4, 1, np.random.default_rng(0), **kw)
    set_linear_field(m, A)
    return m


def _ctx(z, cond=None, target=None):
    z = np.atleast_2d(z)
    return Contexts(z, z if cond is None else cond, z if target is None else target)


def _unit(D):
    return NormStats(np.zeros(D), np.ones(D))


# operating points ----------------------------------------------------------------


@given(st.integers(1, 20), st.integers(3, 60), st.integers(1, 5), st.integers(0, 1000))
def test_operating_points_in_range(n_traj, n_t, r_f, seed):
    if n_t - 2 < r_f - 1:
        with pytest.raises(ValueError):
            sample_operating_points(n_traj, n_t, r_f, 10, seed)
        return
    p = sample_operating_points(n_traj, n_t, r_f, 50, seed)
    assert p.shape == (50, 2)
    assert p[:, 0].min() >= 0 and p[:, 0].max() < n_traj
    assert p[:, 1].min() >= r_f - 1 and p[:, 1].max() <= n_t - 2
    np.testing.assert_array_equal(p, sample_operating_points(n_traj, n_t, r_f, 50, seed))


def test_contexts_match_teacher_forcing():
    rng = np.random.default_rng(0)
    zn = rng.standard_normal((3, 20, 2))
    for tag in ("lstm", "tcn", "mlp", "cord"):
        m = build_model(SMALL[tag], 2, 1)
        pts = sample_operating_points(3, 20, getattr(m, "receptive_field", 1), 12, 4)
        ctx = build_contexts(m, zn, pts)
        with ad.no_grad():
            tf = m.teacher_forced(Tensor(zn)).data
            y, _ = m.step(Tensor(ctx.z), Tensor(ctx.cond), ctx.rstate())
        np.testing.assert_allclose(y.data, tf[pts[:, 0], pts[:, 1]], atol=1e-12, err_msg=tag)
        np.testing.assert_array_equal(ctx.target, zn[pts[:, 0], pts[:, 1] + 1])


def test_tcn_context_rejects_early_points():
    m = build_model(SMALL["tcn"], 2, 0)
    with pytest.raises(ValueError):
        build_contexts(m, np.zeros((1, 20, 2)), np.array([[0, 0]]))


# Jacobians -------------------------------------------------------------------------


def test_identity_and_linear_jacobians():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 3))
    J = one_step_jacobian(_linear(MLPModel, np.eye(3)), _ctx(z))
    np.testing.assert_array_equal(J, np.tile(np.eye(3), (4, 1, 1)))
    A = rng.standard_normal((3, 3))
    J = one_step_jacobian(_linear(MLPModel, A), _ctx(z))
    np.testing.assert_allclose(J, np.tile(A, (4, 1, 1)), atol=1e-15)


def test_cord_zero_field_jacobian_is_identity():
    m = _linear(CoRDModel, np.zeros((3, 3)))
    J = one_step_jacobian(m, _ctx(np.ones((2, 3))))
    np.testing.assert_array_equal(J, np.tile(np.eye(3), (2, 1, 1)))


def test_linear_cord_jacobian_product():
    A = np.random.default_rng(2).standard_normal((4, 4))
    m = _linear(CoRDModel, A, substeps=3, dt=0.3)
    J = one_step_jacobian(m, _ctx(np.zeros((1, 4))))
    want = np.linalg.matrix_power(np.eye(4) + 0.1 * A, 3)
    np.testing.assert_allclose(J[0], want, atol=1e-14)


def test_node_linear_jacobian_is_matrix_exponential():
    A = 0.5 * np.random.default_rng(3).standard_normal((3, 3))
    spec = {"tag": "node", "width": 4, "depth": 1, "rtol": 1e-10, "atol": 1e-12}
    m = build_model(spec, 3, 0)
    set_linear_field(m, A)
    J = one_step_jacobian(m, _ctx(np.random.default_rng(4).standard_normal((2, 3))))
    np.testing.assert_allclose(J, np.tile(scipy.linalg.expm(A), (2, 1, 1)), rtol=1e-7, atol=1e-8)


@pytest.mark.parametrize("tag", ["mlp", "lstm", "tcn", "node", "cord"])
def test_jacobian_matches_finite_differences(tag):
    rng = np.random.default_rng(5)
    D = 3
    m = build_model(SMALL[tag], D, 2)
    zn = rng.standard_normal((2, 16, D))
    pts = sample_operating_points(2, 16, getattr(m, "receptive_field", 1), 6, 1)
    ctx = build_contexts(m, zn, pts)
    J = one_step_jacobian(m, ctx)
    Jfd = jacobian_fd(m, ctx)
    rel = np.linalg.norm(J - Jfd) / np.linalg.norm(Jfd)
    assert rel < (1e-5 if tag == "node" else 1e-6), rel


def test_jacobian_chunking_consistent(monkeypatch):
    import chaosbench.diagnostics as dg

    m = build_model(SMALL["cord"], 3, 0)
    ctx = _ctx(np.random.default_rng(6).standard_normal((7, 3)))
    full = one_step_jacobian(m, ctx)
    monkeypatch.setattr(dg, "MAX_JACOBIAN_ROWS", 6)
    np.testing.assert_allclose(one_step_jacobian(m, ctx), full, atol=1e-14)


# spectral radius -------------------------------------------------------------------


def test_spectral_radius_examples():
    assert spectral_radius(np.diag([2.0, -3.0])) == pytest.approx(3.0)
    assert spectral_radius(np.array([[0.0, -1.0], [1.0, 0.0]])) == pytest.approx(1.0)
    assert spectral_radius(np.array([[0.5, 100.0], [0.0, 0.5]])) == pytest.approx(0.5)
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    assert np.isnan(spectral_radius(np.array([[np.nan, 0.0], [0.0, 1.0]])))
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((2, 3)))


def _mp_radius(J):
    mpmath.mp.dps = 30
    ev, _ = mpmath.eig(mpmath.matrix(J.tolist()))
    return float(max(abs(e) for e in ev))


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_spectral_radius_high_precision_oracle(n, seed):
    J = np.random.default_rng(seed).standard_normal((n, n))
    assert spectral_radius(J) == pytest.approx(_mp_radius(J), rel=1e-9, abs=1e-12)


# bias --------------------------------------------------------------------------------


def test_bias_examples():
    true = np.random.default_rng(7).standard_normal((5, 4))
    B, vals, lg = bias_from_predictions(true, true)
    assert B == 0.0
    np.testing.assert_array_equal(lg, LOG_FLOOR)
    r = 0.03
    B, vals, lg = bias_from_predictions((1 + r) * true, true)
    np.testing.assert_allclose(vals, r, rtol=1e-6)
    np.testing.assert_allclose(lg, np.log10(r), atol=1e-6)
    B, vals, _ = bias_from_predictions(np.zeros((2, 3)), np.zeros((2, 3)))
    assert B == 0.0


def test_floored_log10():
    np.testing.assert_array_equal(floored_log10([0.0, 1e-20, 1.0, 100.0]), [LOG_FLOOR, LOG_FLOOR, 0.0, 2.0])


def test_relative_bias_in_raw_space():
    stats = NormStats(np.array([1.0, -2.0]), np.array([2.0, 0.5]))
    z = np.array([[0.3, -0.4], [1.0, 2.0]])
    m = _linear(MLPModel, 1.5 * np.eye(2))
    B, vals, _ = relative_bias(m, _ctx(z, target=z), stats)
    raw_true = z * stats.sigma + stats.mu
    raw_pred = 1.5 * z * stats.sigma + stats.mu
    want = np.linalg.norm(raw_pred - raw_true, axis=1) / (np.linalg.norm(raw_true, axis=1) + 1e-8)
    np.testing.assert_allclose(vals, want, rtol=1e-12)
    assert B == pytest.approx(want.mean())


# FTLE --------------------------------------------------------------------------------


@pytest.mark.parametrize("scale,want", [(1.0, 0.0), (10.0, 1.0), (0.5, np.log10(0.5))])
def test_ftle_scalar_maps(scale, want):
    D = 3
    m = _linear(MLPModel, scale * np.eye(D))
    z = np.random.default_rng(8).standard_normal((4, D))
    lam = ftle(m, _ctx(z), 1e-4, 5, _unit(D), perturbation_directions(4, D, 0))
    np.testing.assert_allclose(lam, want, atol=1e-9)


def test_ftle_matrix_power_oracle():
    rng = np.random.default_rng(9)
    D, K = 3, 4
    A = rng.standard_normal((D, D))
    stats = NormStats(rng.standard_normal(D), rng.uniform(0.5, 2.0, D))
    dirs = perturbation_directions(5, D, 3)
    z = rng.standard_normal((5, D))
    lam = ftle(_linear(MLPModel, A), _ctx(z), 1e-3, K, stats, dirs)
    AK = np.linalg.matrix_power(A, K)
    want = [np.log10(np.linalg.norm(stats.sigma * (AK @ (d / stats.sigma)))) / K for d in dirs]
    np.testing.assert_allclose(lam, want, rtol=1e-8)


def test_ftle_nonfinite_growth_is_nan():
    m = _linear(MLPModel, 1e200 * np.eye(2))
    lam = ftle(m, _ctx(np.ones((2, 2))), 1e-3, 3, _unit(2), perturbation_directions(2, 2, 0))
    assert np.all(np.isnan(lam))
    with pytest.raises(ValueError):
        ftle(m, _ctx(np.ones((1, 2))), 0.0, 3, _unit(2), perturbation_directions(1, 2, 0))


def test_perturbation_directions_unit_and_seeded():
    d = perturbation_directions(10, 4, 7)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    np.testing.assert_array_equal(d, perturbation_directions(10, 4, 7))


# attractor clouds, PCA and KDE -----------------------------------------------------


def _ks_dataset(traj):
    n = traj.shape[0]
    return TrajectoryDataset("ks", traj, 0.75, ["low"] * n, np.arange(n) < n // 2, 0)


def test_snapshot_statistics():
    assert np.all(snapshot_statistic(np.full((3, 16), 4.0), "ks") == 0.0)
    y = np.arange(32) * 2 * np.pi / 32
    w = np.tile(np.sin(4 * y)[:, None], (1, 32))
    np.testing.assert_allclose(snapshot_statistic(w[None], "kf"), [0.25])
    with pytest.raises(ValueError):
        snapshot_statistic(np.zeros((2, 2)), "x")


def test_attractor_clouds():
    rng = np.random.default_rng(10)
    traj = rng.standard_normal((4, 5, 6))
    ds = _ks_dataset(traj)
    ae = IdentityAE(6)
    ref = attractor_cloud(None, ds, ae)
    np.testing.assert_allclose(ref.snapshots, traj[2:].reshape(-1, 6))
    cloud = attractor_cloud(_linear(MLPModel, np.eye(6)), ds, ae, _unit(6))
    want = np.repeat(traj[2:, :1], 5, axis=1).reshape(-1, 6)
    np.testing.assert_allclose(cloud.snapshots, want)
    const = _ks_dataset(np.full((2, 3, 6), 1.5))
    np.testing.assert_array_equal(attractor_cloud(None, const, ae).statistic, 0.0)


def test_attractor_drops_diverged_snapshots():
    traj = np.random.default_rng(11).standard_normal((2, 6, 3)) + 1.0
    cloud = attractor_cloud(_linear(MLPModel, 1e4 * np.eye(3)), _ks_dataset(traj), IdentityAE(3), _unit(3))
    assert np.all(np.isfinite(cloud.snapshots))
    assert cloud.snapshots.shape[0] == 2  # steps 0 and 1 survive; 1e8 is crossed at step 2


def test_pca_line():
    d = np.array([3.0, -4.0]) / 5.0
    t = np.linspace(-2, 2, 50)
    basis = pca_fit(t[:, None] * d + np.array([1.0, 1.0]))
    assert basis.rank == 1 and basis.components.shape == (1, 2)
    np.testing.assert_allclose(basis.components[0], -d, atol=1e-12)  # largest entry made positive
    assert basis.explained_ratio[0] == pytest.approx(1.0)


def test_pca_isotropic():
    x = np.random.default_rng(12).standard_normal((20000, 2))
    basis = pca_fit(x)
    np.testing.assert_allclose(basis.explained_ratio, 0.5, atol=0.02)
    np.testing.assert_allclose(basis.components @ basis.components.T, np.eye(2), atol=1e-12)


def test_pca_covariance_oracle():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((300, 5)) @ rng.standard_normal((5, 5))
    basis = pca_fit(x)
    w, v = np.linalg.eigh(np.cov(x, rowvar=False))
    order = np.argsort(w)[::-1][:2]
    np.testing.assert_allclose(basis.variances, w[order], rtol=1e-10)
    angles = scipy.linalg.subspace_angles(basis.components.T, v[:, order])
    assert np.max(angles) < 1e-8
    proj = pca_project(x, basis)
    np.testing.assert_allclose(proj.var(axis=0, ddof=1), w[order], rtol=1e-10)
    with pytest.raises(ValueError):
        pca_fit(x[:2])


def test_kde_examples():
    x = np.array([-2.0, -1.0, 1.0, 2.0])
    grid = np.linspace(-5, 5, 101)
    p = kde_1d(x, grid)
    np.testing.assert_allclose(p, p[::-1], rtol=1e-12)
    grid = np.linspace(-30, 30, 6001)
    assert np.trapezoid(kde_1d(x, grid), grid) == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ValueError):
        kde_1d([1.0], grid)


def test_kde_single_value_uses_floor():
    x = np.full(10, 4.0)
    h = scott_bandwidth(x)
    assert h == pytest.approx(4e-3)
    p = kde_1d(x, np.array([4.0]))
    assert np.isfinite(p[0]) and p[0] == pytest.approx(1 / (h * np.sqrt(2 * np.pi)))


@settings(max_examples=15)
@given(st.integers(5, 200), st.integers(0, 2**31 - 1))
def test_kde_matches_scipy(n, seed):
    x = np.random.default_rng(seed).standard_normal(n) * 3 + 1
    grid = np.linspace(-10, 12, 57)
    np.testing.assert_allclose(kde_1d(x, grid), scipy.stats.gaussian_kde(x)(grid), rtol=1e-10, atol=1e-14)


def test_median_iqr():
    s = median_iqr([1.0, 2.0, 3.0, 4.0, 5.0, np.nan, np.inf])
    assert s == {"median": 3.0, "q1": 2.0, "q3": 4.0, "iqr": 2.0, "n": 5}
    assert median_iqr([np.nan])["n"] == 0


# driver --------------------------------------------------------------------------------


def test_run_diagnostics_end_to_end(tmp_path):
    rng = np.random.default_rng(14)
    traj = np.cumsum(0.1 * rng.standard_normal((6, 25, 4)), axis=1) + 2.0
    ds = _ks_dataset(traj)
    stats = NormStats(traj.reshape(-1, 4).mean(0), traj.reshape(-1, 4).std(0))
    models = {t: (build_model(SMALL[t], 4, 0), stats) for t in ("mlp", "tcn", "cord")}
    cfg = DiagConfig(n_points=20, horizon=3, kde_points=30)
    rep = run_diagnostics(models, ds, IdentityAE(4), cfg)
    r_f = models["tcn"][0].receptive_field
    assert rep.points[:, 1].min() >= r_f - 1
    for t in models:
        assert rep.rho[t].shape == (20,) and np.all(np.isfinite(rep.rho[t]))
        assert rep.ftle[t].shape == (20,)
    assert set(rep.clouds) == {"reference", "mlp", "tcn", "cord"}
    assert rep.kde_grid.shape == (30,)
    write_diagnostics(tmp_path, rep)
    for name in ("samples_mlp.csv", "samples_tcn.csv", "kde.csv", "pca.csv", "summary.json"):
        assert (tmp_path / name).is_file()
    rows = (tmp_path / "samples_cord.csv").read_text().splitlines()
    assert rows[0] == "traj,t,spectral_radius,log10_bias,ftle" and len(rows) == 21
    again = run_diagnostics(models, ds, IdentityAE(4), cfg)
    np.testing.assert_array_equal(again.points, rep.points)
    for t in models:
        np.testing.assert_array_equal(again.rho[t], rep.rho[t])
    with pytest.raises(ValueError):
        run_diagnostics({}, ds)
