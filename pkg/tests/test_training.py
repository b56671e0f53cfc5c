import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chaosbench import autodiff as ad
from chaosbench.autodiff import Tensor
from chaosbench.models import MLPModel, build_model
from chaosbench.systems import TrajectoryDataset
from chaosbench.training import (
    NormStats,
    TrainConfig,
    TrainingError,
    compute_norm_stats,
    denormalize,
    normalize,
    teacher_forcing_loss,
    train_model,
    write_log_csv,
)

from helpers import fd_directional, set_linear_field

TOY = {
    "mlp": {"tag": "mlp", "width": 8, "depth": 3},
    "lstm": {"tag": "lstm", "hidden": 5, "layers": 2},
    "tcn": {"tag": "tcn", "channels": 6, "blocks": 2},
    "node": {"tag": "node", "width": 8, "depth": 3},
    "cord": {"tag": "cord", "width": 8, "depth": 3},
}


def _ds(traj, frac=0.8, system="toy"):
    n = traj.shape[0]
    mask = np.arange(n) < int(round(frac * n))
    return TrajectoryDataset(system, traj, 0.1, ["low"] * n, mask, 0)


def test_norm_stats_examples():
    s = compute_norm_stats(np.full((3, 4, 2), 5.0))
    np.testing.assert_array_equal(s.mu, 5.0)
    np.testing.assert_array_equal(s.sigma, 1e-8)
    s = compute_norm_stats(np.array([[[0.0, 0.0], [2.0, 2.0]]]))
    np.testing.assert_array_equal(s.mu, [1.0, 1.0])
    np.testing.assert_array_equal(s.sigma, [1.0, 1.0])
    with pytest.raises(ValueError):
        compute_norm_stats(np.zeros((0, 3, 2)))


def test_norm_stats_two_pass_oracle():
    x = np.random.default_rng(0).standard_normal((7, 9, 3)) * 3 + 1
    s = compute_norm_stats(x)
    flat = x.reshape(-1, 3)
    n = flat.shape[0]
    mu = [sum(flat[:, j]) / n for j in range(3)]
    var = [sum((flat[:, j] - mu[j]) ** 2) / n for j in range(3)]
    np.testing.assert_allclose(s.mu, mu, rtol=1e-12)
    np.testing.assert_allclose(s.sigma, np.sqrt(var), rtol=1e-12)
    assert s.n_samples == 63


def test_stats_use_training_split_only():
    x = np.zeros((5, 2, 1))
    x[4] = 100.0  # validation trajectory
    ds = _ds(x)
    s = compute_norm_stats(ds, "train")
    assert s.mu[0] == 0.0 and s.source_split == "train"


def test_normalize_examples():
    s = NormStats(np.array([1.0, -2.0]), np.array([2.0, 0.5]))
    np.testing.assert_array_equal(normalize(s.mu, s), 0.0)
    ident = NormStats(np.zeros(2), np.ones(2))
    v = np.array([3.0, 4.0])
    np.testing.assert_array_equal(normalize(v, ident), v)


@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 3, elements=st.floats(-10, 10)),
       arrays(np.float64, 3, elements=st.floats(1e-3, 10)))
def test_normalize_roundtrip(x, mu, sigma):
    s = NormStats(mu, sigma)
    np.testing.assert_allclose(denormalize(normalize(x, s), s), x, atol=1e-12 * (1 + np.abs(x)).max(), rtol=1e-12)


class _Fixed:
    """Memoryless stand-in model with an arbitrary numpy map."""

    def __init__(self, fn):
        self.fn = fn

    def teacher_forced(self, seq):
        return Tensor(self.fn(seq.data[:, :-1]))


def test_loss_examples():
    seq = np.random.default_rng(1).standard_normal((3, 5, 2))
    perfect = _Fixed(lambda x: seq[:, 1:])
    assert float(teacher_forcing_loss(perfect, seq).data) == 0.0
    offset = _Fixed(lambda x: seq[:, 1:] + 0.1)
    assert float(teacher_forcing_loss(offset, seq).data) == pytest.approx(0.02, abs=1e-15)
    with pytest.raises(ValueError):
        teacher_forcing_loss(perfect, seq[:, :1])


def test_loss_hand_linear_model():
    m = MLPModel(1, 4, 1, np.random.default_rng(0))
    # s_{t+1} = 0.5 s_t + 0.25 s_0 + 0.1
    set_linear_field(m, np.array([[0.5]]), b=[0.1], cond_weight=np.array([[0.25]]))
    seq = np.array([[[1.0], [2.0], [0.5]]])
    p1 = 0.5 * 1.0 + 0.25 + 0.1
    p2 = 0.5 * 2.0 + 0.25 + 0.1
    ref = ((p1 - 2.0) ** 2 + (p2 - 0.5) ** 2) / 2
    assert float(teacher_forcing_loss(m, seq).data) == pytest.approx(ref, abs=1e-12)


@given(st.permutations(range(5)))
def test_loss_permutation_invariant(perm):
    m = build_model(TOY["mlp"], 2, 0)
    seq = np.random.default_rng(2).standard_normal((5, 4, 2))
    a = float(teacher_forcing_loss(m, seq).data)
    b = float(teacher_forcing_loss(m, seq[list(perm)]).data)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("tag", sorted(TOY))
def test_loss_gradient_all_architectures(tag):
    m = build_model(TOY[tag], 3, 1)
    seq = np.random.default_rng(3).standard_normal((2, 6, 3)) * 0.5
    errs = fd_directional(lambda: teacher_forcing_loss(m, seq), list(m.parameters().values()), 20,
                          np.random.default_rng(5))
    assert errs.max() < 1e-5


def _damped_rotation(n=40, T=20, seed=0):
    th, r = 0.3, 0.97
    A = r * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    x0 = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    out = [x0]
    for _ in range(T - 1):
        out.append(out[-1] @ A.T)
    return np.stack(out, axis=1)


def test_training_returns_validation_argmin_and_is_deterministic():
    ds = _ds(_damped_rotation(20, 8))

    def run():
        m = build_model({"tag": "mlp", "width": 8, "depth": 2}, 2, 0)
        return m, train_model(m, ds, TrainConfig(epochs=30, lr=1e-2, batch_size=4, seed=3))

    m, res = run()
    vals = [h[2] for h in res.history]
    assert res.best_val == min(vals) and res.history[res.best_epoch - 1][2] == res.best_val
    from chaosbench.training import _batched_loss

    assert _batched_loss(m, normalize(ds.split("val"), res.stats)) == pytest.approx(res.best_val, rel=1e-12)
    _, res2 = run()
    assert res.history == res2.history
    assert res.config["seed"] == 3


def test_damped_rotation_is_learned():
    ds = _ds(_damped_rotation(40, 20))
    m = build_model({"tag": "mlp", "width": 32, "depth": 2}, 2, 0)
    res = train_model(m, ds, TrainConfig(epochs=2000, batch_size=4))
    assert res.history[-1][0] == 2000
    assert res.best_val < 1e-4


def test_validation_statistics_are_rejected():
    ds = _ds(_damped_rotation(10, 5))
    with pytest.raises(TrainingError):
        train_model(build_model(TOY["mlp"], 2), ds, TrainConfig(epochs=1), compute_norm_stats(ds, "val"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    ds = _ds(_damped_rotation(10, 5))
    m = build_model(TOY["mlp"], 2)
    m.net.layers[0].weight.data[0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_model(m, ds, TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_log_csv(tmp_path):
    write_log_csv(tmp_path / "log.csv", [(1, 0.5, 0.25), (2, 0.4, float("nan"))])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert lines[1] == "1,0.5,0.25" and lines[2] == "2,0.4,nan"
