import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from chaosbench import autodiff as ad
from chaosbench.autodiff import Tensor
from chaosbench.evaluation import rollout_normalized
from chaosbench.models import (
    ABLATION_VARIANTS,
    ALL_TAGS,
    MAIN_MODELS,
    CoRDModel,
    Dopri5Config,
    LSTMModel,
    MLPModel,
    NeuralODEModel,
    StiffnessError,
    TCNModel,
    UnknownModelError,
    benchmark_specs,
    build_model,
    build_variant,
    dopri5_integrate,
    load_model,
    save_model,
    spec_param_count,
)
from chaosbench.training import teacher_forcing_loss

from helpers import fd_directional, set_linear_field, step_np, zero_params

TOY = {
    "mlp": {"tag": "mlp", "width": 8, "depth": 3},
    "lstm": {"tag": "lstm", "hidden": 5, "layers": 2},
    "tcn": {"tag": "tcn", "channels": 6, "blocks": 2},
    "node": {"tag": "node", "width": 8, "depth": 3},
    "cord": {"tag": "cord", "width": 8, "depth": 3},
}


def _gelu(x):
    return np.vectorize(lambda v: v * 0.5 * (1 + math.erf(v / math.sqrt(2))))(x)


def _sig(x):
    return 1 / (1 + np.exp(-x))


# -- MLP -------------------------------------------------------------------------
def test_mlp_zero_weights_outputs_bias():
    m = MLPModel(3, 8, 3, np.random.default_rng(0))
    zero_params(m)
    b = np.array([0.1, -0.2, 0.3])
    m.net.layers[-1].bias.data = b
    y, _ = step_np(m, np.random.default_rng(1).standard_normal((4, 3)))
    np.testing.assert_array_equal(y, np.tile(b, (4, 1)))


def test_mlp_single_identity_layer():
    m = MLPModel(3, 8, 1, np.random.default_rng(0))
    set_linear_field(m, np.eye(3))
    z = np.random.default_rng(2).standard_normal((5, 3))
    y, _ = step_np(m, z, np.ones((5, 3)))
    np.testing.assert_array_equal(y, z)


def test_mlp_two_layer_matrix_oracle():
    m = MLPModel(2, 5, 2, np.random.default_rng(3))
    z, c = np.random.default_rng(4).standard_normal((2, 6, 2))
    l1, l2 = m.net.layers
    u = np.concatenate([z, c], axis=1)
    ref = _gelu(u @ l1.weight.data + l1.bias.data) @ l2.weight.data + l2.bias.data
    y, _ = step_np(m, z, c)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_shape_mismatch_rejected():
    m = MLPModel(3, 8, 2, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        step_np(m, np.zeros((2, 4)))
    with pytest.raises(ad.ShapeError):
        m.step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# -- LSTM ------------------------------------------------------------------------
def test_lstm_zero_weights():
    m = LSTMModel(2, 3, 1, np.random.default_rng(0))
    zero_params(m)
    m.readout.bias.data = np.array([0.5, -1.0])
    z = np.random.default_rng(1).standard_normal((4, 2))
    y, st_ = step_np(m, z, rstate=m.init_rstate(4))
    np.testing.assert_array_equal(y, np.tile([0.5, -1.0], (4, 1)))
    h, c = st_[0]
    np.testing.assert_array_equal(c.data, 0.0)
    np.testing.assert_array_equal(h.data, 0.0)
    c0 = np.ones((4, 3)) * np.array([1.0, 2.0, -3.0])
    rs = [(Tensor(np.zeros((4, 3))), Tensor(c0))]
    _, st_ = step_np(m, z, rstate=rs)
    h, c = st_[0]
    np.testing.assert_allclose(c.data, 0.5 * c0, rtol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)


def test_lstm_gate_equation_oracle():
    D, H = 2, 4
    m = LSTMModel(D, H, 1, np.random.default_rng(5))
    p = m.cells[0]._params
    W, U, b = p["W"].data, p["U"].data, p["b"].data
    rng = np.random.default_rng(6)
    z, s0 = rng.standard_normal((2, 3, D))
    h0, c0 = rng.standard_normal((2, 3, H))
    x = np.concatenate([z, s0], axis=1)
    # gate blocks laid out as input, forget, output, candidate
    Wi, Wf, Wo, Wg = np.split(W, 4, axis=1)
    Ui, Uf, Uo, Ug = np.split(U, 4, axis=1)
    bi, bf, bo, bg = np.split(b, 4)
    i = _sig(x @ Wi + h0 @ Ui + bi)
    f = _sig(x @ Wf + h0 @ Uf + bf)
    o = _sig(x @ Wo + h0 @ Uo + bo)
    g = np.tanh(x @ Wg + h0 @ Ug + bg)
    c1 = f * c0 + i * g
    h1 = o * np.tanh(c1)
    y_ref = h1 @ m.readout.weight.data + m.readout.bias.data
    y, st_ = step_np(m, z, s0, [(Tensor(h0), Tensor(c0))])
    np.testing.assert_allclose(st_[0][1].data, c1, atol=1e-12)
    np.testing.assert_allclose(st_[0][0].data, h1, atol=1e-12)
    np.testing.assert_allclose(y, y_ref, atol=1e-12)


def test_lstm_teacher_forcing_threads_state():
    m = build_model(TOY["lstm"], 3, 0)
    seq = np.random.default_rng(7).standard_normal((2, 5, 3))
    with ad.no_grad():
        tf = m.teacher_forced(Tensor(seq)).data
    rs = m.init_rstate(2)
    for t in range(4):
        y, rs = step_np(m, seq[:, t], seq[:, 0], rs)
        np.testing.assert_allclose(y, tf[:, t], atol=1e-14)


# -- TCN -------------------------------------------------------------------------
def test_tcn_receptive_field():
    m = TCNModel(2, 4, 2, np.random.default_rng(0), kernel=3)
    assert m.receptive_field == 1 + 2 * (3 - 1) * (1 + 2) == 13


@given(st.integers(0, 11), st.integers(0, 1000))
def test_tcn_causality(t_pert, seed):
    m = TCNModel(2, 4, 2, np.random.default_rng(1))
    u = np.random.default_rng(seed).standard_normal((1, 12, 4))
    with ad.no_grad():
        a = m.forward_sequence(Tensor(u)).data
        u2 = u.copy()
        u2[:, t_pert] += 1.0
        b = m.forward_sequence(Tensor(u2)).data
    assert a[:, :t_pert].tobytes() == b[:, :t_pert].tobytes()
    assert not np.array_equal(a[:, t_pert], b[:, t_pert])


def test_tcn_zero_convolutions_pass_projection():
    m = TCNModel(2, 4, 2, np.random.default_rng(2))
    for blk in m.convs:
        for p in blk._params.values():
            p.data = np.zeros_like(p.data)
    u = np.random.default_rng(3).standard_normal((2, 6, 4))
    with ad.no_grad():
        out = m.forward_sequence(Tensor(u)).data
    proj = u @ m.proj.weight.data + m.proj.bias.data
    ref = proj @ m.readout.weight.data + m.readout.bias.data
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_tcn_stepwise_equals_teacher_forced():
    m = build_model(TOY["tcn"], 2, 0)
    seq = np.random.default_rng(4).standard_normal((3, 16, 2))
    with ad.no_grad():
        tf = m.teacher_forced(Tensor(seq)).data
    rs = m.init_rstate(3)
    for t in range(15):
        y, rs = step_np(m, seq[:, t], seq[:, 0], rs)
        np.testing.assert_allclose(y, tf[:, t], atol=1e-13)
    assert rs.shape[1] == m.receptive_field - 1


# -- Dormand-Prince ----------------------------------------------------------------
def test_dopri5_examples():
    y0 = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(dopri5_integrate(lambda y: np.zeros_like(y), y0, 1.0), y0)
    cfg = Dopri5Config(rtol=1e-8, atol=1e-10)
    e = dopri5_integrate(lambda y: y, np.array([[1.0]]), 1.0, cfg)
    assert abs(e[0, 0] / math.e - 1) < 1e-7
    rot = dopri5_integrate(lambda y: np.stack([-y[..., 1], y[..., 0]], -1), np.array([[1.0, 0.0]]), np.pi / 2, cfg)
    np.testing.assert_allclose(rot, [[0.0, 1.0]], atol=1e-5)
    assert abs(np.linalg.norm(rot) - 1) < 1e-6


def test_dopri5_stiffness_error():
    with pytest.raises(StiffnessError):
        dopri5_integrate(lambda y: -1e6 * y, np.array([[1.0]]), 1.0, Dopri5Config(max_steps=5))


def test_dopri5_rejects_bad_config():
    with pytest.raises(ValueError):
        Dopri5Config(rtol=0.0)
    with pytest.raises(ValueError):
        dopri5_integrate(lambda y: y, np.ones((1, 1)), 0.0)


def test_dopri5_rows_are_independent():
    """Per-row error control: a batch result equals the rows integrated separately."""
    A = np.array([[0.0, 1.0], [-4.0, -0.1]])
    f = lambda y: y @ A.T  # noqa: E731
    y0 = np.array([[1.0, 0.0], [0.0, 3.0]])
    batch = dopri5_integrate(f, y0, 2.0)
    for i in range(2):
        np.testing.assert_allclose(batch[i : i + 1], dopri5_integrate(f, y0[i : i + 1], 2.0), rtol=1e-13, atol=1e-14)


# -- NeuralODE / CoRD ------------------------------------------------------------------
def test_node_zero_and_constant_fields():
    m = NeuralODEModel(3, 6, 2, np.random.default_rng(0))
    zero_params(m)
    z = np.random.default_rng(1).standard_normal((2, 3))
    np.testing.assert_array_equal(step_np(m, z)[0], z)
    c = np.array([0.2, -0.1, 0.4])
    m.field.layers[-1].bias.data = c
    np.testing.assert_allclose(step_np(m, z)[0], z + 1.0 * c, atol=1e-14)


def test_node_linear_field_matrix_exponential():
    A = np.array([[-0.3, 0.8, 0.0], [-0.8, -0.3, 0.1], [0.0, 0.2, -0.5]])
    m = NeuralODEModel(3, 6, 1, np.random.default_rng(0))
    set_linear_field(m, A)
    z = np.random.default_rng(2).standard_normal((4, 3))
    ref = z @ scipy.linalg.expm(A * m.h_ode).T
    np.testing.assert_allclose(step_np(m, z)[0], ref, atol=1e-5, rtol=1e-5)


def test_cord_examples():
    m = CoRDModel(3, 6, 2, np.random.default_rng(0), substeps=3, dt=0.6)
    zero_params(m)
    z = np.random.default_rng(1).standard_normal((2, 3))
    np.testing.assert_array_equal(step_np(m, z)[0], z)
    c = np.array([1.0, -2.0, 0.5])
    m.field.layers[-1].bias.data = c
    np.testing.assert_allclose(step_np(m, z)[0], z + 0.6 * c, atol=1e-15)
    m1 = CoRDModel(3, 6, 1, np.random.default_rng(0), substeps=3, dt=0.6)
    set_linear_field(m1, -np.eye(3))
    np.testing.assert_allclose(step_np(m1, z)[0], (1 - 0.6 / 3) ** 3 * z, atol=1e-15)


def test_cord_conditioning_is_fixed():
    """s0 enters every sub-step unchanged: with f = C s0 the update is dt * C s0."""
    m = CoRDModel(2, 4, 1, np.random.default_rng(0), substeps=4, dt=1.0)
    C = np.array([[1.0, 2.0], [0.0, -1.0]])
    set_linear_field(m, np.zeros((2, 2)), cond_weight=C)
    z, s0 = np.random.default_rng(1).standard_normal((2, 3, 2))
    np.testing.assert_allclose(step_np(m, z, s0)[0], z + s0 @ C.T, atol=1e-14)


# -- variants and registry -------------------------------------------------------------
def test_variants_structure():
    D, W, L = 4, 8, 3
    models = {t: build_variant(t, D, W, L) for t in ABLATION_VARIANTS}
    assert models["cord"].substeps == 3 and models["cord"].residual and models["cord"].conditioned
    assert models["cord_v1"].substeps == 1
    assert models["cord_v2"].residual is False
    assert models["cord_v3"].input_dim == D and models["cord_v3"].field.sizes[0] == D
    assert models["mlp_v1"].input_dim == D and isinstance(models["mlp_v1"], MLPModel)
    assert models["mlp_v2"].substeps == 1 and models["mlp_v2"].residual
    for t, m in models.items():
        sizes = m.net.sizes if isinstance(m, MLPModel) else m.field.sizes
        assert sizes[1:] == [W] * (L - 1) + [D], t


def test_variant_examples():
    D = 3
    z = np.random.default_rng(0).standard_normal((2, D))
    c = np.array([0.3, 0.1, -0.2])
    v1 = build_variant("cord_v1", D, 8, 2)
    zero_params(v1)
    v1.field.layers[-1].bias.data = c
    np.testing.assert_allclose(step_np(v1, z)[0], z + c, atol=1e-15)
    v2 = build_variant("cord_v2", D, 8, 2)
    zero_params(v2)
    v2.field.layers[-1].bias.data = c
    np.testing.assert_array_equal(step_np(v2, z)[0], np.tile(c, (2, 1)))
    v3 = build_variant("cord_v3", D, 8, 2)
    y, _ = v3.step(Tensor(z), None)
    assert y.shape == (2, D)


def test_unknown_tag():
    with pytest.raises(UnknownModelError):
        build_model({"tag": "transformer"}, 3)
    with pytest.raises(UnknownModelError):
        build_variant("cord_v9", 3, 4, 2)


@pytest.mark.parametrize("bench", ["dp", "ks", "kf"])
def test_capacity_matching(bench):
    specs = benchmark_specs(bench)
    D = {"dp": 6, "ks": 32, "kf": 256}[bench]
    counts = {m: spec_param_count(s, D) for m, s in specs.items()}
    for m, n in counts.items():
        assert abs(n - counts["mlp"]) <= 0.05 * counts["mlp"], (m, n)


@pytest.mark.parametrize("tag", MAIN_MODELS)
def test_built_count_matches_formula(tag):
    spec = benchmark_specs("dp", width=16)[tag]
    assert build_model(spec, 6).num_parameters() == spec_param_count(spec, 6)


@pytest.mark.parametrize("tag", ALL_TAGS)
def test_checkpoint_roundtrip(tag, tmp_path):
    spec = TOY.get(tag, {"tag": tag, "width": 8, "depth": 2})
    m = build_model(spec, 3, seed=4)
    save_model(tmp_path / "m.chbk", m, {"norm.mu": np.ones(3)}, {"note": "x"})
    back, arrays, meta = load_model(tmp_path / "m.chbk")
    assert back.tag == tag and meta["note"] == "x"
    np.testing.assert_array_equal(arrays["norm.mu"], np.ones(3))
    z = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_array_equal(step_np(m, z)[0], step_np(back, z)[0])


@pytest.mark.parametrize("tag", ALL_TAGS)
def test_uniform_rollout_interface(tag):
    spec = TOY.get(tag, {"tag": tag, "width": 8, "depth": 2})
    m = build_model(spec, 3, seed=1)
    out, div = rollout_normalized(m, np.random.default_rng(2).standard_normal((2, 3)) * 0.1, 6)
    assert out.shape == (2, 6, 3) and np.all(div == -1)


@pytest.mark.parametrize("tag", MAIN_MODELS)
def test_step_gradients_match_finite_differences(tag):
    m = build_model(TOY[tag], 3, seed=2)
    seq = np.random.default_rng(3).standard_normal((2, 5, 3)) * 0.5
    params = list(m.parameters().values())
    errs = fd_directional(lambda: teacher_forcing_loss(m, seq), params, 20, np.random.default_rng(4))
    assert errs.max() < 1e-5


def test_seeded_construction_is_deterministic():
    a = build_model(TOY["lstm"], 3, seed=9).state_dict()
    b = build_model(TOY["lstm"], 3, seed=9).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
