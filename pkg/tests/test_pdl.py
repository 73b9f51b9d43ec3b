import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients, weighted_sum
from decoupled_labels import autodiff as ad
from decoupled_labels import pdl
from decoupled_labels.labels import from_table, map_to_patterns, map_to_predicates

ROWS = [("sit_above", "sit", "above"), ("stand_above", "stand", "above"), ("sit_below", "sit", "below"),
        ("bite", "bite", None), ("inside", None, "inside"), ("sit", "sit", None)]


def vocab():
    return from_table(ROWS)


def small_model(seed=0, zeros=False, d=6, h=5):
    v = vocab()
    return v, pdl.PDLModel(d, h, v.n_a, v.n_s, seed=seed, zeros=zeros)


# -- forward -----------------------------------------------------------------

def test_zero_model_gives_half():
    v, m = small_model(zeros=True)
    out = m.forward(np.random.default_rng(0).normal(size=(3, 6)))
    assert np.all(out.p_a.data == 0.5) and np.all(out.p_s.data == 0.5)
    assert np.all(pdl.predict(m, np.ones((2, 6)), v, pdl.PDLConfig()) == 0.5)


def test_output_shapes():
    m = pdl.PDLModel(64, 64, 8, 6, seed=1)
    out = m.forward(np.zeros((4, 64)))
    assert out.p_a.shape == (4, 8) and out.p_s.shape == (4, 6)
    assert out.f_a.shape == (4, 64) and out.f_s.shape == (4, 64)


def test_forward_dimension_mismatch():
    _, m = small_model()
    with pytest.raises(ValueError, match=r"\[B, 6\]"):
        m.forward(np.zeros((2, 7)))


def test_sigmoid_of_raw_scores():
    _, m = small_model(seed=3)
    out = m.forward(np.random.default_rng(3).normal(size=(2, 6)))
    np.testing.assert_allclose(out.p_a.data, 1 / (1 + np.exp(-out.raw_a.data)), rtol=1e-12)


def _p_a(params, x):
    return ad.sigmoid(pdl.linear(params, "A", pdl.mlp(params, "D_a", x)))


def test_p_a_path_is_decoupler_then_head():
    _, m = small_model(seed=1)
    x = np.random.default_rng(1).normal(size=(3, 6))
    np.testing.assert_array_equal(m.forward(x).p_a.data, _p_a(m.params, ad.Tensor(x)).data)


@pytest.mark.parametrize("seed", range(20))
def test_p_a_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    _, m = small_model(seed=seed, d=4, h=3)
    x = ad.Tensor(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, m.n_a))
    names = m.params.names("D_a", "A")

    def build(*tensors):
        return weighted_sum(_p_a(dict(zip(names, tensors)), x), w)

    check_gradients(build, [m.params[n].data.copy() for n in names])


def test_heads_see_only_their_features():
    """A reads f_a only; perturbing D_s leaves p_a unchanged."""
    _, m = small_model(seed=2)
    x = np.random.default_rng(2).normal(size=(3, 6))
    before = m.forward(x).p_a.data.copy()
    m.params["D_s.0.W"].data += 1.0
    np.testing.assert_array_equal(m.forward(x).p_a.data, before)


# -- adversarial loss ------------------------------------------------------------

def test_adversarial_loss_zero_when_probes_match():
    _, m = small_model(seed=4)
    x = np.random.default_rng(4).normal(size=(3, 6))
    out = m.forward(x)
    # targets equal to the probe outputs themselves
    with ad.no_grad():
        a2s = pdl.linear(m.params, "S", pdl.mlp(m.params, "N_a2s", out.f_a))
        s2a = pdl.linear(m.params, "A", pdl.mlp(m.params, "N_s2a", out.f_s))
    targets = (ad.softmax(a2s).data, ad.softmax(s2a).data)
    loss = pdl.adversarial_loss(m, out, pdl.PDLConfig(), targets)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    m.params.zero_grad()
    ad.backward(loss)
    for n in m.params.names():
        g = m.params[n].grad
        assert g is None or np.abs(g).max() < 1e-12, n


def test_zero_lambda_blocks_decoupler_gradient():
    _, m = small_model(seed=5)
    out = m.forward(np.random.default_rng(5).normal(size=(3, 6)))
    loss = pdl.adversarial_loss(m, out, pdl.PDLConfig(grl_lambda=0.0))
    m.params.zero_grad()
    ad.backward(loss)
    for n in m.params.names("D_a", "D_s"):
        assert not m.params[n].grad.any(), n
    assert any(m.params[n].grad.any() for n in m.params.names("N_a2s", "N_s2a"))


def test_decoupler_gradient_is_reversed_and_scaled():
    x = np.random.default_rng(6).normal(size=(3, 6))
    grads = {}
    for lam in (0.0, 0.13, 1.0):
        _, m = small_model(seed=6)
        out = m.forward(x)
        m.params.zero_grad()
        ad.backward(pdl.adversarial_loss(m, out, pdl.PDLConfig(grl_lambda=lam)))
        grads[lam] = {n: m.params[n].grad.copy() for n in m.params.names()}
    # plain gradient of the same KL without reversal, via lambda=1 sign flip
    for n in grads[1.0]:
        if n.startswith("D_"):
            np.testing.assert_allclose(grads[0.13][n], 0.13 * grads[1.0][n], rtol=1e-10, atol=1e-15)
        else:
            np.testing.assert_array_equal(grads[0.13][n], grads[1.0][n])


def test_negative_lambda_rejected():
    _, m = small_model()
    out = m.forward(np.zeros((1, 6)))
    cfg = pdl.PDLConfig()
    cfg.grl_lambda = -0.5
    with pytest.raises(ValueError, match="grl_lambda"):
        pdl.adversarial_loss(m, out, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        pdl.PDLConfig(grl_lambda=-1)
    with pytest.raises(ValueError):
        pdl.PDLConfig(eta=1.5)
    with pytest.raises(ValueError):
        pdl.PDLConfig(mc_steps=-1)


def _direction_batch():
    from decoupled_labels import data as dm
    tr, te, v = dm.generate(dm.SyntheticConfig(n_train=50, n_test=10))
    return v, np.stack([r.features for r in te])


@pytest.mark.parametrize("mode,lr", [("sgd", 1e-2), ("sgd", 1e-3), ("adam", 1e-3)])
@pytest.mark.parametrize("seed", range(5))
def test_two_player_directions(seed, mode, lr):
    v, x = _direction_batch()
    deltas = {}
    for group in (pdl.PROBES, pdl.DISENTANGLERS):
        m = pdl.PDLModel(64, 64, v.n_a, v.n_s, seed=seed)
        cfg = pdl.PDLConfig()
        loss = pdl.adversarial_loss(m, m.forward(x), cfg)
        before = loss.item()
        m.params.zero_grad()
        ad.backward(loss)
        ad.Optimizer(m.params, lr, mode).step(m.params.names(*group))
        with ad.no_grad():
            deltas[group[0][0]] = pdl.adversarial_loss(m, m.forward(x), cfg).item() - before
    assert deltas["N"] < 0
    assert deltas["D"] > 0


# -- mutual calibration ---------------------------------------------------------

def _scores(seed, b=3):
    v = vocab()
    rng = np.random.default_rng(seed)
    return v, rng.random((b, v.n_a)), rng.random((b, v.n_s))


def test_calibration_zero_steps_is_identity():
    v, pa, ps = _scores(0)
    a, s = pdl.mutual_calibrate(pa, ps, v, pdl.PDLConfig(mc_steps=0, eta=0.0))
    np.testing.assert_array_equal(a.data, pa)
    np.testing.assert_array_equal(s.data, ps)


def test_calibration_eta_one_is_identity():
    v, pa, ps = _scores(1)
    a, s = pdl.mutual_calibrate(pa, ps, v, pdl.PDLConfig(mc_steps=4, eta=1.0))
    np.testing.assert_array_equal(a.data, pa)
    np.testing.assert_array_equal(s.data, ps)


def test_calibration_fixed_point_for_singles():
    v = from_table([("a", "a", None), ("b", "b", None), ("c", None, "c")])
    pa, ps = np.array([[0.1, 0.8]]), np.array([[0.3]])
    a, s = pdl.mutual_calibrate(pa, ps, v, pdl.PDLConfig(mc_steps=3, eta=0.0))
    np.testing.assert_array_equal(a.data, pa)
    np.testing.assert_array_equal(s.data, ps)


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_calibration_matches_direct_maps(steps):
    v, pa, ps = _scores(2)
    eta = 0.3
    a, s = pdl.mutual_calibrate(pa, ps, v, pdl.PDLConfig(mc_steps=steps, eta=eta))
    xa, xs = pa.copy(), ps.copy()
    for _ in range(steps):
        ya, ys = map_to_patterns(map_to_predicates(xa, xs, v), v)
        xa, xs = eta * xa + (1 - eta) * ya, eta * xs + (1 - eta) * ys
    np.testing.assert_allclose(a.data, xa, atol=1e-12)
    np.testing.assert_allclose(s.data, xs, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_calibration_stays_within_group_range(seed, eta):
    v, pa, ps = _scores(seed, b=1)
    a, s = pdl.mutual_calibrate(pa, ps, v, pdl.PDLConfig(mc_steps=1, eta=eta))
    lo = min(pa.min(), ps.min()) - 1e-12
    hi = max(pa.max(), ps.max()) + 1e-12
    assert np.all(a.data >= lo) and np.all(a.data <= hi)
    assert np.all(s.data >= lo) and np.all(s.data <= hi)


@pytest.mark.parametrize("seed", range(20))
def test_calibration_gradcheck(seed):
    v, pa, ps = _scores(seed, b=2)
    w = np.random.default_rng(seed + 100).normal(size=(2, v.n_p))
    cfg = pdl.PDLConfig(mc_steps=2, eta=0.2)
    ca, cs = v.predicate_matrices

    def build(a, s):
        a, s = pdl.mutual_calibrate(a, s, v, cfg)
        return weighted_sum(ad.add(ad.matmul_const(a, ca), ad.matmul_const(s, cs)), w)

    check_gradients(build, [pa, ps])


# -- predict -----------------------------------------------------------------------

def test_predict_shape_and_range():
    v, m = small_model(seed=7)
    p = pdl.predict(m, np.random.default_rng(7).normal(size=(9, 6)), v, pdl.PDLConfig())
    assert p.shape == (9, v.n_p)
    assert np.all((p >= 0) & (p <= 1))


def test_predict_ignores_probes():
    v, m = small_model(seed=8)
    x = np.random.default_rng(8).normal(size=(4, 6))
    before = pdl.predict(m, x, v, pdl.PDLConfig())
    for n in m.params.names("N_a2s", "N_s2a"):
        m.params[n].data[...] = 123.0
    np.testing.assert_array_equal(pdl.predict(m, x, v, pdl.PDLConfig()), before)


def test_predict_records_no_graph():
    v, m = small_model(seed=9)
    with ad.no_grad():
        p, _ = m.predicate_scores(np.ones((2, 6)), v, pdl.PDLConfig())
    assert not p.requires_grad and not p._parents
