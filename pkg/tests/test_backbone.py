import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from naive import naive_forward

from normtta.backbone import (BN_EPS, Architecture, DimensionError, NonFiniteInputError, TaskHead, TrainConfig,
                              backward_to_bn, bn_apply, forward, grad_bn_affine, init_params, load_checkpoint,
                              predict, save_checkpoint, train_supervised)
from normtta.data import WindowDataset

ARCH = Architecture(3, 16, hidden=4)
GOLDEN_REGRESSION = [[0.9861832514184455, -0.9476346750937366], [0.8490202261067346, -0.7978050353576931],
                     [0.8797434948441045, -0.8349965192166159], [0.878559875981112, -0.8248407351530498]]
GOLDEN_CLASSIFICATION = [[0.8736714047222804, 0.12632859527771959], [0.8384615136697311, 0.161538486330269],
                         [0.8474500755967931, 0.15254992440320703], [0.845978352582538, 0.15402164741746208]]


def golden_params(kind, horizon):
    p = init_params(ARCH, TaskHead(kind, horizon), 0)
    r = np.random.default_rng(2)
    for nm in p.bn_names():
        p.arrays[nm + ".mean"] = r.normal(0, .3, 4)
        p.arrays[nm + ".var"] = r.uniform(.5, 2, 4)
        p.arrays[nm + ".gamma"] = r.uniform(.5, 1.5, 4)
        p.arrays[nm + ".beta"] = r.normal(0, .2, 4)
    return p


def golden_batch():
    return np.random.default_rng(1).normal(size=(4, 16, 3))


# ---------------------------------------------------------------------------
# forward


@pytest.mark.parametrize("kind,horizon,golden", [("regression", 2, GOLDEN_REGRESSION),
                                                 ("classification", 1, GOLDEN_CLASSIFICATION)])
def test_forward_golden_master(kind, horizon, golden):
    p = golden_params(kind, horizon)
    out = forward(p, golden_batch()).output
    np.testing.assert_allclose(out, golden, rtol=1e-12, atol=1e-14)
    # independent loop implementation agrees
    ref = naive_forward(p.arrays, 3, 2, 3, (1, 2, 4), golden_batch(), kind)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_zero_head_gives_uniform_probabilities():
    p = init_params(ARCH, TaskHead("classification", 1), 3)
    p.arrays["head.weight"][:] = 0
    p.arrays["head.bias"][:] = 0
    out = forward(p, golden_batch()).output
    np.testing.assert_array_equal(out, 0.5)


def test_duplicate_window_gives_identical_output():
    p = init_params(ARCH, TaskHead("regression", 3), 1)
    x = golden_batch()
    batch = np.concatenate([x[:1], x[:1], x[1:]])
    out = forward(p, batch).output
    np.testing.assert_array_equal(out[0], out[1])


def test_forward_is_deterministic():
    p = init_params(ARCH, TaskHead("regression", 3), 1)
    a = forward(p, golden_batch()).output
    b = forward(p, golden_batch()).output
    np.testing.assert_array_equal(a, b)


def test_classification_rows_sum_to_one():
    p = init_params(ARCH, TaskHead("classification", 1), 5)
    out = forward(p, golden_batch() * 10).output
    assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-6)


def test_regression_output_dimension_is_horizon():
    p = init_params(ARCH, TaskHead("regression", 7), 5)
    assert forward(p, golden_batch()).output.shape == (4, 7)


def test_shape_mismatch_is_dimension_error():
    p = init_params(ARCH, TaskHead("regression", 2), 0)
    with pytest.raises(DimensionError):
        forward(p, np.zeros((2, 15, 3)))


def test_non_finite_window_reports_index():
    p = init_params(ARCH, TaskHead("regression", 2), 0)
    x = golden_batch()
    x[2, 5, 1] = np.nan
    with pytest.raises(NonFiniteInputError) as exc:
        forward(p, x)
    assert exc.value.index == 2


def test_phi_dimension_is_twice_bn_channels():
    p = init_params(ARCH, TaskHead("regression", 2), 0)
    n_bn = ARCH.blocks * ARCH.convs_per_block
    assert p.phi_dim == 2 * n_bn * ARCH.hidden
    phi = p.get_phi()
    p.set_phi(phi + 1)
    np.testing.assert_array_equal(p.get_phi(), phi + 1)


def test_receptive_field():
    assert Architecture(1, 96).receptive_field == 29


def test_batch_mode_is_causal():
    # changing the last step must not move outputs at earlier steps of any BN layer
    p = init_params(ARCH, TaskHead("regression", 1), 0)
    x = golden_batch()
    y = x.copy()
    y[:, -1] += 5.0
    a = forward(p, x).normalized
    b = forward(p, y).normalized
    for name in a:
        np.testing.assert_array_equal(a[name][:, :-1], b[name][:, :-1])


# ---------------------------------------------------------------------------
# batch-norm primitives


def test_bn_apply_at_mean_returns_beta():
    u = np.full((3, 2), 1.7)
    _, y = bn_apply(u, 1.7, 0.3, 2.0, -0.4)
    np.testing.assert_allclose(y, -0.4)


def test_bn_apply_substitution():
    h, y = bn_apply(np.array([5.0]), 1.0, 2.0, 1.0, 0.0)
    assert h[0] == 2.0 and y[0] == 2.0


def test_bn_apply_zero_gamma():
    _, y = bn_apply(np.linspace(-3, 3, 7), 0.2, 1.1, 0.0, 0.7)
    np.testing.assert_array_equal(y, 0.7)


def test_bn_apply_rejects_non_positive_sigma():
    with pytest.raises(FloatingPointError):
        bn_apply(np.ones(2), 0.0, 0.0, 1.0, 0.0)


@given(st.integers(0, 10_000))
def test_batch_mode_normalized_moments(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(rng.normal(0, 5), rng.uniform(0.5, 4), size=(8, 20, 3))
    mu, var = u.mean(axis=(0, 1)), u.var(axis=(0, 1))
    h, _ = bn_apply(u, mu, np.sqrt(var), 1.0, 0.0)
    np.testing.assert_allclose(h.mean(axis=(0, 1)), 0, atol=1e-5)
    np.testing.assert_allclose(h.std(axis=(0, 1)), 1, atol=1e-5)


def test_grad_bn_affine_examples():
    g_gamma, g_beta = grad_bn_affine(np.ones((3, 4, 2)), np.random.default_rng(0).normal(size=(3, 4, 2)))
    np.testing.assert_array_equal(g_beta, 12.0)
    g_gamma, _ = grad_bn_affine(np.random.default_rng(0).normal(size=(3, 4, 2)), np.zeros((3, 4, 2)))
    np.testing.assert_array_equal(g_gamma, 0.0)
    g_gamma, g_beta = grad_bn_affine(np.array([[1.0], [-2.0]]), np.array([[0.5], [1.0]]))
    assert g_gamma[0] == -1.5 and g_beta[0] == -1.0


def test_grad_bn_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        grad_bn_affine(np.ones((2, 3)), np.ones((3, 2)))


# ---------------------------------------------------------------------------
# gradients over phi


def _fd_check(p, x, dout, eps=1e-4):
    fwd = forward(p, x)
    g = backward_to_bn(p, fwd, dout)
    phi = p.get_phi()
    num = np.empty_like(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = eps
        p.set_phi(phi + e)
        lp = float((forward(p, x).logits * dout).sum())
        p.set_phi(phi - e)
        lm = float((forward(p, x).logits * dout).sum())
        num[i] = (lp - lm) / (2 * eps)
    p.set_phi(phi)
    return g, num


def test_backward_to_bn_matches_finite_differences_two_windows():
    arch = Architecture(2, 8, hidden=3, blocks=2, dilations=(1, 2))
    p = init_params(arch, TaskHead("regression", 2), 4)
    rng = np.random.default_rng(0)
    for nm in p.bn_names():
        p.arrays[nm + ".gamma"] = rng.uniform(0.5, 1.5, 3)
        p.arrays[nm + ".beta"] = rng.normal(0, 0.3, 3)
    x = rng.normal(size=(2, 8, 2))
    dout = rng.normal(size=(2, 2))
    g, num = _fd_check(p, x, dout)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)


def test_backward_to_bn_zero_and_linear():
    p = init_params(ARCH, TaskHead("classification", 1), 0)
    fwd = forward(p, golden_batch())
    np.testing.assert_array_equal(backward_to_bn(p, fwd, np.zeros((4, 2))), 0.0)
    d = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_allclose(backward_to_bn(p, fwd, 2 * d), 2 * backward_to_bn(p, fwd, d), rtol=1e-12)


def test_backward_needs_forward_cache():
    p = init_params(ARCH, TaskHead("regression", 2), 0)
    with pytest.raises(RuntimeError):
        backward_to_bn(p, None, np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# training and checkpoints


def _toy_regression(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 8, 2))
    y = np.stack([x[:, -1, 0], x[:, :, 1].mean(axis=1)], axis=1)
    ds = WindowDataset(x, y, np.arange(n), np.arange(n))
    return ds


def test_training_memorizes_small_dataset():
    ds = _toy_regression()
    arch = Architecture(2, 8, hidden=16, blocks=2, dilations=(1, 2))
    cfg = TrainConfig(lr=1e-2, batch_size=64, max_epochs=600, patience=600, weight_decay=0.0, seed=0)
    p = train_supervised(ds, ds, TaskHead("regression", 2), cfg, arch)
    mse = float(((predict(p, ds.inputs, bn_mode="batch") - ds.labels) ** 2).mean())
    assert mse < 1e-3


def test_training_is_deterministic():
    ds = _toy_regression()
    arch = Architecture(2, 8, hidden=4, blocks=1, dilations=(1,))
    cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=3, patience=3, seed=7)
    a = train_supervised(ds, ds, TaskHead("regression", 2), cfg, arch)
    b = train_supervised(ds, ds, TaskHead("regression", 2), cfg, arch)
    assert a.meta["best_metric"] == b.meta["best_metric"]
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])


def test_early_stopping_halts_after_patience():
    train = _toy_regression(seed=0)
    valid = _toy_regression(seed=1)
    valid.labels = np.random.default_rng(5).normal(size=valid.labels.shape) * 50  # unlearnable
    arch = Architecture(2, 8, hidden=4, blocks=1, dilations=(1,))
    cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=50, patience=3, seed=0)
    p = train_supervised(train, valid, TaskHead("regression", 2), cfg, arch)
    hist = [h["valid_metric"] for h in p.meta["history"]]
    best_epoch = int(np.argmin(hist))
    assert p.meta["epochs_run"] == best_epoch + 3
    assert all(m >= hist[best_epoch] for m in hist[best_epoch + 1:])


def test_training_rejects_empty_dataset():
    ds = _toy_regression()
    empty = ds.subset(np.zeros(len(ds), dtype=bool))
    with pytest.raises(ValueError):
        train_supervised(empty, ds, TaskHead("regression", 2), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    from normtta.data import Scaler

    p = golden_params("regression", 2)
    scaler = Scaler(("a", "b", "c"), np.array([1.0, 2.0, 3.0]), np.array([0.5, 1.5, 2.5]))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, p, scaler, seed=11)
    q, s, seed = load_checkpoint(path)
    assert seed == 11 and q.arch == p.arch and q.head == p.head
    np.testing.assert_array_equal(s.mean, scaler.mean)
    np.testing.assert_array_equal(forward(q, golden_batch()).output, forward(p, golden_batch()).output)


def test_bn_eps_floor():
    assert BN_EPS == 1e-5
