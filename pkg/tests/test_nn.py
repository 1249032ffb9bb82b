import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glandflow.nn import (
    PAPER_SCHEDULE,
    CheckpointError,
    Conv3x3,
    Dense,
    DivergenceError,
    Flatten,
    HistogramSpec,
    Identity,
    MaxPool2,
    ParamSet,
    ReLU,
    Sequential,
    SetHistogramPool,
    Tanh,
    TrainSchedule,
    Upsample2,
    check_gradients,
    grad_check,
    init_params,
    load_checkpoint,
    residual_block,
    save_checkpoint,
    sgd_step,
    sigmoid,
    sigmoid_cross_entropy,
    soft_histogram_pool,
    soft_histogram_pool_backward,
    softmax_cross_entropy,
    train,
    write_loss_csv,
)


def mse(y):
    return 0.5 * float((y * y).sum()), y


# ---------------------------------------------------------------- forward

def test_identity_and_zero_dense():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(Identity()(ParamSet(), x), x)
    d = Dense(4, 2).bind("d")
    p = ParamSet({"d.w": np.zeros((4, 2)), "d.b": np.zeros(2)})
    assert not d(p, x).any()


def test_two_layer_mlp_matches_matrix_arithmetic():
    net = Sequential(Dense(3, 4), ReLU(), Dense(4, 2), name="mlp")
    p = init_params(net, 3)
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    h = np.maximum(x @ p["mlp.0.w"] + p["mlp.0.b"], 0)
    assert np.array_equal(net(p, x), h @ p["mlp.2.w"] + p["mlp.2.b"])


def test_forward_rejects_shape_mismatch():
    net = Sequential(Dense(3, 2), name="m")
    with pytest.raises(ValueError):
        net(init_params(net, 0), np.zeros((1, 4)))
    conv = Sequential(Conv3x3(2, 2), name="c")
    with pytest.raises(ValueError):
        conv(init_params(conv, 0), np.zeros((1, 4, 4, 3)))


def test_forward_is_deterministic_and_init_reproducible():
    net = Sequential(Conv3x3(3, 4), ReLU(), MaxPool2(), Flatten(), Dense(16, 2), name="n")
    a, b = init_params(net, 11), init_params(net, 11)
    assert a.equals(b) and not a.equals(init_params(net, 12))
    x = np.random.default_rng(1).normal(size=(2, 4, 4, 3))
    assert np.array_equal(net(a, x), net(b, x))


def test_residual_identity_when_branch_is_zero():
    blk = residual_block(3).bind("r")
    p = ParamSet({k: np.zeros(s) for k, (s, _) in blk.param_specs().items()})
    x = np.random.default_rng(2).normal(size=(2, 5, 5, 3))
    assert np.array_equal(blk(p, x), x)


def test_residual_scalar_closed_form():
    blk = residual_block(1).bind("r")
    w1, b1, w2, b2 = 1.5, -0.25, -2.0, 0.75
    tensors = {k: np.zeros(s) for k, (s, _) in blk.param_specs().items()}
    tensors["r.f.0.w"][1, 1, 0, 0], tensors["r.f.0.b"][0] = w1, b1
    tensors["r.f.2.w"][1, 1, 0, 0], tensors["r.f.2.b"][0] = w2, b2
    for v in (-1.0, 0.4, 2.0):
        x = np.full((1, 1, 1, 1), v)
        expect = v + max(0.0, w2 * max(0.0, w1 * v + b1) + b2)
        assert blk(ParamSet(tensors), x)[0, 0, 0, 0] == pytest.approx(expect, abs=1e-15)


def test_maxpool_tie_goes_to_first_position():
    pool = MaxPool2()
    x = np.ones((1, 2, 2, 1))
    y, cache = pool.forward(None, x)
    dx, _ = pool.backward(None, cache, np.ones_like(y))
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_upsample_backward_sums_blocks():
    up = Upsample2()
    x = np.arange(4.0).reshape(1, 2, 2, 1)
    y, cache = up.forward(None, x)
    assert y.shape == (1, 4, 4, 1)
    dx, _ = up.backward(None, cache, np.ones_like(y))
    assert np.all(dx == 4.0)


# ---------------------------------------------------------------- soft histogram

def test_histogram_spec_defaults_and_validation():
    spec = HistogramSpec()
    assert spec.num_features == 128 and spec.num_bins == 5
    assert spec.bin_centers == (-1.0, -0.5, 0.0, 0.5, 1.0) and spec.bin_width == 0.5
    with pytest.raises(ValueError):
        HistogramSpec(4, 3, bin_centers=(0.0, -1.0, 1.0), bin_width=1.0)
    with pytest.raises(ValueError):
        HistogramSpec(4, 2, bin_centers=(0.0, 1.0), bin_width=0.0)


def test_histogram_exact_center_and_midpoint():
    spec = HistogramSpec(num_features=6, num_bins=5)
    h = soft_histogram_pool(np.full((1, 6), spec.bin_centers[2]), spec)
    assert np.array_equal(h[:, 2], np.ones(6)) and not np.delete(h, 2, axis=1).any()
    mid = (spec.bin_centers[1] + spec.bin_centers[2]) / 2
    h = soft_histogram_pool(np.full((1, 6), mid), spec)
    np.testing.assert_allclose(h[:, 1:3], 0.5, atol=1e-15)
    assert not h[:, [0, 3, 4]].any()


def test_histogram_errors():
    spec = HistogramSpec(num_features=3)
    with pytest.raises(ValueError):
        soft_histogram_pool(np.zeros((0, 3)), spec)
    with pytest.raises(ValueError):
        soft_histogram_pool(np.zeros((2, 4)), spec)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 64))
def test_histogram_permutation_invariant_bit_exact(seed, m):
    rng = np.random.default_rng(seed)
    spec = HistogramSpec(num_features=8)
    f = rng.uniform(-1.3, 1.3, size=(m, 8))
    base = soft_histogram_pool(f, spec)
    for _ in range(3):
        assert np.array_equal(soft_histogram_pool(f[rng.permutation(m)], spec), base)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 40))
def test_histogram_ranges_row_sums_and_duplication(seed, m):
    rng = np.random.default_rng(seed)
    spec = HistogramSpec(num_features=5)
    wide = rng.uniform(-2, 2, size=(m, 5))
    h = soft_histogram_pool(wide, spec)
    assert np.all((h >= 0) & (h <= 1))
    inside = rng.uniform(-1.0, 1.0, size=(m, 5))
    np.testing.assert_allclose(soft_histogram_pool(inside, spec).sum(axis=1), 1.0, atol=1e-12)
    doubled = soft_histogram_pool(np.concatenate([inside, inside]), spec)
    np.testing.assert_allclose(doubled, soft_histogram_pool(inside, spec), atol=1e-15)


def test_histogram_backward_matches_differences():
    rng = np.random.default_rng(3)
    spec = HistogramSpec(num_features=4)
    f = rng.uniform(-0.9, 0.9, size=(6, 4))
    w = rng.normal(size=(4, 5))
    res = check_gradients(lambda a: float((soft_histogram_pool(a["f"], spec) * w).sum()), {"f": f},
                          {"f": soft_histogram_pool_backward(f, spec, w)}, samples=24)
    assert res.checked > 0 and res.max_rel_error <= 1e-8


def test_set_pool_groups_rows():
    spec = HistogramSpec(num_features=3)
    pool = SetHistogramPool(spec)
    f = np.random.default_rng(4).uniform(-1, 1, size=(5, 3))
    out, _ = pool.forward(f, [0, 2, 5])
    assert out.shape == (2, 15)
    assert np.array_equal(out[1], soft_histogram_pool(f[2:], spec).ravel())


# ---------------------------------------------------------------- losses

def test_cross_entropy_uniform_and_saturated():
    for c in (2, 3, 7):
        loss, _ = softmax_cross_entropy(np.zeros((1, c)), [1])
        assert loss == pytest.approx(math.log(c), abs=1e-15)
    loss, grad = softmax_cross_entropy(np.array([[0.0, 1e6, 0.0]]), [1])
    assert loss == pytest.approx(0.0, abs=1e-12) and np.abs(grad).max() < 1e-12


def test_cross_entropy_matches_high_precision():
    mpmath.mp.dps = 50
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = rng.normal(scale=3, size=4)
        t = int(rng.integers(4))
        loss, grad = softmax_cross_entropy(z[None], [t])
        mz = [mpmath.mpf(float(v)) for v in z]
        lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in mz))
        assert abs(loss - float(lse - mz[t])) <= 1e-12
        ref = [float(mpmath.exp(v - lse)) - (1.0 if i == t else 0.0) for i, v in enumerate(mz)]
        np.testing.assert_allclose(grad[0], ref, atol=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 2)), [0, 1], weights=[1.0])


def test_weighted_cross_entropy_reduces_to_mean():
    z = np.random.default_rng(6).normal(size=(5, 3))
    t = np.array([0, 2, 1, 1, 0])
    a = softmax_cross_entropy(z, t)
    b = softmax_cross_entropy(z, t, weights=np.full(5, 2.0))
    assert a[0] == pytest.approx(b[0], abs=1e-15)
    np.testing.assert_allclose(a[1], b[1], atol=1e-15)


def test_sigmoid_is_stable_and_bce_gradient():
    assert sigmoid(np.array([-1000.0, 0.0, 1000.0])).tolist() == [0.0, 0.5, 1.0]
    z = np.random.default_rng(7).normal(size=6)
    t = np.array([0, 1, 1, 0, 0.5, 1.0])
    _, g = sigmoid_cross_entropy(z, t)
    res = check_gradients(lambda a: sigmoid_cross_entropy(a["z"], t)[0], {"z": z.copy()}, {"z": g})
    assert res.max_rel_error <= 1e-9


# ---------------------------------------------------------------- schedule and SGD

def test_schedule_values():
    assert PAPER_SCHEDULE.lr(0) == 1e-4
    assert TrainSchedule(1e-4, 10, 0.5).lr(25) == pytest.approx(2.5e-5, rel=1e-15)
    with pytest.raises(ValueError):
        TrainSchedule(decay_factor=1.0)
    with pytest.raises(ValueError):
        TrainSchedule(initial_lr=0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 5000), st.floats(0.01, 0.99), st.integers(1, 50))
def test_schedule_non_increasing(e1, e2, factor, every):
    s = TrainSchedule(1e-3, every, factor)
    lo, hi = sorted((e1, e2))
    assert s.lr(hi) <= s.lr(lo)


def test_sgd_step_behaviour():
    p = ParamSet({"a": np.ones(3)})
    same = sgd_step(p, {"a": np.zeros(3)}, PAPER_SCHEDULE, 0)
    assert same.equals(p)
    moved = sgd_step(p, {"a": np.ones(3)}, PAPER_SCHEDULE, 0)
    np.testing.assert_array_equal(moved["a"], 1 - 1e-4)
    assert np.array_equal(p["a"], np.ones(3))  # input untouched
    with pytest.raises(DivergenceError):
        sgd_step(p, {"a": np.array([0.0, np.nan, 0.0])}, PAPER_SCHEDULE, 0)


# ---------------------------------------------------------------- gradient checking

def test_grad_check_linear_quadratic_is_exact():
    net = Sequential(Dense(4, 3), name="lin")
    p = init_params(net, 0)
    res = grad_check(net, p, np.random.default_rng(0).normal(size=(5, 4)), mse)
    assert res.max_rel_error <= 1e-9 and not res.excluded


def test_grad_check_set_classifier():
    rng = np.random.default_rng(1)
    spec = HistogramSpec(num_features=6)
    enc = Sequential(Dense(4, 6), Tanh(), name="enc")
    head = Sequential(Dense(30, 5), ReLU(), Dense(5, 2), name="head")
    pool = SetHistogramPool(spec)
    params = init_params(enc, 2).merged(init_params(head, 2))
    x = rng.normal(size=(7, 4))
    offsets = [0, 3, 7]
    target = np.array([0, 1])

    def loss_of(arrs):
        p = ParamSet({k: v for k, v in arrs.items() if k != "x"})
        f, _ = enc.forward(p, arrs["x"])
        h, _ = pool.forward(f, offsets)
        return softmax_cross_entropy(head(p, h), target)[0]

    f, c1 = enc.forward(params, x)
    h, c2 = pool.forward(f, offsets)
    z, c3 = head.forward(params, h)
    _, dz = softmax_cross_entropy(z, target)
    dh, g = head.backward(params, c3, dz)
    dx, g2 = enc.backward(params, c1, pool.backward(c2, dh))
    arrays = {**{k: v.copy() for k, v in params.tensors.items()}, "x": x.copy()}
    res = check_gradients(loss_of, arrays, {**g, **g2, "x": dx}, samples=15)
    assert res.checked > 50 and res.max_rel_error <= 1e-4


def test_grad_check_excludes_relu_kink():
    net = Sequential(Dense(1, 1), ReLU(), name="k")
    p = ParamSet({"k.0.w": np.array([[1.0]]), "k.0.b": np.array([0.0])})
    res = grad_check(net, p, np.zeros((1, 1)), lambda y: (float(y.sum()), np.ones_like(y)))
    # pre-activation is exactly 0: every coordinate sits on the kink
    assert ("__input__", (0, 0)) in res.excluded
    assert res.max_rel_error == 0.0


# ---------------------------------------------------------------- training

def test_train_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(60, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x = x + np.where(y[:, None] == 1, 0.3, -0.3)
    net = Sequential(Dense(2, 8), ReLU(), Dense(8, 2), name="toy")
    params, curve = train(net, x, y, TrainSchedule(0.1, 50, 0.9, 200), seed=0, batch_size=10)
    assert len(curve) == 200 and curve[-1] < curve[0]
    assert (net(params, x).argmax(axis=1) == y).mean() == 1.0


def test_train_zero_epochs_and_determinism():
    net = Sequential(Dense(2, 2), name="z")
    x = np.random.default_rng(9).normal(size=(8, 2))
    y = np.array([0, 1] * 4)
    p0, curve = train(net, x, y, TrainSchedule(0.1, 10, 0.5, 0), seed=3)
    assert p0.equals(init_params(net, 3)) and curve == []
    s = TrainSchedule(0.1, 10, 0.5, 5)
    a = train(net, x, y, s, seed=4)
    b = train(net, x, y, s, seed=4)
    assert a[0].equals(b[0]) and a[1] == b[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_epoch():
    net = Sequential(Dense(1, 2), name="d")
    x = np.array([[1e200], [-1e200]])
    with pytest.raises((DivergenceError, ValueError)):
        train(net, x, np.array([0, 1]), TrainSchedule(1e10, 10, 0.5, 3), seed=0)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_and_errors(tmp_path):
    net = Sequential(Conv3x3(2, 3), name="c")
    p = init_params(net, 17)
    save_checkpoint(tmp_path / "c.npz", p, {"stage": "x"})
    q, meta = load_checkpoint(tmp_path / "c.npz")
    assert q.equals(p) and q.rng_seed == 17 and meta == {"stage": "x"}
    save_checkpoint(tmp_path / "d.npz", p, {"stage": "x"})
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "bad.npz").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", {"loss": [1.0, 0.5], "aux_loss": [0.25, 0.125]})
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines == ["epoch,aux_loss,loss", "0,0.25,1.0", "1,0.125,0.5"]
