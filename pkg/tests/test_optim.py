import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dartser import optim
from dartser.cell import NetworkConfig
from dartser.models import HeadSpec, build_search_model
from dartser.optim import (
    SGD,
    Adam,
    AlphaOptConfig,
    SearchLoopConfig,
    SgdConfig,
    alpha_step,
    clip_grad_norm,
    cosine_lr,
    evaluate,
    search_epoch,
    sgd_step,
    unweighted_accuracy,
    weighted_accuracy,
)
from dartser.tensor import Tensor

import oracles


def leaf(values, grad=None):
    t = Tensor(np.asarray(values, np.float64), requires_grad=True, dtype=np.float64)
    if grad is not None:
        t.grad = np.asarray(grad, np.float64)
    return t


# -- schedule ----------------------------------------------------------------
def test_cosine_endpoints():
    cfg = SgdConfig(lr_max=0.025, lr_min=1e-3, total_epochs=300)
    assert cosine_lr(cfg, 0) == pytest.approx(0.025, abs=1e-15)
    assert cosine_lr(cfg, 300) == pytest.approx(1e-3, abs=1e-15)
    assert cosine_lr(cfg, 150) == pytest.approx((0.025 + 1e-3) / 2, abs=1e-15)
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(cfg, 301)


@given(st.integers(1, 500), st.floats(0, 1), st.floats(0, 1))
def test_cosine_is_non_increasing_and_matches_closed_form(total, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    cfg = SgdConfig(lr_max=hi, lr_min=lo, total_epochs=total)
    values = [cosine_lr(cfg, t) for t in range(total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert values[total // 3] == pytest.approx(oracles.cosine_lr(hi, lo, total // 3, total), abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(lr_max=0.1, lr_min=0.2)
    with pytest.raises(ValueError):
        SgdConfig(total_epochs=0)
    with pytest.raises(ValueError):
        AlphaOptConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AlphaOptConfig(lr=-1.0)
    with pytest.raises(ValueError):
        SearchLoopConfig(epochs=0)


# -- sgd ---------------------------------------------------------------------
def test_sgd_plain_step():
    p = leaf([1.0], [0.5])
    sgd_step([p], SgdConfig(momentum=0.0, weight_decay=0.0), [np.zeros(1)], 0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_grad_no_decay_is_noop():
    p = leaf([1.0, -2.0], [0.0, 0.0])
    sgd_step([p], SgdConfig(weight_decay=0.0), [np.zeros(2)], 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_momentum_two_steps():
    cfg = SgdConfig(momentum=0.9, weight_decay=0.0)
    p = leaf([1.0], [0.5])
    v = [np.zeros(1)]
    sgd_step([p], cfg, v, 0.1)
    sgd_step([p], cfg, v, 0.1)
    # v1 = 0.5, v2 = 0.9 * 0.5 + 0.5 = 0.95; p = 1 - 0.1 * (0.5 + 0.95)
    assert v[0][0] == pytest.approx(0.95, abs=1e-15)
    assert p.data[0] == pytest.approx(0.855, abs=1e-15)


def test_sgd_weight_decay_is_coupled():
    p = leaf([2.0], [0.0])
    sgd_step([p], SgdConfig(momentum=0.0, weight_decay=0.5), [np.zeros(1)], 0.1)
    assert p.data[0] == pytest.approx(1.9, abs=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_sgd_with_zero_lr_is_exact_noop(seed):
    rng = np.random.default_rng(seed)
    p = leaf(rng.standard_normal(5), rng.standard_normal(5))
    before = p.data.copy()
    opt = SGD([p], SgdConfig())
    opt.velocity[0][...] = rng.standard_normal(5)
    opt.lr = 0.0
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_sgd_rejects_non_finite_gradient():
    p = leaf([1.0], [np.nan])
    with pytest.raises(FloatingPointError, match="step aborted"):
        sgd_step([p], SgdConfig(), [np.zeros(1)], 0.1)
    assert p.data[0] == 1.0


# -- adam --------------------------------------------------------------------
def test_adam_zero_grad_without_decay_is_noop():
    p = leaf([0.3, -0.2], [0.0, 0.0])
    opt = Adam([p], AlphaOptConfig(weight_decay=0.0))
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.data, [0.3, -0.2])


def test_adam_matches_reference_recursion():
    cfg = AlphaOptConfig()
    grads = [0.4, -0.1, 0.25, 0.0, 1.5]
    p = leaf([0.7])
    opt = Adam([p], cfg)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    want = oracles.adam(grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, 0.7)
    assert p.data[0] == pytest.approx(want, abs=1e-15)


def test_adam_constant_gradient_step_tends_to_lr():
    cfg = AlphaOptConfig(lr=1e-2, weight_decay=0.0)
    p = leaf([0.0])
    opt = Adam([p], cfg)
    steps = []
    for _ in range(2000):
        before = p.data[0]
        p.grad = np.array([0.3])
        opt.step()
        steps.append(before - p.data[0])
    assert steps[-1] == pytest.approx(cfg.lr, rel=1e-6)


def test_adam_is_deterministic():
    def run():
        p = leaf([0.1, 0.2])
        opt = Adam([p], AlphaOptConfig())
        for g in ([1.0, -1.0], [0.5, 0.25]):
            p.grad = np.array(g)
            opt.step()
        return p.data
    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    p = leaf([1.0], [np.inf])
    with pytest.raises(FloatingPointError):
        alpha_step([p], AlphaOptConfig(), {"t": 0, "m": [np.zeros(1)], "v": [np.zeros(1)]})


# -- clipping ----------------------------------------------------------------
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_clip_bounds_global_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    params = [leaf(np.zeros(s), rng.standard_normal(s) * 10) for s in (3, 7)]
    before = clip_grad_norm(params, max_norm)
    after = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    assert after <= max_norm + 1e-6
    if before <= max_norm:
        assert after == pytest.approx(before)


# -- metrics -----------------------------------------------------------------
def test_accuracy_examples():
    y = np.array([0, 1, 2, 3] * 3)
    assert weighted_accuracy(y, y) == unweighted_accuracy(y, y) == 1.0
    zeros = np.zeros_like(y)
    assert weighted_accuracy(y, zeros) == unweighted_accuracy(y, zeros) == 0.25


def test_unweighted_accuracy_averages_recalls():
    y = np.array([0, 0, 0, 1])
    p = np.array([0, 0, 0, 0])
    assert weighted_accuracy(y, p) == 0.75
    assert unweighted_accuracy(y, p) == 0.5


# -- loops -------------------------------------------------------------------
def separable(n, rng, size=8):
    """Class k lights up quadrant k: linearly separable."""
    y = np.arange(n) % 4
    x = rng.standard_normal((n, 1, size, size)).astype(np.float32) * 0.3
    h = size // 2
    for i, k in enumerate(y):
        r, c = divmod(int(k), 2)
        x[i, 0, r * h:(r + 1) * h, c * h:(c + 1) * h] += 2.0
    return x, y


def tiny_search_model(seed):
    return build_search_model(NetworkConfig(cells=2, init_channels=2, nodes=1),
                              HeadSpec(lstm_units=8, dense_widths=(8,)), np.random.default_rng(seed), input_size=8)


def test_alpha_frozen_with_zero_lr():
    rng = np.random.default_rng(0)
    model = tiny_search_model(0)
    before = [a.data.copy() for a in model.alphas()]
    w_before = [p.data.copy() for p in model.parameters()]
    search_epoch(model, separable(16, rng), separable(8, rng), SGD(model.parameters(), SgdConfig()),
                 Adam(model.alphas(), AlphaOptConfig(lr=0.0)), rng, batch_size=8)
    assert all(np.array_equal(a.data, b) for a, b in zip(model.alphas(), before))
    assert any(not np.array_equal(p.data, b) for p, b in zip(model.parameters(), w_before))


def test_weights_frozen_alpha_moves():
    rng = np.random.default_rng(1)
    model = tiny_search_model(1)
    before = [a.data.copy() for a in model.alphas()]
    w_before = [p.data.copy() for p in model.parameters()]
    opt = SGD(model.parameters(), SgdConfig())
    opt.lr = 0.0
    search_epoch(model, separable(16, rng), separable(8, rng), opt,
                 Adam(model.alphas(), AlphaOptConfig(lr=1e-2)), rng, batch_size=8)
    assert all(np.array_equal(p.data, b) for p, b in zip(model.parameters(), w_before))
    assert any(not np.array_equal(a.data, b) for a, b in zip(model.alphas(), before))


def test_search_groups_see_only_their_own_split(monkeypatch):
    rng = np.random.default_rng(2)
    model = tiny_search_model(2)
    weight_opt = SGD(model.parameters(), SgdConfig())
    alpha_opt = Adam(model.alphas(), AlphaOptConfig())
    seen = []
    weight_step, alpha_step_ = weight_opt.step, alpha_opt.step

    def spy(own, other, inner, tag):
        def step():
            assert all(not np.any(p._grad) for p in other if p._grad is not None)
            assert any(p._grad is not None and np.any(p._grad) for p in own)
            seen.append(tag)
            inner()
        return step

    weight_opt.step = spy(weight_opt.params, alpha_opt.params, weight_step, "w")
    alpha_opt.step = spy(alpha_opt.params, weight_opt.params, alpha_step_, "a")
    search_epoch(model, separable(16, rng), separable(8, rng), weight_opt, alpha_opt, rng, batch_size=8)
    assert seen == ["a", "w", "a", "w"]


def test_search_loss_falls_on_separable_data():
    rng = np.random.default_rng(3)
    model = tiny_search_model(3)
    search, train = separable(32, rng), separable(16, rng)
    history = optim.run_search(model, search, train, SgdConfig(total_epochs=21), AlphaOptConfig(),
                               SearchLoopConfig(epochs=21, batch_size=8), rng)
    assert history[20]["search"]["loss"] < history[0]["search"]["loss"]


def test_evaluate_is_pure_and_restores_mode():
    rng = np.random.default_rng(4)
    model = tiny_search_model(4)
    data = separable(12, rng)
    before = [b.copy() for _, b in model.named_buffers()]
    a, b = evaluate(model, data), evaluate(model, data)
    assert a == b
    assert model.training
    assert all(np.array_equal(x, y) for x, (_, y) in zip(before, model.named_buffers()))


def test_empty_inputs_rejected():
    model = tiny_search_model(5)
    empty = (np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, empty)
    with pytest.raises(ValueError, match="empty"):
        optim.train_epoch(model, empty, SGD(model.parameters(), SgdConfig()), rng)
    with pytest.raises(ValueError, match="non-empty"):
        search_epoch(model, empty, separable(4, rng), SGD(model.parameters(), SgdConfig()),
                     Adam(model.alphas(), AlphaOptConfig()), rng)
