"""Quantile regression tests: loss conventions, hand-checked and
finite-difference gradients, equivariance, training behavior, and
checkpoint round trips."""

import numpy as np
import pytest

from ccke.conformal import ContractViolationError
from ccke.quantile_net import (
    AttentionArch,
    FeedforwardArch,
    QuantileModel,
    TrainConfig,
    TrainingDivergedError,
    batch_loss,
    forward,
    init_model,
    load_checkpoint,
    pinball_gradient,
    pinball_loss,
    pinball_output_grad,
    save_checkpoint,
    train,
)
from ccke.quantile_net import _loss_and_grad


# ---------------------------------------------------------------------------
# pinball loss


def test_pinball_zero_residual():
    assert pinball_loss(3.0, 3.0, 0.4) == 0.0


def test_pinball_median_case():
    assert pinball_loss(2.0, 0.0, 0.5) == 1.0


def test_pinball_asymmetric_case():
    assert pinball_loss(-1.0, 0.0, 0.9) == pytest.approx(0.1)


def test_pinball_tau_out_of_range():
    with pytest.raises(ContractViolationError):
        pinball_loss(1.0, 0.0, 1.0)


def test_pinball_subgradient_convention():
    # residual positive: slope -tau; at the kink the tau side applies
    assert pinball_output_grad(1.0, 0.0, 0.5) == -0.5
    assert pinball_output_grad(0.0, 0.0, 0.3) == pytest.approx(-0.3)
    assert pinball_output_grad(-1.0, 0.0, 0.3) == pytest.approx(0.7)


# ---------------------------------------------------------------------------
# gradients


def _fd_gradient(model, x, y, eps=1e-5):
    g = np.zeros_like(model.params)
    for i in range(model.params.size):
        p0 = model.params[i]
        model.params[i] = p0 + eps
        lp, _ = _loss_and_grad(model, x, y)
        model.params[i] = p0 - eps
        lm, _ = _loss_and_grad(model, x, y)
        model.params[i] = p0
        g[i] = (lp - lm) / (2.0 * eps)
    return g


@pytest.mark.parametrize("arch,shape", [
    (FeedforwardArch(), (6, 2)),
    (AttentionArch(), (3, 2, 5)),
])
def test_gradient_matches_finite_differences(arch, shape):
    rng = np.random.default_rng(11)
    x = rng.uniform(-1.0, 1.0, shape)
    y = rng.uniform(-1.0, 1.0, (shape[0],) if arch.kind == "feedforward"
                    else (shape[0], shape[2]))
    model = init_model(arch, 0.2, seed=5)
    _, g = _loss_and_grad(model, x, y)
    g_fd = _fd_gradient(model, x, y)
    assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) <= 1e-4
    floor = 1e-3 * np.abs(g_fd).max()  # FD cancellation noise floor
    rel = np.abs(g - g_fd) / np.maximum(np.abs(g_fd), floor)
    assert rel.max() <= 1e-4


def test_pinball_gradient_empty_batch_rejected():
    model = init_model(FeedforwardArch(), 0.2, 0)
    with pytest.raises(ContractViolationError):
        pinball_gradient(model, (np.zeros((0, 2)), np.zeros(0)))


def test_gradient_is_summed_over_batch():
    rng = np.random.default_rng(3)
    model = init_model(FeedforwardArch(), 0.2, 1)
    x = rng.uniform(-1, 1, (4, 2))
    y = rng.uniform(-1, 1, 4)
    total = pinball_gradient(model, (x, y))
    parts = sum(pinball_gradient(model, (x[i:i + 1], y[i:i + 1])) for i in range(4))
    assert np.allclose(total, parts, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# forward pass structure


def test_permutation_equivariance():
    rng = np.random.default_rng(0)
    for k in (2, 8, 16, 32):
        for trial in range(100):
            model = init_model(AttentionArch(), 0.2, seed=1000 * k + trial)
            x = rng.uniform(-2.0, 2.0, (1, 2, k))
            perm = rng.permutation(k)
            lo, hi = model.predict(x)
            lo_p, hi_p = model.predict(x[:, :, perm])
            np.testing.assert_allclose(lo_p, lo[:, perm], rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(hi_p, hi[:, perm], rtol=1e-9, atol=1e-12)


def test_single_token_attention_is_mlp_composition():
    # softmax over one key is the constant 1, so the whole net collapses
    # to the two projection/MLP stacks applied to that token
    model = init_model(AttentionArch(), 0.2, seed=9)
    x = np.array([[[0.7], [-0.3]]])
    lo, hi = model.predict(x)

    def mlp(v, prefix, n_layers, views):
        for i in range(n_layers):
            v = views[f"{prefix}W{i}"] @ v + views[f"{prefix}b{i}"]
            if i != n_layers - 1:
                v = np.maximum(v, 0.0)
        return v

    views = model.views()
    token = x[0, :, 0] / np.asarray(model.arch.feature_scale)
    v = views["Wv"] @ token
    v = mlp(v, "m1", 3, views)
    v = views["Wv2"] @ v
    out = mlp(v, "m2", 3, views)
    np.testing.assert_allclose([lo[0, 0], hi[0, 0]], out, rtol=1e-12)


def test_zero_parameters_give_zero_output():
    arch = AttentionArch()
    model = init_model(arch, 0.2, 0)
    model.params[:] = 0.0
    lo, hi = model.predict(np.ones((2, 2, 4)))
    assert np.all(lo == 0.0) and np.all(hi == 0.0)


def test_forward_shape_mismatch():
    model = init_model(FeedforwardArch(), 0.2, 0)
    with pytest.raises(ContractViolationError):
        model.predict(np.zeros((3, 5)))


def test_forward_returns_interval_set():
    model = init_model(AttentionArch(), 0.2, 0)
    iv = forward(model, np.zeros((2, 6)))
    assert iv.kpi_count == 6


# ---------------------------------------------------------------------------
# training


def test_train_constant_target():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (256, 2))
    c = 4.0
    y = np.full(256, c)
    model = train((x, y), FeedforwardArch(), 0.2,
                  TrainConfig(epochs=150, seed=2))
    lo, hi = model.predict(x)
    assert np.all(np.abs(lo - c) <= 0.1 * abs(c) + 0.1)
    assert np.all(np.abs(hi - c) <= 0.1 * abs(c) + 0.1)


def test_train_uniform_noise_quantiles():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1.0, 1.0, (3000, 1))
    y = x[:, 0] + rng.uniform(-1.0, 1.0, 3000)
    arch = FeedforwardArch(widths=(1, 10, 10, 5, 2), feature_scale=(1.0,))
    model = train((x, y), arch, 0.2, TrainConfig(epochs=250, seed=3))
    grid = np.linspace(-0.9, 0.9, 13)[:, None]
    lo, hi = model.predict(grid)
    np.testing.assert_allclose(lo[:, 0], grid[:, 0] - 0.8, atol=0.15)
    np.testing.assert_allclose(hi[:, 0], grid[:, 0] + 0.8, atol=0.15)


def test_train_zero_epochs_returns_seeded_init():
    x = np.zeros((4, 2))
    y = np.zeros(4)
    model = train((x, y), FeedforwardArch(), 0.2, TrainConfig(epochs=0, seed=7))
    init = init_model(FeedforwardArch(), 0.2, 7)
    assert np.array_equal(model.params, init.params)


def test_train_deterministic_bit_identical():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (128, 2))
    y = rng.uniform(-1, 1, 128)
    cfg = TrainConfig(epochs=20, seed=5)
    a = train((x, y), FeedforwardArch(), 0.2, cfg)
    b = train((x, y), FeedforwardArch(), 0.2, cfg)
    assert np.array_equal(a.params, b.params)


def test_train_divergence_reports_epoch():
    # the piecewise-linear loss never overflows on its own, so drive the
    # non-finite guard with a corrupted target
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (64, 2))
    y = rng.uniform(-1, 1, 64)
    y[10] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        train((x, y), FeedforwardArch(), 0.2, TrainConfig(epochs=5, seed=6))
    assert err.value.epoch == 0


def test_final_loss_not_above_initial():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (256, 2))
    y = x[:, 0] + rng.uniform(-0.5, 0.5, 256)
    model = train((x, y), FeedforwardArch(), 0.2, TrainConfig(epochs=80, seed=7))
    assert model.loss_history[-1] <= model.loss_history[0]


def test_loss_improves_in_median_over_seeds():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (400, 1))
    y = x[:, 0] + rng.uniform(-1, 1, 400)
    arch = FeedforwardArch(widths=(1, 10, 10, 5, 2), feature_scale=(1.0,))
    initial, final = [], []
    for seed in range(10):
        model = train((x, y), arch, 0.2, TrainConfig(epochs=30, seed=seed))
        initial.append(model.loss_history[0])
        final.append(model.loss_history[-1])
    assert np.median(final) < np.median(initial)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("arch", [
    FeedforwardArch(feature_scale=(15.0, 10.0)),
    AttentionArch(feature_scale=(100.0, 15.0)),
])
def test_checkpoint_roundtrip_bit_exact(arch, tmp_path):
    model = init_model(arch, 0.1, seed=13)
    model.params[:] = np.random.default_rng(0).normal(size=model.params.size)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.params, model.params)
    assert loaded.alpha == model.alpha
    assert loaded.arch == model.arch
    x = (np.zeros((1, 2)) if arch.kind == "feedforward" else np.zeros((1, 2, 3)))
    np.testing.assert_array_equal(model.predict(x)[0], loaded.predict(x)[0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ContractViolationError):
        load_checkpoint(path)
