import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutlearn import diff as D
from layoutlearn.losses import (
    DegenerateTimestepError,
    LossWeights,
    MockGuidance,
    NoiseSchedule,
    acc_loss,
    empty_loss,
    mock_denoise,
    recon_loss,
    sds_pixel_gradient,
    soft_binarize,
)

SCHED = NoiseSchedule()


@given(st.floats(0, 1))
def test_schedule_variance_preserving(t):
    a, s = SCHED.alpha(t), SCHED.sigma(t)
    assert abs(a * a + s * s - 1) < 1e-15
    assert SCHED.weight(t) == s * s


def test_sample_t_range():
    rng = np.random.default_rng(0)
    ts = [SCHED.sample_t(rng) for _ in range(5000)]
    assert min(ts) >= 0.02 and max(ts) <= 0.98


@given(st.floats(0.02, 0.98), st.integers(0, 2**31))
def test_mock_inverts_forward_process(t, seed):
    rng = np.random.default_rng(seed)
    target = rng.random((4, 5, 3))
    eps = rng.standard_normal(target.shape)
    z = SCHED.alpha(t) * target + SCHED.sigma(t) * eps
    np.testing.assert_allclose(mock_denoise(z, t, target), eps, atol=1e-12)


def test_mock_degenerate_timestep():
    with pytest.raises(DegenerateTimestepError):
        mock_denoise(np.zeros((2, 2, 3)), 0.0, np.zeros((2, 2, 3)))


def test_mock_cfg_blend_symbolic():
    # eps_c - eps = 0 at the target, eps_u - eps = alpha/sigma (x* - u); cfg pushes away from the mean colour
    rng = np.random.default_rng(1)
    target = rng.random((3, 3, 3))
    t = 0.5
    a, s = SCHED.alpha(t), SCHED.sigma(t)
    eps = rng.standard_normal(target.shape)
    z = a * target + s * eps
    u = target.reshape(-1, 3).mean(axis=0)
    for cfg in (0.0, 1.0, 7.5, 100.0):
        out = mock_denoise(z, t, target, cfg=cfg)
        np.testing.assert_allclose(out - eps, cfg * a / s * (u - target), atol=1e-9 * max(1, cfg))


def test_sds_fixed_point_exact():
    rng = np.random.default_rng(0)
    x = rng.random((8, 8, 3))
    provider = MockGuidance(x)
    for _ in range(100):
        g, _ = sds_pixel_gradient(x, x, provider, SCHED, rng)
        assert np.all(g == 0.0)


def test_sds_matches_closed_form():
    rng = np.random.default_rng(1)
    target = rng.random((8, 8, 3))
    provider = MockGuidance(target)
    for _ in range(100):
        x = rng.random((8, 8, 3))
        state = rng.bit_generator.state
        g, t = sds_pixel_gradient(x, target, provider, SCHED, rng)
        expect = np.sin(np.pi * t / 2) * np.cos(np.pi * t / 2) * (x - target)
        assert np.max(np.abs(g - expect)) <= 1e-12
        # t is drawn before eps
        rng2 = np.random.default_rng()
        rng2.bit_generator.state = state
        assert rng2.uniform(0.02, 0.98) == t


def test_sds_shape_contract():
    class Bad:
        def denoise(self, z, t, prompt, cfg):
            return np.zeros((2, 2, 3))

    with pytest.raises(D.ContractError):
        sds_pixel_gradient(np.zeros((3, 3, 3)), None, Bad(), SCHED, np.random.default_rng(0))


def test_sds_descent_reduces_mse():
    rng = np.random.default_rng(3)
    target = rng.random((6, 6, 3))
    x = rng.random((6, 6, 3))
    provider = MockGuidance(target)
    errs = [np.mean((x - target) ** 2)]
    for _ in range(20):
        g, _ = sds_pixel_gradient(x, target, provider, SCHED, rng)
        x = x - 0.5 * g
        errs.append(np.mean((x - target) ** 2))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def occupied(frac, size=100):
    m = np.zeros((size, size))
    m.flat[: int(round(frac * size * size))] = 1.0
    return m


def ev(x):
    return float(np.asarray(D.value_of(x)))


def test_empty_loss_cases():
    assert ev(empty_loss(np.zeros((64, 64)))) == pytest.approx(0.1, abs=1e-12)
    assert ev(empty_loss(occupied(0.25))) == 0.0
    assert abs(ev(empty_loss(occupied(0.07))) - 0.03) <= 1e-6
    assert ev(empty_loss(np.ones((64, 64)))) == pytest.approx(0.1, abs=1e-12)


@given(st.integers(0, 99), st.integers(0, 99), st.floats(0.0, 0.3))
def test_empty_loss_translation_invariant(dx, dy, frac):
    m = occupied(frac)
    a = ev(empty_loss(m))
    b = ev(empty_loss(np.roll(m, (dx, dy), axis=(0, 1))))
    assert abs(a - b) <= 1e-12
    assert 0.0 <= a <= 0.1


def test_soft_binarize_range_and_batch():
    rng = np.random.default_rng(0)
    a = rng.random((3, 10, 10))
    b = np.asarray(D.value_of(soft_binarize(a)))
    assert b.shape == a.shape and b.min() >= 0 and b.max() < 1
    for i in range(3):
        assert b[i].min() == 0.0
    losses = np.asarray(D.value_of(empty_loss(a)))
    assert losses.shape == (3,)


def test_empty_loss_gradient_pushes_coverage_up():
    tape = D.Tape()
    alpha = np.full((10, 10), 0.4)
    alpha[0, :5] = 0.9
    v = tape.leaf(alpha)
    g = D.backward(tape, empty_loss(v))[v.index]
    # raising the near-threshold pixels lowers the loss
    assert np.all(g[1:] <= 0) and g[1:].min() < 0


def test_acc_and_recon_examples():
    assert ev(acc_loss(np.full((4, 4), 0.5))) == pytest.approx(0.01 * 0.25)
    assert ev(acc_loss(np.array([[0.0, 1.0]]))) == 0.0
    rgb = np.zeros((2, 2, 3))
    tgt = np.full((2, 2, 3), 0.5)
    assert ev(recon_loss(rgb, tgt)) == pytest.approx(0.05 * 0.25)
    assert ev(recon_loss(rgb, tgt, weight=1.0)) == pytest.approx(0.25)
    with pytest.raises(D.ContractError):
        recon_loss(rgb, np.zeros((2, 3, 3)))


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(empty=-1)


def test_mock_score_is_cosine():
    a = np.ones((2, 2, 3))
    assert MockGuidance(a).score(a, a) == pytest.approx(100.0)
    assert MockGuidance(a).score(a, -a) == pytest.approx(-100.0)
