import numpy as np
import pytest

from spot import tensor as T
from spot.errors import DivergenceError
from spot.optim import Adam, Sgd
from spot.rng import Rng


def scalar_reference_adam(g_seq, lr, beta1=0.5, beta2=0.999, eps=1e-8, x0=0.0):
    """Independent straight-line scalar Adam, written from the update equations."""
    x, m, v = x0, 0.0, 0.0
    xs = []
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        xs.append(x)
    return np.array(xs)


def test_zero_grad_leaves_params_unchanged():
    p = T.parameter(np.array([1.0, 2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_first_step_is_signed_lr():
    p = T.parameter(np.array([0.0]))
    opt = Adam([p], lr=0.01)
    p.grad = np.array([3.0])
    opt.step()
    # first step: m_hat = g, v_hat = g^2 => update = -lr*g/(|g|+eps) ~ -lr*sign(g)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-6)


def test_bias_correction_first_step_mhat_equals_g():
    p = T.parameter(np.array([0.0]))
    opt = Adam([p], lr=0.5)
    p.grad = np.array([0.125])
    opt.step()
    assert opt.m[0][0] / (1 - opt.beta1) == pytest.approx(0.125)


def test_hundred_step_trajectory_matches_reference():
    rng = Rng(31337)
    g_seq = rng.normal(100)
    p = T.parameter(np.array([0.0]))
    opt = Adam([p], lr=0.05)
    traj = []
    for g in g_seq:
        p.grad = np.array([g])
        opt.step()
        traj.append(p.data[0])
    ref = scalar_reference_adam(g_seq, lr=0.05)
    assert np.max(np.abs(np.array(traj) - ref)) < 1e-12


def test_ascend_zero_grad_noop():
    p = T.parameter(np.array([5.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.0])
    opt.ascend_step()
    assert p.data[0] == 5.0


def test_ascend_concave_quadratic_decreases_magnitude():
    # maximize f(x) = -x^2 from x=1: |x| decreases monotonically for small lr
    p = T.parameter(np.array([1.0]))
    opt = Adam([p], lr=0.01)
    prev = abs(p.data[0])
    for _ in range(50):
        p.grad = np.array([-2.0 * p.data[0]])  # grad of -x^2
        opt.ascend_step()
        cur = abs(p.data[0])
        assert cur < prev + 1e-15
        prev = cur


def test_ascend_equals_descend_on_negated_loss():
    rng = Rng(404)
    g_seq = rng.normal(40)
    pa = T.parameter(np.array([0.3]))
    pd = T.parameter(np.array([0.3]))
    oa, od = Adam([pa], lr=0.02), Adam([pd], lr=0.02)
    for g in g_seq:
        pa.grad = np.array([g])
        oa.ascend_step()
        pd.grad = np.array([-g])
        od.step()
        assert pa.data[0] == pd.data[0]  # bit-identical


def test_nonfinite_gradient_names_parameter():
    p = T.parameter(np.array([0.0]))
    opt = Adam([p], lr=0.1, names=["critic.w0"])
    p.grad = np.array([np.inf])
    with pytest.raises(DivergenceError, match="critic.w0"):
        opt.step()


def test_determinism_across_runs():
    def run():
        rng = Rng(7)
        p = T.parameter(np.array([1.0, -1.0]))
        opt = Adam([p], lr=0.03)
        for _ in range(25):
            p.grad = rng.normal(2)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_sgd_literal_updates():
    p = T.parameter(np.array([1.0]))
    opt = Sgd([p], lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.8)
    opt.ascend_step()
    assert p.data[0] == pytest.approx(1.0)


def test_state_roundtrip():
    p = T.parameter(np.array([1.0, 2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -0.5])
    opt.step()
    blocks = {k: v.copy() for k, v in opt.state_arrays("o").items()}
    opt2 = Adam([p], lr=0.1)
    opt2.load_state_arrays("o", blocks)
    assert opt2.t == opt.t
    assert np.array_equal(opt2.m[0], opt.m[0])
    assert np.array_equal(opt2.v[0], opt.v[0])
