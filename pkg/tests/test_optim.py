import numpy as np
import pytest

from neuroprog.optim import Adam, Lookahead, OptimConfigError, adam_lookahead, adam_lookahead_step
from neuroprog.tensor import Tensor


def test_first_adam_step_is_lr():
    p = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], 0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.9, abs=1e-6)


def test_adam_matches_hand_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], 0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_lookahead_syncs_every_k():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True, dtype=np.float64)
    start = p.data.copy()
    opt = Lookahead(Adam([p], 0.1), k=6, alpha=0.05)
    for step in range(1, 13):
        p.grad = np.array([1.0, 1.0])
        opt.step()
        if step % 6:
            assert not np.array_equal(p.data, opt.state.slow[0])
        else:
            np.testing.assert_array_equal(p.data, opt.state.slow[0])
    # slow moved by alpha of the fast excursion
    assert np.all(p.data < start) and np.all(start - p.data < 0.2)


def test_lookahead_blend_value():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = Lookahead(Adam([p], 0.1), k=6, alpha=0.05)
    fast = []
    for _ in range(6):
        p.grad = np.array([1.0])
        opt.inner.step()
        fast.append(p.data[0])
    p.data = np.array([0.0])
    opt2 = Lookahead(Adam([p], 0.1), k=6, alpha=0.05)
    for _ in range(6):
        p.grad = np.array([1.0])
        opt2.step()
    assert p.data[0] == pytest.approx(0.05 * fast[-1])


def test_per_param_rates():
    a = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    b = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = adam_lookahead([("x.w1", a), ("x.w2", b)], lambda n: 1e-4 if n.endswith("w2") else 1e-3)
    adam_lookahead_step([a, b], [np.array([1.0]), np.array([1.0])], opt)
    assert a.data[0] == pytest.approx(-1e-3, rel=1e-4)
    assert b.data[0] == pytest.approx(-1e-4, rel=1e-4)


def test_moment_shapes_follow_params():
    ps = [Tensor(np.zeros(s), requires_grad=True) for s in [(2, 3), (4,), (1, 1, 3, 3)]]
    opt = Adam(ps, 1e-3)
    assert [m.shape for m in opt.state.m] == [p.shape for p in ps]
    assert [v.shape for v in opt.state.v] == [p.shape for p in ps]


def test_bad_config():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(OptimConfigError):
        Adam([p], -1.0)
    with pytest.raises(OptimConfigError):
        Adam([p], [1e-3, 1e-3])
    with pytest.raises(OptimConfigError):
        Lookahead(Adam([p], 1e-3), k=0)
    with pytest.raises(OptimConfigError):
        Lookahead(Adam([p], 1e-3), alpha=1.5)
