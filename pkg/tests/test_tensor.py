import numpy as np
import pytest

from dubcl import tensor as T
from dubcl.optim import AdamW, AdamWState, LrSchedule, OptimError, adamw_step, lr_at
from dubcl.oracles import finite_difference_grad


def test_sum_of_squares_gradient():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_logsumexp_symmetry():
    x = T.Tensor([0.0, 0.0], requires_grad=True)
    T.logsumexp(x, axis=0).backward()
    np.testing.assert_allclose(x.grad, [0.5, 0.5], atol=1e-15)


def test_grad_accumulation_is_additive():
    x = T.Tensor([1.0, -2.0], requires_grad=True)
    out = (x * x).sum()
    out.backward()
    first = x.grad.copy()
    out.backward()
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_backward_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_intermediate_buffers_released():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    mid = x * x
    out = mid.sum()
    out.backward()
    assert mid.grad is None
    assert out.grad is None
    assert x.grad is not None


def test_backprop_returns_leaf_map():
    x = T.Tensor([3.0], requires_grad=True)
    y = T.Tensor([4.0], requires_grad=True)
    grads = T.backprop((x * y).sum())
    assert set(grads) == {x, y}
    np.testing.assert_array_equal(grads[x], [4.0])
    np.testing.assert_array_equal(grads[y], [3.0])


def _fd_check(build, x0, rel_tol=1e-6, h=1e-4):
    """Compare autodiff gradient of build(Tensor) against central differences."""
    xt = T.Tensor(x0, requires_grad=True)
    build(xt).backward()
    analytic = xt.grad.copy()

    numeric = finite_difference_grad(lambda a: float(build(T.Tensor(a)).data), x0.copy(), h=h)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > 1e-8
    rel = np.abs(analytic - numeric)[mask] / scale[mask]
    assert rel.max() < rel_tol, f"max rel err {rel.max():.3e}"


def test_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = rng.standard_normal((6, 5))
    w2 = rng.standard_normal((5, 4))
    w3 = rng.standard_normal((4, 1))
    inp = rng.standard_normal((3, 6))

    def run(wflat, which):
        ws = [T.Tensor(w) for w in (w1, w2, w3)]
        ws[which] = wflat.reshape(ws[which].shape)
        h = T.Tensor(inp) @ ws[0]
        h = h.relu() @ ws[1]
        h = h.relu() @ ws[2]
        return (h * h).sum()

    for which, w in enumerate((w1, w2, w3)):
        _fd_check(lambda t, k=which: run(t, k), w.copy())


def test_mixed_primitive_composition_fd():
    rng = np.random.default_rng(11)
    x0 = rng.uniform(0.5, 2.0, size=(4, 6))

    def build(x):
        a = x.reshape(2, 12)
        b = T.concatenate([a, a * 2.0], axis=0)
        c = b[1:3, 2:10]
        d = (c.exp().sum(axis=1) + 1.0).log()
        return (d.mean() + T.logsumexp(x.reshape(24), axis=0)).sum()

    _fd_check(build, x0)


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 7, 8, 3))
    w0 = rng.standard_normal((4, 3, 3, 3))

    def build_x(x):
        return (T.conv2d(x, T.Tensor(w0), stride=2, padding=1) * 1.5).sum()

    def build_w(w):
        return (T.conv2d(T.Tensor(x0), w, stride=2, padding=1) * 0.5).sum()

    _fd_check(build_x, x0.copy(), rel_tol=1e-5)
    _fd_check(build_w, w0.copy(), rel_tol=1e-5)


def test_l2_normalize_triangle():
    out = T.l2_normalize(T.Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_idempotent():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.standard_normal((6, 4)))
    once = T.l2_normalize(x).data
    twice = T.l2_normalize(T.Tensor(once)).data
    np.testing.assert_allclose(twice, once, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)


def test_l2_normalize_gradient_fd():
    x0 = np.array([[1.0, 2.0]])
    _fd_check(lambda x: T.l2_normalize(x).sum(), x0.copy())


def test_l2_normalize_degenerate_fallback():
    T.reset_normalize_fallback_count()
    x = T.Tensor([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]], requires_grad=True)
    out = T.l2_normalize(x)
    np.testing.assert_allclose(out.data[0], [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.data[1], [0.6, 0.0, 0.8], atol=1e-15)
    assert T.normalize_fallback_count() == 1
    out.sum().backward()
    np.testing.assert_array_equal(x.grad[0], 0.0)  # fallback row gets no gradient


def test_cycle_detection():
    x = T.Tensor([1.0], requires_grad=True)
    y = x * 2.0
    y._prev = (y,)  # force a self-loop
    with pytest.raises(RuntimeError, match="cycle"):
        y.sum().backward()


# -- optimizer ----------------------------------------------------------------


def test_adamw_zero_grad_no_motion():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamWState(weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step_count == 1


def test_adamw_first_step_is_signed_lr():
    p = {"w": np.array([1.0])}
    state = AdamWState(weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, state, lr=0.1)
    np.testing.assert_allclose(p["w"], [0.9], atol=1e-8)


def test_adamw_decay_only_closed_form():
    p = {"w": np.array([1.0])}
    state = AdamWState(weight_decay=5e-2)
    adamw_step(p, {"w": np.array([0.0])}, state, lr=3e-4)
    np.testing.assert_allclose(p["w"], [1.0 - 3e-4 * 5e-2], rtol=0, atol=1e-15)


def test_adamw_rejects_nonfinite_gradient():
    p = {"w": np.array([1.0])}
    state = AdamWState()
    with pytest.raises(OptimError, match="'w'"):
        adamw_step(p, {"w": np.array([np.nan])}, state, lr=0.1)
    assert state.step_count == 0
    np.testing.assert_array_equal(p["w"], [1.0])


def test_adamw_with_zero_decay_matches_adam_reference():
    rng = np.random.default_rng(9)
    w = rng.standard_normal(8)
    p = {"w": w.copy()}
    state = AdamWState(weight_decay=0.0)

    # textbook Adam, updated independently
    ref = w.copy()
    m = np.zeros(8)
    v = np.zeros(8)
    for t in range(1, 21):
        g = np.sin(ref) + 0.1 * rng.standard_normal(8)
        adamw_step(p, {"w": g}, state, lr=1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.abs(p["w"] - ref).max() < 1e-12


def test_adamw_tensor_wrapper_roundtrip():
    x = T.Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW({"x": x}, lr=0.05, weight_decay=0.0)
    for _ in range(5):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert np.abs(x.data).max() < 2.0


# -- schedule -----------------------------------------------------------------


def test_lr_schedule_endpoints_and_midpoint():
    sched = LrSchedule(warmup_steps=10, total_steps=110, peak_lr=3e-4, floor_lr=0.0)
    assert lr_at(sched, 10) == pytest.approx(3e-4)
    assert lr_at(sched, 110) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(sched, 60) == pytest.approx(1.5e-4)
    assert lr_at(sched, 0) == pytest.approx(3e-5)


def test_lr_monotone_after_warmup():
    sched = LrSchedule(warmup_steps=5, total_steps=50, peak_lr=1e-3, floor_lr=1e-5)
    vals = [lr_at(sched, s) for s in range(5, 51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1e-5)


def test_lr_out_of_range_rejected():
    sched = LrSchedule(warmup_steps=2, total_steps=10, peak_lr=1.0)
    with pytest.raises(ValueError):
        lr_at(sched, 11)
    with pytest.raises(ValueError):
        lr_at(sched, -1)
