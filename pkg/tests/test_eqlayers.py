import numpy as np
import pytest

from roteq import eqlayers
from roteq.conv import ConvGeometry, correlate2d
from roteq.eqlayers import (
    CycleParams,
    DecycleParams,
    GroupBatchNorm,
    IsotonicParams,
    expand_cycle,
    expand_decycle,
    expand_isotonic,
    forward_cycle,
    forward_decycle,
    forward_isotonic,
    global_spatial_avg_pool,
    group_cross_channel_pool,
    shared_bias_add,
    tied_backward_cycle,
    tied_backward_decycle,
    tied_backward_isotonic,
)
from roteq.tensor import GroupLayout, cyclic_permute, layout_for, rotate90, rotate_kernels90

from reference import max_rel, naive_correlate2d


def R(t, k=1):
    return rotate90(t, k)


def P(t, k=1):
    return cyclic_permute(t, layout_for(t.shape[1]), k)


# ---------------------------------------------------------------------------
# expansion


def test_expand_cycle_fixed_1x1():
    p = CycleParams(np.full((1, 1, 1, 1), 5.0))
    w = expand_cycle(p)
    assert w.shape == (4, 1, 1, 1)
    np.testing.assert_array_equal(w.ravel(), [5.0, 5.0, 5.0, 5.0])


def test_expand_cycle_delta_corners():
    base = np.zeros((1, 1, 3, 3))
    base[0, 0, 0, 0] = 1.0  # top-left delta
    w = expand_cycle(CycleParams(base))
    corners = [(0, 0), (2, 0), (2, 2), (0, 2)]  # CCW path of the top-left corner
    for i, (r, c) in enumerate(corners):
        assert w[i, 0, r, c] == 1.0
        assert w[i].sum() == 1.0


def test_expand_cycle_rows_are_successive_rotations(rng):
    p = CycleParams(rng.standard_normal((3, 2, 3, 3)))
    w = expand_cycle(p).reshape(3, 4, 2, 3, 3)
    for i in range(1, 4):
        np.testing.assert_array_equal(w[:, i], rotate_kernels90(w[:, i - 1], 1))


def test_expand_isotonic_symmetric_base_all_equal(rng):
    base = np.broadcast_to(rng.standard_normal((1, 1, 1, 1, 1)), (1, 4, 1, 1, 1)).copy()
    w = expand_isotonic(IsotonicParams(base))
    assert w.shape == (4, 4, 1, 1)
    assert np.all(w == base[0, 0, 0, 0, 0])


def test_expand_isotonic_generator_layout(rng):
    # row 0 of each group block is [A, B, C, D] unrotated
    p = IsotonicParams(rng.standard_normal((2, 4, 3, 3, 3)))
    w = expand_isotonic(p).reshape(2, 4, 3, 4, 3, 3)
    for a in range(2):
        for b in range(3):
            for m in range(4):
                np.testing.assert_array_equal(w[a, 0, b, m], p.base[a, m, b])


def test_expand_isotonic_fixed_point_bit_exact(rng):
    p = IsotonicParams(rng.standard_normal((1, 4, 1, 3, 3)))
    w = expand_isotonic(p).reshape(1, 4, 1, 4, 3, 3)
    # shift both cyclic indices by one, rotate every entry once
    drw = np.empty_like(w)
    for j in range(4):
        for i in range(4):
            drw[:, j, :, i] = np.rot90(w[:, (j - 1) % 4, :, (i - 1) % 4], 1, axes=(-2, -1))
    np.testing.assert_array_equal(w, drw)


def test_isotonic_parameter_count_quarter():
    p = IsotonicParams(np.zeros((1, 4, 1, 3, 3)))
    assert p.base.size == 36
    assert expand_isotonic(p).size == 144
    assert p.base.size * 4 == expand_isotonic(p).size


def test_expand_decycle_mean_pooling_base(rng):
    p = DecycleParams(np.full((1, 1, 1, 1), 0.25))
    x = rng.standard_normal((2, 4, 5, 5))
    np.testing.assert_allclose(
        forward_decycle(p, x),
        group_cross_channel_pool(x, GroupLayout(1), "mean"),
        rtol=1e-15,
        atol=1e-15,
    )


def test_expand_decycle_columns_are_successive_rotations(rng):
    p = DecycleParams(rng.standard_normal((3, 2, 3, 3)))
    w = expand_decycle(p).reshape(3, 2, 4, 3, 3)
    for j in range(1, 4):
        np.testing.assert_array_equal(
            w[:, :, j], np.rot90(w[:, :, j - 1], 1, axes=(-2, -1))
        )


def test_expand_decycle_delta_base_hand_expanded(rng):
    base = np.zeros((1, 1, 3, 3))
    base[0, 0, 0, 1] = 1.0
    p = DecycleParams(base)
    x = rng.standard_normal((1, 4, 6, 6))
    want = np.zeros((1, 1, 4, 4))
    for j in range(4):
        rotated = np.rot90(base[0, 0], j)
        want += naive_correlate2d(x[:, j : j + 1], rotated.reshape(1, 1, 3, 3))
    np.testing.assert_allclose(forward_decycle(p, x), want, rtol=1e-13, atol=1e-13)


# ---------------------------------------------------------------------------
# layer identities


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_cycle_identity(rng, kernel, dtype, tol):
    for _ in range(10):
        g = int(rng.integers(1, 4))
        size = int(rng.integers(max(4, kernel), 13))
        x = rng.standard_normal((2, 2, size, size)).astype(dtype)
        p = CycleParams(rng.standard_normal((g, 2, kernel, kernel)).astype(dtype))
        lhs = forward_cycle(p, R(x))
        rhs = R(P(forward_cycle(p, x)))
        assert max_rel(lhs, rhs) <= tol


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_isotonic_identity(rng, kernel, dtype, tol):
    for _ in range(10):
        g_in, g_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        size = int(rng.integers(max(4, kernel), 13))
        x = rng.standard_normal((2, 4 * g_in, size, size)).astype(dtype)
        p = IsotonicParams(rng.standard_normal((g_out, 4, g_in, kernel, kernel)).astype(dtype))
        lhs = forward_isotonic(p, R(P(x)))
        rhs = R(P(forward_isotonic(p, x)))
        assert max_rel(lhs, rhs) <= tol


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_decycle_identity(rng, kernel, dtype, tol):
    for _ in range(10):
        g_in = int(rng.integers(1, 4))
        size = int(rng.integers(max(4, kernel), 13))
        x = rng.standard_normal((2, 4 * g_in, size, size)).astype(dtype)
        p = DecycleParams(rng.standard_normal((5, g_in, kernel, kernel)).astype(dtype))
        lhs = forward_decycle(p, R(P(x)))
        rhs = R(forward_decycle(p, x))
        assert max_rel(lhs, rhs) <= tol


def test_composition_identity_with_interleaved_layers(rng):
    # cycle -> k isotonic -> decycle with relu/shared bias/eval batchnorm between
    for k_iso in range(4):
        g = 2
        x = rng.standard_normal((2, 1, 9, 9))
        p_c = CycleParams(rng.standard_normal((g, 1, 3, 3)))
        isos = [IsotonicParams(rng.standard_normal((g, 4, g, 3, 3))) for _ in range(k_iso)]
        p_d = DecycleParams(rng.standard_normal((3, g, 1, 1)))
        bias = rng.standard_normal(g)
        bn = GroupBatchNorm(g)
        bp = {"gamma": rng.standard_normal(g), "beta": rng.standard_normal(g)}
        bs = {"mean": rng.standard_normal(g), "var": rng.uniform(0.5, 2.0, g)}
        lay = GroupLayout(g)

        def f(inp):
            h = forward_cycle(p_c, inp)
            h = shared_bias_add(h, lay, bias)
            h = np.maximum(h, 0)
            for pi in isos:
                h = forward_isotonic(pi, h)
                h, _, _ = bn.forward(h, bp, bs, train=False)
                h = np.maximum(h, 0)
            return forward_decycle(p_d, h)

        assert max_rel(f(R(x)), R(f(x))) <= 1e-12


def test_forward_uses_correlation_of_expansion(rng):
    x = rng.standard_normal((1, 8, 7, 7))
    p = IsotonicParams(rng.standard_normal((2, 4, 2, 3, 3)))
    np.testing.assert_array_equal(forward_isotonic(p, x), correlate2d(x, expand_isotonic(p)))


def test_kernel_must_be_square():
    with pytest.raises(ValueError, match="square"):
        CycleParams(np.zeros((1, 1, 2, 3)))
    with pytest.raises(ValueError, match="square"):
        IsotonicParams(np.zeros((1, 4, 1, 3, 2)))
    with pytest.raises(ValueError):
        DecycleParams(np.zeros((1, 1, 3)))


# ---------------------------------------------------------------------------
# tied gradients


def test_tied_backward_zero_grad(rng):
    x = rng.standard_normal((1, 4, 6, 6))
    p = IsotonicParams(rng.standard_normal((1, 4, 1, 3, 3)))
    y = forward_isotonic(p, x)
    gx, gb = tied_backward_isotonic(p, x, np.zeros_like(y))
    assert not gx.any() and not gb.any()


def test_tied_backward_cycle_1x1_sums_channels(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    p = CycleParams(rng.standard_normal((2, 3, 1, 1)))
    g = rng.standard_normal((2, 8, 5, 5))
    _, gb = tied_backward_cycle(p, x, g)
    # 1x1 kernels are rotation-fixed: base grad is the plain sum of the
    # four expanded channel gradients
    from roteq.conv import correlate2d_backward

    _, gw = correlate2d_backward(g, x, expand_cycle(p))
    np.testing.assert_allclose(gb, gw.reshape(2, 4, 3, 1, 1).sum(axis=1), rtol=1e-12)


@pytest.mark.parametrize("kind", ["cycle", "isotonic", "decycle"])
def test_tied_backward_matches_finite_differences(rng, kind):
    x = rng.standard_normal((2, 4, 6, 6))
    if kind == "cycle":
        p = CycleParams(rng.standard_normal((2, 4, 3, 3)))
        fwd = lambda b: forward_cycle(CycleParams(b), x)
        bwd = lambda g: tied_backward_cycle(p, x, g)
    elif kind == "isotonic":
        p = IsotonicParams(rng.standard_normal((2, 4, 1, 3, 3)))
        fwd = lambda b: forward_isotonic(IsotonicParams(b), x)
        bwd = lambda g: tied_backward_isotonic(p, x, g)
    else:
        p = DecycleParams(rng.standard_normal((3, 1, 3, 3)))
        fwd = lambda b: forward_decycle(DecycleParams(b), x)
        bwd = lambda g: tied_backward_decycle(p, x, g)

    y = fwd(p.base)
    g = rng.standard_normal(y.shape)
    _, gb = bwd(g)
    eps = 1e-5
    flat = p.base.reshape(-1)
    for j in rng.choice(flat.size, size=12, replace=False):
        orig = flat[j]
        flat[j] = orig + eps
        hi = float((fwd(p.base) * g).sum())
        flat[j] = orig - eps
        lo = float((fwd(p.base) * g).sum())
        flat[j] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - gb.reshape(-1)[j]) / max(abs(fd) + abs(gb.reshape(-1)[j]), 1e-8) < 1e-6


def test_tied_backward_grad_x_adjoint(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    p = DecycleParams(rng.standard_normal((3, 1, 3, 3)))
    y = forward_decycle(p, x)
    g = rng.standard_normal(y.shape)
    gx, _ = tied_backward_decycle(p, x, g)
    assert abs(np.vdot(y, g) - np.vdot(x, gx)) / abs(np.vdot(y, g)) < 1e-10


# ---------------------------------------------------------------------------
# pooling, bias, batch norm


def test_group_pool_values():
    x = np.arange(1, 5, dtype=float).reshape(1, 4, 1, 1)
    lay = GroupLayout(1)
    assert group_cross_channel_pool(x, lay, "mean").ravel()[0] == 2.5
    assert group_cross_channel_pool(x, lay, "max").ravel()[0] == 4.0
    with pytest.raises(ValueError):
        group_cross_channel_pool(x, lay, "median")


def test_group_pool_permutation_invariant(rng):
    x = rng.standard_normal((2, 8, 4, 4))
    lay = layout_for(8)
    np.testing.assert_array_equal(
        group_cross_channel_pool(P(x), lay, "max"), group_cross_channel_pool(x, lay, "max")
    )
    # mean sums the permuted channels in a different order: equal to the ulp
    np.testing.assert_allclose(
        group_cross_channel_pool(P(x), lay, "mean"),
        group_cross_channel_pool(x, lay, "mean"),
        rtol=1e-15,
        atol=1e-15,
    )


@pytest.mark.parametrize("mode", ["max", "mean"])
def test_group_pool_decycle_style_identity(rng, mode):
    x = rng.standard_normal((2, 8, 5, 5))
    lay = layout_for(8)
    lhs = group_cross_channel_pool(R(P(x)), lay, mode)
    rhs = R(group_cross_channel_pool(x, lay, mode))
    assert max_rel(lhs, rhs) < 1e-15


def test_global_pool_constant_and_invariance(rng):
    const = np.full((2, 3, 4, 4), 1.75)
    np.testing.assert_array_equal(global_spatial_avg_pool(const), np.full((2, 3, 1, 1), 1.75))
    x = rng.standard_normal((2, 3, 5, 5))
    np.testing.assert_allclose(
        global_spatial_avg_pool(rotate90(x)), global_spatial_avg_pool(x), rtol=1e-13
    )


def test_full_stack_logit_invariance(rng):
    # random weights, full stack ending in global pooling: logits match under R
    x = rng.standard_normal((3, 1, 9, 9))
    p_c = CycleParams(rng.standard_normal((2, 1, 3, 3)))
    p_i = IsotonicParams(rng.standard_normal((2, 4, 2, 3, 3)))
    p_d = DecycleParams(rng.standard_normal((7, 2, 3, 3)))

    def logits(inp):
        h = np.maximum(forward_cycle(p_c, inp), 0)
        h = np.maximum(forward_isotonic(p_i, h), 0)
        return global_spatial_avg_pool(forward_decycle(p_d, h))[:, :, 0, 0]

    base = logits(x)
    for k in range(4):
        lk = logits(rotate90(x, k))
        assert max_rel(base, lk) < 1e-12
        np.testing.assert_array_equal(np.argmax(lk, 1), np.argmax(base, 1))


def test_shared_bias(rng):
    x = rng.standard_normal((2, 8, 3, 3))
    lay = layout_for(8)
    np.testing.assert_array_equal(shared_bias_add(x, lay, np.zeros(2)), x)
    bias = rng.standard_normal(2)
    np.testing.assert_array_equal(
        shared_bias_add(P(x), lay, bias), P(shared_bias_add(x, lay, bias))
    )
    with pytest.raises(ValueError):
        shared_bias_add(x, lay, np.zeros(3))


def test_isotonic_identity_with_bias(rng):
    g = 2
    x = rng.standard_normal((2, 4 * g, 8, 8))
    p = IsotonicParams(rng.standard_normal((g, 4, g, 3, 3)))
    bias = rng.standard_normal(g)
    lay = GroupLayout(g)
    f = lambda t: shared_bias_add(forward_isotonic(p, t), lay, bias)
    assert max_rel(f(R(P(x))), R(P(f(x)))) <= 1e-12


def test_batchnorm_constant_input_returns_shift(rng):
    bn = GroupBatchNorm(2)
    x = np.full((3, 8, 4, 4), 3.0)
    params = {"gamma": np.array([2.0, 3.0]), "beta": np.array([0.5, -1.0])}
    y, _, _ = bn.forward(x, params, bn.init_state(np.float64), train=True)
    np.testing.assert_allclose(y[:, :4], 0.5, atol=1e-6)
    np.testing.assert_allclose(y[:, 4:], -1.0, atol=1e-6)


def test_batchnorm_permutation_and_rotation_equivariance(rng):
    bn = GroupBatchNorm(2)
    x = rng.standard_normal((4, 8, 5, 5))
    params = {"gamma": rng.standard_normal(2), "beta": rng.standard_normal(2)}
    state = {"mean": rng.standard_normal(2), "var": rng.uniform(0.5, 2.0, 2)}
    lay = layout_for(8)
    for train in (True, False):
        yp, _, _ = bn.forward(P(x), params, state, train)
        y, _, _ = bn.forward(x, params, state, train)
        assert max_rel(yp, P(y)) < 1e-12
    y_rot, _, _ = bn.forward(R(x), params, state, False)
    np.testing.assert_array_equal(y_rot, R(y))


def test_batchnorm_running_stats_update(rng):
    bn = GroupBatchNorm(1, momentum=0.5)
    x = rng.standard_normal((8, 4, 3, 3))
    state = bn.init_state(np.float64)
    _, _, new_state = bn.forward(x, bn.init_params(np.float64), state, train=True)
    np.testing.assert_allclose(new_state["mean"], 0.5 * x.mean(), rtol=1e-12)
    assert state["mean"][0] == 0.0  # input state untouched


def test_argmax_invariance_with_tie_break(rng):
    # equal logits tie-break to the lowest index on both sides
    logits = np.array([[0.5, 0.5, 0.1]])
    assert np.argmax(logits, axis=1)[0] == 0
