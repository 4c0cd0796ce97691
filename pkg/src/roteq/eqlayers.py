"""The three tied-weight layer types and their equivariance companions.

A cycle layer stacks the four quarter-turn rotations of each base
filter, turning input rotation into a channel permutation plus a
rotation. Isotonic layers tie a 4x4 block of filters (generated by four
free kernels per group pair) so that permuted-rotated inputs map to
permuted-rotated outputs. A decycle layer is the row form of the cycle
stack and collapses the permutation, leaving plain rotation
equivariance. All forward passes expand the tied parameters into an
ordinary filter bank and call the shared correlation kernel; backward
passes push expanded-filter gradients back through the tying (the
adjoint of a rotation is the inverse rotation).

Free parameter counts: a cycle layer holds g*c_in*k^2 reals, an
isotonic layer 4*g_out*g_in*k^2 (one quarter of the 16*g_out*g_in*k^2
an untied layer of the same expanded width would need), a decycle layer
c_out*g_in*k^2.
"""

from dataclasses import dataclass

import numpy as np

from .conv import ConvGeometry, correlate2d, correlate2d_backward
from .tensor import GroupLayout, layout_for, rotate_kernels90


def _check_square(base: np.ndarray, what: str) -> None:
    if base.shape[-1] != base.shape[-2]:
        raise ValueError(f"{what} kernels must be square, got {base.shape[-2]}x{base.shape[-1]}")


@dataclass
class CycleParams:
    """Base filters of a cycle layer, shape (g_out, c_in, k, k)."""

    base: np.ndarray

    def __post_init__(self):
        if self.base.ndim != 4:
            raise ValueError(f"cycle base must be rank 4, got shape {self.base.shape}")
        _check_square(self.base, "cycle")

    @property
    def g_out(self) -> int:
        return self.base.shape[0]

    @property
    def c_in(self) -> int:
        return self.base.shape[1]

    @property
    def kernel(self) -> int:
        return self.base.shape[2]


@dataclass
class IsotonicParams:
    """Free filters of an isotonic layer, shape (g_out, 4, g_in, k, k).

    Axis 1 indexes the four generators of the tied 4x4 block for each
    (out-group, in-group) pair.
    """

    base: np.ndarray

    def __post_init__(self):
        if self.base.ndim != 5 or self.base.shape[1] != 4:
            raise ValueError(
                f"isotonic base must have shape (g_out, 4, g_in, k, k), got {self.base.shape}"
            )
        _check_square(self.base, "isotonic")

    @property
    def g_out(self) -> int:
        return self.base.shape[0]

    @property
    def g_in(self) -> int:
        return self.base.shape[2]

    @property
    def kernel(self) -> int:
        return self.base.shape[3]


@dataclass
class DecycleParams:
    """Base filters of a decycle layer, shape (c_out, g_in, k, k)."""

    base: np.ndarray

    def __post_init__(self):
        if self.base.ndim != 4:
            raise ValueError(f"decycle base must be rank 4, got shape {self.base.shape}")
        _check_square(self.base, "decycle")

    @property
    def c_out(self) -> int:
        return self.base.shape[0]

    @property
    def g_in(self) -> int:
        return self.base.shape[1]

    @property
    def kernel(self) -> int:
        return self.base.shape[2]


def expand_cycle(p: CycleParams) -> np.ndarray:
    """Expanded filter bank (4*g_out, c_in, k, k).

    Output channel (a, i) holds the base filter of group a rotated i
    quarter turns, i = 0..3 within each group.
    """
    g, c_in, k, _ = p.base.shape
    out = np.empty((g, 4, c_in, k, k), dtype=p.base.dtype)
    for i in range(4):
        out[:, i] = rotate_kernels90(p.base, i)
    return out.reshape(4 * g, c_in, k, k)


def expand_isotonic(p: IsotonicParams) -> np.ndarray:
    """Expanded filter bank (4*g_out, 4*g_in, k, k).

    The block entry at output slot j, input slot i of group pair (a, b)
    is the generator base[a, (i-j) mod 4, b] rotated j quarter turns;
    the resulting bank is a fixed point of the shift-both-slots-then-
    rotate map.
    """
    g_out, _, g_in, k, _ = p.base.shape
    out = np.empty((g_out, 4, g_in, 4, k, k), dtype=p.base.dtype)
    for j in range(4):
        for i in range(4):
            out[:, j, :, i] = rotate_kernels90(p.base[:, (i - j) % 4], j)
    return out.reshape(4 * g_out, 4 * g_in, k, k)


def expand_decycle(p: DecycleParams) -> np.ndarray:
    """Expanded filter bank (c_out, 4*g_in, k, k).

    Input slot j of every group holds the base filter rotated j quarter
    turns: the row form [w, Rw, R^2w, R^3w].
    """
    c_out, g_in, k, _ = p.base.shape
    out = np.empty((c_out, g_in, 4, k, k), dtype=p.base.dtype)
    for j in range(4):
        out[:, :, j] = rotate_kernels90(p.base, j)
    return out.reshape(c_out, 4 * g_in, k, k)


def forward_cycle(p: CycleParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    return correlate2d(x, expand_cycle(p), geom)


def forward_isotonic(
    p: IsotonicParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()
) -> np.ndarray:
    return correlate2d(x, expand_isotonic(p), geom)


def forward_decycle(
    p: DecycleParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()
) -> np.ndarray:
    return correlate2d(x, expand_decycle(p), geom)


def collapse_cycle_grad(grad_w: np.ndarray, g_out: int) -> np.ndarray:
    """Fold an expanded-filter gradient back onto cycle base parameters."""
    four_g, c_in, k, _ = grad_w.shape
    gw = grad_w.reshape(g_out, 4, c_in, k, k)
    acc = np.zeros((g_out, c_in, k, k), dtype=grad_w.dtype)
    for i in range(4):
        acc += rotate_kernels90(gw[:, i], -i)
    return acc


def collapse_isotonic_grad(grad_w: np.ndarray, g_out: int, g_in: int) -> np.ndarray:
    """Fold an expanded-filter gradient back onto the isotonic generators."""
    k = grad_w.shape[2]
    gw = grad_w.reshape(g_out, 4, g_in, 4, k, k)
    acc = np.zeros((g_out, 4, g_in, k, k), dtype=grad_w.dtype)
    for j in range(4):
        for m in range(4):
            acc[:, m] += rotate_kernels90(gw[:, j, :, (m + j) % 4], -j)
    return acc


def collapse_decycle_grad(grad_w: np.ndarray) -> np.ndarray:
    """Fold an expanded-filter gradient back onto decycle base parameters."""
    c_out, four_g, k, _ = grad_w.shape
    gw = grad_w.reshape(c_out, four_g // 4, 4, k, k)
    acc = np.zeros((c_out, four_g // 4, k, k), dtype=grad_w.dtype)
    for j in range(4):
        acc += rotate_kernels90(gw[:, :, j], -j)
    return acc


def tied_backward_cycle(p, x, grad_out, geom=ConvGeometry()):
    grad_x, grad_w = correlate2d_backward(grad_out, x, expand_cycle(p), geom)
    return grad_x, collapse_cycle_grad(grad_w, p.g_out)


def tied_backward_isotonic(p, x, grad_out, geom=ConvGeometry()):
    grad_x, grad_w = correlate2d_backward(grad_out, x, expand_isotonic(p), geom)
    return grad_x, collapse_isotonic_grad(grad_w, p.g_out, p.g_in)


def tied_backward_decycle(p, x, grad_out, geom=ConvGeometry()):
    grad_x, grad_w = correlate2d_backward(grad_out, x, expand_decycle(p), geom)
    return grad_x, collapse_decycle_grad(grad_w)


def group_cross_channel_pool(x: np.ndarray, layout: GroupLayout, mode: str = "max") -> np.ndarray:
    """Per pixel, reduce the 4 cyclic channels of each group to one channel."""
    n, c, h, w = x.shape
    layout.check(c)
    grouped = x.reshape(n, layout.groups, 4, h, w)
    if mode == "max":
        return grouped.max(axis=2)
    if mode == "mean":
        return grouped.mean(axis=2)
    raise ValueError(f"unknown pooling mode {mode!r}")


def group_cross_channel_pool_backward(
    grad_out: np.ndarray, x: np.ndarray, layout: GroupLayout, mode: str = "max"
) -> np.ndarray:
    n, c, h, w = x.shape
    grouped = x.reshape(n, layout.groups, 4, h, w)
    if mode == "max":
        winner = grouped.argmax(axis=2)
        grad = np.zeros_like(grouped)
        for i in range(4):
            grad[:, :, i] = grad_out * (winner == i)
    elif mode == "mean":
        grad = np.broadcast_to(grad_out[:, :, None] / 4, grouped.shape).astype(x.dtype)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return grad.reshape(n, c, h, w).copy()


def global_spatial_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over all pixels per (sample, channel); output is (n, c, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


def global_spatial_avg_pool_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    return np.broadcast_to(grad_out / (h * w), x.shape).astype(x.dtype)


def shared_bias_add(x: np.ndarray, layout: GroupLayout, bias: np.ndarray) -> np.ndarray:
    """Add one shared bias value to all 4 channels of each group."""
    layout.check(x.shape[1])
    if bias.shape != (layout.groups,):
        raise ValueError(f"expected {layout.groups} bias values, got shape {bias.shape}")
    return x + np.repeat(bias, 4).reshape(1, -1, 1, 1)


def shared_bias_backward(grad_out: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Gradient of the shared bias: sum over batch, group channels and pixels."""
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, layout.groups, 4, h, w).sum(axis=(0, 2, 3, 4))


class GroupBatchNorm:
    """Batch normalization with statistics and affine parameters shared per group.

    Statistics are computed jointly over batch, spatial positions and
    the `group_size` channels of a group, so permuting channels within a
    group leaves them unchanged; sharing the running statistics the same
    way is what keeps eval mode equivariant. `group_size=4` is the tied
    layout; `group_size=1` recovers ordinary per-channel batch norm.
    """

    def __init__(self, groups: int, group_size: int = 4, eps: float = 1e-5, momentum: float = 0.1):
        self.groups = groups
        self.group_size = group_size
        self.eps = eps
        self.momentum = momentum

    def init_params(self, dtype) -> dict:
        return {
            "gamma": np.ones(self.groups, dtype=dtype),
            "beta": np.zeros(self.groups, dtype=dtype),
        }

    def init_state(self, dtype) -> dict:
        return {
            "mean": np.zeros(self.groups, dtype=dtype),
            "var": np.ones(self.groups, dtype=dtype),
        }

    def _check(self, x: np.ndarray) -> None:
        if x.shape[1] != self.groups * self.group_size:
            raise ValueError(
                f"expected {self.groups * self.group_size} channels, got {x.shape[1]}"
            )

    def forward(self, x, params, state, train: bool):
        """Returns (y, cache, new_state); state is never mutated in place."""
        self._check(x)
        n, c, h, w = x.shape
        g, gs = self.groups, self.group_size
        xg = x.reshape(n, g, gs, h, w)
        if train:
            mean = xg.mean(axis=(0, 2, 3, 4))
            var = xg.var(axis=(0, 2, 3, 4))
            m = self.momentum
            new_state = {
                "mean": (1 - m) * state["mean"] + m * mean,
                "var": (1 - m) * state["var"] + m * var,
            }
        else:
            mean, var = state["mean"], state["var"]
            new_state = state
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xg - mean.reshape(1, g, 1, 1, 1)) * inv_std.reshape(1, g, 1, 1, 1)
        y = params["gamma"].reshape(1, g, 1, 1, 1) * xhat + params["beta"].reshape(1, g, 1, 1, 1)
        cache = {"xhat": xhat, "inv_std": inv_std, "train": train}
        return y.reshape(n, c, h, w), cache, new_state

    def backward(self, grad_out, params, cache):
        """Returns (grad_x, grad_params)."""
        n, c, h, w = grad_out.shape
        g, gs = self.groups, self.group_size
        go = grad_out.reshape(n, g, gs, h, w)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grad_gamma = (go * xhat).sum(axis=(0, 2, 3, 4))
        grad_beta = go.sum(axis=(0, 2, 3, 4))
        gamma = params["gamma"].reshape(1, g, 1, 1, 1)
        if cache["train"]:
            m = n * gs * h * w
            gxhat = go * gamma
            grad_xg = (
                inv_std.reshape(1, g, 1, 1, 1)
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3, 4), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3, 4), keepdims=True)
                )
            )
        else:
            grad_xg = go * gamma * inv_std.reshape(1, g, 1, 1, 1)
        grad_x = grad_xg.reshape(n, c, h, w)
        return grad_x, {"gamma": grad_gamma, "beta": grad_beta}


def init_cycle(rng: np.random.Generator, g_out: int, c_in: int, kernel: int, dtype) -> CycleParams:
    return CycleParams(_uniform_init(rng, (g_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype))


def init_isotonic(
    rng: np.random.Generator, g_out: int, g_in: int, kernel: int, dtype
) -> IsotonicParams:
    fan_in = 4 * g_in * kernel * kernel
    return IsotonicParams(_uniform_init(rng, (g_out, 4, g_in, kernel, kernel), fan_in, dtype))


def init_decycle(rng: np.random.Generator, c_out: int, g_in: int, kernel: int, dtype) -> DecycleParams:
    fan_in = 4 * g_in * kernel * kernel
    return DecycleParams(_uniform_init(rng, (c_out, g_in, kernel, kernel), fan_in, dtype))


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # zero-mean uniform with variance 2/fan_in of the *expanded* filter
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


__all__ = [
    "CycleParams",
    "IsotonicParams",
    "DecycleParams",
    "expand_cycle",
    "expand_isotonic",
    "expand_decycle",
    "forward_cycle",
    "forward_isotonic",
    "forward_decycle",
    "tied_backward_cycle",
    "tied_backward_isotonic",
    "tied_backward_decycle",
    "collapse_cycle_grad",
    "collapse_isotonic_grad",
    "collapse_decycle_grad",
    "group_cross_channel_pool",
    "group_cross_channel_pool_backward",
    "global_spatial_avg_pool",
    "global_spatial_avg_pool_backward",
    "shared_bias_add",
    "shared_bias_backward",
    "GroupBatchNorm",
    "init_cycle",
    "init_isotonic",
    "init_decycle",
    "layout_for",
    "GroupLayout",
]
