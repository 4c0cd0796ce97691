"""Reference layers that rotate feature maps instead of filters.

Each function computes the same values as its tied-filter counterpart
by pulling the rotation through the correlation: a slot that the fast
path serves with a rotated filter is served here by counter-rotating
the input maps, correlating with the unrotated base stack, and rotating
the result back. Nothing is cached and the four slot passes stay
separate on purpose; this is the slow path the benchmark contrasts
against, and the independent witness used to cross-check the
tied-filter implementation. Both paths share the same correlation
kernel, so discrepancies localize to the layer algebra.
"""

from dataclasses import dataclass

import numpy as np

from .conv import ConvGeometry, correlate2d
from .eqlayers import CycleParams, DecycleParams, IsotonicParams
from .tensor import rotate90


def oracle_cycle(p: CycleParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """Cycle layer output computed by rotating the feature maps.

    Output channel (a, i) = R^i( base[a] * R^-i(x) ).
    """
    g = p.g_out
    slots = []
    for i in range(4):
        y = correlate2d(rotate90(x, -i), p.base, geom)
        slots.append(rotate90(y, i))
    n, _, oh, ow = slots[0].shape
    return np.stack(slots, axis=2).reshape(n, 4 * g, oh, ow)


def oracle_isotonic(
    p: IsotonicParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()
) -> np.ndarray:
    """Isotonic layer output computed by rolling and rotating the maps.

    For output slot j, the input channels are cyclically shifted by j,
    rotated by -j, correlated with the fixed generator stack, and the
    result rotated back by +j.
    """
    g_out, _, g_in, k, _ = p.base.shape
    n, c, h, w = x.shape
    if c != 4 * g_in:
        raise ValueError(f"expected {4 * g_in} input channels, got {c}")
    xg = x.reshape(n, g_in, 4, h, w)
    # generator stack with input channel order (group, generator index)
    base_stack = np.ascontiguousarray(p.base.transpose(0, 2, 1, 3, 4)).reshape(
        g_out, 4 * g_in, k, k
    )
    slots = []
    for j in range(4):
        rolled = np.roll(xg, -j, axis=2).reshape(n, 4 * g_in, h, w)
        y = correlate2d(rotate90(rolled, -j), base_stack, geom)
        slots.append(rotate90(y, j))
    oh, ow = slots[0].shape[2], slots[0].shape[3]
    return np.stack(slots, axis=2).reshape(n, 4 * g_out, oh, ow)


def oracle_decycle(
    p: DecycleParams, x: np.ndarray, geom: ConvGeometry = ConvGeometry()
) -> np.ndarray:
    """Decycle layer output as a sum over counter-rotated slot correlations.

    y_o = sum_j R^j( base[o] * R^-j(x at cyclic slot j) ).
    """
    g_in = p.g_in
    n, c, h, w = x.shape
    if c != 4 * g_in:
        raise ValueError(f"expected {4 * g_in} input channels, got {c}")
    xg = x.reshape(n, g_in, 4, h, w)
    acc = None
    for j in range(4):
        y = correlate2d(rotate90(np.ascontiguousarray(xg[:, :, j]), -j), p.base, geom)
        y = rotate90(y, j)
        acc = y if acc is None else acc + y
    return acc


@dataclass
class PathComparison:
    """Agreement report between the tied-filter and map-rotating paths."""

    kind: str
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_diff <= self.tolerance


def relative_deviation(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(max abs diff, max diff scaled by the larger magnitude of the pair)."""
    max_abs = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 0.0)
    return max_abs, (max_abs / scale if scale > 0 else 0.0)


def compare_paths(kind, p, x, geom=ConvGeometry(), tolerance=None) -> PathComparison:
    """Run both implementations of one layer kind and report the deviation.

    Default tolerance is 1e-12 for double precision inputs and 1e-5 for
    single precision.
    """
    from . import eqlayers

    forward = {
        "cycle": (eqlayers.forward_cycle, oracle_cycle),
        "isotonic": (eqlayers.forward_isotonic, oracle_isotonic),
        "decycle": (eqlayers.forward_decycle, oracle_decycle),
    }
    if kind not in forward:
        raise ValueError(f"unknown layer kind {kind!r}")
    if tolerance is None:
        tolerance = 1e-12 if x.dtype == np.float64 else 1e-5
    fast_fn, slow_fn = forward[kind]
    max_abs, max_rel = relative_deviation(fast_fn(p, x, geom), slow_fn(p, x, geom))
    return PathComparison(kind, max_abs, max_rel, tolerance)
