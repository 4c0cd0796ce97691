"""Rank-4 tensor helpers and the exact symmetry operators.

Feature maps live in (batch, channel, height, width) arrays. The two
operators everything else is built on are the quarter-turn spatial
rotation and the cyclic permutation of 4-channel groups; both are pure
index permutations, so composing or inverting them is exact.
"""

from dataclasses import dataclass

import numpy as np


class LayoutError(ValueError):
    """Channel count incompatible with a 4-channel group layout."""


@dataclass(frozen=True)
class GroupLayout:
    """Interpretation of a channel axis as `groups` bundles of 4 cyclic slots.

    Channel index = group*4 + cyclic_index, cyclic_index in 0..3.
    """

    groups: int

    def check(self, channels: int) -> None:
        if channels != 4 * self.groups:
            raise LayoutError(
                f"expected {4 * self.groups} channels for {self.groups} groups, got {channels}"
            )


def layout_for(channels: int) -> GroupLayout:
    """Layout with channels/4 groups; raises LayoutError if not divisible."""
    if channels % 4 != 0:
        raise LayoutError(f"channel count {channels} is not divisible by 4")
    return GroupLayout(channels // 4)


def _require_rank4(t: np.ndarray) -> None:
    if t.ndim != 4:
        raise ValueError(f"expected a rank-4 array, got shape {t.shape}")


def rotate90(t: np.ndarray, times: int = 1) -> np.ndarray:
    """Rotate the two trailing spatial axes counterclockwise by times*90 deg.

    Index convention for one turn: out[i, j] = in[j, w-1-i]. Pure
    permutation, no arithmetic; times is taken modulo 4 and may be
    negative. Spatial dims swap when times is odd.
    """
    _require_rank4(t)
    return np.ascontiguousarray(np.rot90(t, times % 4, axes=(2, 3)))


def rotate_kernels90(w: np.ndarray, times: int = 1) -> np.ndarray:
    """rotate90 applied to each (out, in) kernel slice of a filter bank."""
    if w.ndim != 4:
        raise ValueError(f"expected a rank-4 filter array, got shape {w.shape}")
    return np.ascontiguousarray(np.rot90(w, times % 4, axes=(2, 3)))


def cyclic_permute(t: np.ndarray, layout: GroupLayout, times: int = 1) -> np.ndarray:
    """Shift the cyclic slot of every 4-channel group by +times (mod 4).

    Destination slot = source slot + times, so one step maps the group
    [x0, x1, x2, x3] to [x3, x0, x1, x2]. Groups are independent.
    """
    _require_rank4(t)
    n, c, h, w = t.shape
    layout.check(c)
    grouped = t.reshape(n, layout.groups, 4, h, w)
    return np.roll(grouped, times % 4, axis=2).reshape(n, c, h, w).copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return a * k


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0)


def channel_max(t: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Max over channels[start:stop]; result keeps a singleton channel axis."""
    _require_rank4(t)
    if not (0 <= start < stop <= t.shape[1]):
        raise ValueError(f"channel slice [{start}:{stop}) out of range for c={t.shape[1]}")
    return t[:, start:stop].max(axis=1, keepdims=True)


def channel_mean(t: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Mean over channels[start:stop]; result keeps a singleton channel axis."""
    _require_rank4(t)
    if not (0 <= start < stop <= t.shape[1]):
        raise ValueError(f"channel slice [{start}:{stop}) out of range for c={t.shape[1]}")
    return t[:, start:stop].mean(axis=1, keepdims=True)


def assert_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise if any element is NaN or infinite; returns the input unchanged."""
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{what} contains non-finite elements")
    return t
