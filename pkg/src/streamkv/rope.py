"""Rotary position embeddings and contiguous index remapping.

Positions come in two flavours:

* 1D: one integer per token.
* 3D: a ``(t, h, w)`` triple per token. Text tokens use ``t == h == w``;
  vision tokens carry the frame-group time index plus their raw grid
  coordinates.

Dimension pair ``i`` (elements ``2i`` and ``2i + 1``) is rotated by
``pos_axis / base ** (2i / head_dim)`` where ``pos_axis`` is whichever axis
owns that pair under :class:`RopeSections`. Pairs are handed out to the axes
in order: the first ``t_dims`` pairs follow time, the next ``h_dims`` follow
rows, the last ``w_dims`` follow columns.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation

DEFAULT_BASE = 10000.0


class RopeIndex3D(NamedTuple):
    t: int
    h: int
    w: int


@dataclass(frozen=True)
class RopeSections:
    """How many rotary dimension pairs each axis owns."""

    t_dims: int
    h_dims: int = 0
    w_dims: int = 0

    @property
    def pairs(self) -> int:
        return self.t_dims + self.h_dims + self.w_dims

    @property
    def is_3d(self) -> bool:
        return self.h_dims > 0 or self.w_dims > 0

    @classmethod
    def one_d(cls, head_dim: int) -> "RopeSections":
        return cls(head_dim // 2, 0, 0)

    @classmethod
    def three_d(cls, head_dim: int, ratio: Sequence[int] = (2, 1, 1)) -> "RopeSections":
        """Split ``head_dim / 2`` pairs across (t, h, w) following ``ratio``.

        Rounding leftovers go to the time axis.
        """
        if len(ratio) != 3 or min(ratio) <= 0:
            raise ConfigError(f"3D rope ratio must be three positive ints, got {ratio!r}")
        pairs = head_dim // 2
        total = sum(ratio)
        h = pairs * ratio[1] // total
        w = pairs * ratio[2] // total
        t = pairs - h - w
        if min(t, h, w) <= 0:
            raise ConfigError(
                f"head_dim={head_dim} too small for a 3D split with ratio {tuple(ratio)}"
            )
        return cls(t, h, w)

    def validate(self, head_dim: int) -> None:
        if head_dim <= 0 or head_dim % 2:
            raise ConfigError(f"head_dim must be a positive even number, got {head_dim}")
        if min(self.t_dims, self.h_dims, self.w_dims) < 0:
            raise ConfigError(f"negative section size in {self}")
        if self.pairs != head_dim // 2:
            raise ConfigError(
                f"sections {self} cover {self.pairs} pairs, head_dim={head_dim} needs {head_dim // 2}"
            )
        if self.is_3d and min(self.t_dims, self.h_dims, self.w_dims) == 0:
            raise ConfigError(f"3D sections must all be positive, got {self}")

    def axis_of_pair(self) -> np.ndarray:
        return np.repeat(np.arange(3), [self.t_dims, self.h_dims, self.w_dims])


def inverse_frequencies(head_dim: int, base: float = DEFAULT_BASE) -> np.ndarray:
    return base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def _pair_positions(positions: np.ndarray, sections: RopeSections) -> np.ndarray:
    """Per-pair position for every token, shape ``(n, pairs)``, float64."""
    positions = np.asarray(positions)
    if positions.ndim == 1:
        return np.repeat(positions.astype(np.float64)[:, None], sections.pairs, axis=1)
    if positions.ndim == 2 and positions.shape[1] == 3:
        return positions.astype(np.float64)[:, sections.axis_of_pair()]
    raise ConfigError(f"positions must have shape (n,) or (n, 3), got {positions.shape}")


def rotary_tables(
    positions: np.ndarray, sections: RopeSections, base: float = DEFAULT_BASE
) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(n, pairs)`` in float32."""
    head_dim = 2 * sections.pairs
    angles = _pair_positions(positions, sections) * inverse_frequencies(head_dim, base)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rotary(
    x: np.ndarray,
    positions: np.ndarray,
    sections: RopeSections,
    base: float = DEFAULT_BASE,
    token_axis: int = 0,
) -> np.ndarray:
    """Rotate every head-dim vector of ``x`` by its token's position.

    ``x`` has ``head_dim`` as its last axis and the token index on
    ``token_axis``; every other axis is broadcast over.
    """
    x = np.asarray(x)
    head_dim = x.shape[-1]
    if head_dim != 2 * sections.pairs:
        raise ConfigError(f"vector length {head_dim} does not match sections {sections}")
    cos, sin = rotary_tables(positions, sections, base)
    n = cos.shape[0]
    if x.shape[token_axis] != n:
        raise ConfigError(f"{x.shape[token_axis]} tokens but {n} positions")
    shape = [1] * (x.ndim - 1) + [sections.pairs]
    shape[token_axis] = n
    cos = cos.reshape(shape).astype(x.dtype, copy=False)
    sin = sin.reshape(shape).astype(x.dtype, copy=False)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate(
    vector: Sequence[float] | np.ndarray,
    index: int | Sequence[int],
    sections: RopeSections,
    base: float = DEFAULT_BASE,
) -> np.ndarray:
    """Rotate a single ``head_dim`` vector to a 1D or 3D position."""
    v = np.asarray(vector)
    sections.validate(v.shape[-1])
    if np.ndim(index) == 0:
        positions = np.array([int(index)])
    else:
        positions = np.asarray(index, dtype=np.int64).reshape(1, 3)
    return apply_rotary(v[None, :], positions, sections, base)[0]


def rerotate(
    rotated: np.ndarray,
    old_positions: np.ndarray,
    new_positions: np.ndarray,
    sections: RopeSections,
    base: float = DEFAULT_BASE,
    token_axis: int = 0,
) -> np.ndarray:
    """Move already-rotated keys from ``old_positions`` to ``new_positions``.

    This is the delta alternative to storing keys un-rotated: rotations
    compose additively, so a rotation by ``new - old`` lands on the new slot.
    """
    delta = np.asarray(new_positions, dtype=np.int64) - np.asarray(old_positions, dtype=np.int64)
    return apply_rotary(rotated, delta, sections, base, token_axis=token_axis)


def remap_positions(
    logical: np.ndarray,
    is_vision: np.ndarray,
    second: np.ndarray,
    row: np.ndarray,
    col: np.ndarray,
    three_d: bool = False,
) -> np.ndarray:
    """Array form of :func:`contiguous_remap`. Inputs must be in logical order."""
    logical = np.asarray(logical, dtype=np.int64)
    n = logical.shape[0]
    if n > 1 and np.any(np.diff(logical) <= 0):
        raise ContractViolation("retained entries are not in strictly increasing logical order")
    if not three_d:
        return np.arange(n, dtype=np.int64)
    is_vision = np.asarray(is_vision, dtype=bool)
    second = np.asarray(second, dtype=np.int64)
    # a new time index starts at every text token and at the first patch of each vision second
    starts = np.ones(n, dtype=bool)
    if n > 1:
        same_group = is_vision[1:] & is_vision[:-1] & (second[1:] == second[:-1])
        starts[1:] = ~same_group
    t = np.cumsum(starts) - 1
    out = np.empty((n, 3), dtype=np.int64)
    out[:, 0] = t
    out[:, 1] = np.where(is_vision, row, t)
    out[:, 2] = np.where(is_vision, col, t)
    return out


def next_time_index(positions: np.ndarray) -> int:
    """Index handed to the next incoming token (last retained time index + 1)."""
    if len(positions) == 0:
        return 0
    last = positions[-1]
    return int(last[0] if np.ndim(last) else last) + 1


def contiguous_remap(entries: Iterable, three_d: bool = False) -> list:
    """Assign gap-free rotary indices to retained cache entries.

    ``entries`` are objects with ``logical_position``, ``second`` and ``grid``
    (``None`` for text). 1D returns ints ``0..n-1``; 3D returns
    :class:`RopeIndex3D` values where each vision second shares one time index.
    """
    entries = list(entries)
    logical = [e.logical_position for e in entries]
    is_vision = [e.grid is not None for e in entries]
    second = [e.second for e in entries]
    row = [e.grid[0] if e.grid is not None else 0 for e in entries]
    col = [e.grid[1] if e.grid is not None else 0 for e in entries]
    pos = remap_positions(logical, is_vision, second, row, col, three_d=three_d)
    if three_d:
        return [RopeIndex3D(int(a), int(b), int(c)) for a, b, c in pos]
    return [int(p) for p in pos]
