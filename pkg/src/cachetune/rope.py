"""Rotary position embedding, applied lazily at true global positions.

Keys enter the cache pool without positional encoding; when a chunk is
reused inside a longer prompt, the rotation is applied here with the
positions the tokens occupy in the new prompt. Values carry no positional
transform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParam, ShapeError
from .kvcore import SeqTensor


@dataclass(frozen=True)
class RopeParams:
    """Rotation schedule: angle of pair j at position p is p * scaling * base^(-2j/D).

    pairing selects which dims form a rotated pair: "adjacent" couples
    (2j, 2j+1), "split" couples (j, j + D/2). Producers and consumers of one
    cache must share a single RopeParams.
    """

    head_dim: int
    base: float = 10000.0
    scaling: float = 1.0
    pairing: str = "adjacent"

    def __post_init__(self):
        if self.base <= 1.0:
            raise InvalidParam(f"base must be > 1, got {self.base}")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise InvalidParam(f"head_dim must be even and >= 2, got {self.head_dim}")
        if self.pairing not in ("adjacent", "split"):
            raise InvalidParam(f"unknown pairing {self.pairing!r}")

    def freqs(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.head_dim)


def rope_rotate(x: np.ndarray, positions: np.ndarray,
                params: RopeParams) -> np.ndarray:
    """Rotate an [N, H, D] float array in place-free float64 arithmetic."""
    n, _, d = x.shape
    if d != params.head_dim:
        raise ShapeError(f"tensor head_dim {d} != params head_dim {params.head_dim}")
    angles = np.outer(positions.astype(np.float64) * params.scaling,
                      params.freqs())            # [N, D/2]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    x = x.astype(np.float64)
    if params.pairing == "adjacent":
        a, b = x[..., 0::2], x[..., 1::2]
    else:
        half = d // 2
        a, b = x[..., :half], x[..., half:]
    ra = a * cos - b * sin
    rb = a * sin + b * cos
    out = np.empty_like(x)
    if params.pairing == "adjacent":
        out[..., 0::2] = ra
        out[..., 1::2] = rb
    else:
        out[..., : d // 2] = ra
        out[..., d // 2:] = rb
    return out


def rope_apply(keys: SeqTensor, positions: Sequence[int],
               params: RopeParams) -> SeqTensor:
    """Apply the rotary transform to each token's key at its given position."""
    pos = np.asarray(positions)
    if pos.shape != (keys.n_tokens,):
        raise ShapeError(f"{pos.size} positions for {keys.n_tokens} tokens")
    return SeqTensor(rope_rotate(keys.data, pos, params).astype(np.float32))
