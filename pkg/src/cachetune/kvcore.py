"""Core tensor and chunk types shared by every module.

Tensors are dense, sequence-major float32 arrays laid out [token][head][dim]
so that both the sequence-dimension FFT and token-granular I/O stride
contiguously per token. All types are immutable after construction and all
operations are pure functions, so values can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import InvalidPlan, ShapeError


class DtypeCode(IntEnum):
    F32 = 0
    F16_AS_F32 = 1  # logically half precision, stored widened to f32


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SeqTensor:
    """One layer's worth of per-token vectors, shape [n_tokens, n_heads, head_dim].

    head_dim must be even (rotary embedding pairs adjacent dims). Stored as
    float32; spectral math widens to float64 internally.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3:
            raise ShapeError(f"expected [token][head][dim] array, got ndim={a.ndim}")
        n, h, d = a.shape
        if n < 1 or h < 1 or d < 1:
            raise ShapeError(f"all dims must be >= 1, got {a.shape}")
        if d % 2 != 0:
            raise ShapeError(f"head_dim must be even, got {d}")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def n_heads(self) -> int:
        return self.data.shape[1]

    @property
    def head_dim(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ComplexSpectrum:
    """Sequence-dimension spectrum of a SeqTensor, shape [freq][head][dim].

    Holds floor(origin_len/2)+1 non-redundant bins of the real-input DFT
    (convention X[k] = sum_n x[n] * exp(-2i*pi*k*n/N)). Kept in float64.
    """

    re: np.ndarray
    im: np.ndarray
    origin_len: int

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 3:
            raise ShapeError("re/im must be equal-shape [freq][head][dim] arrays")
        expected = self.origin_len // 2 + 1
        if re.shape[0] != expected:
            raise ShapeError(
                f"n_freqs {re.shape[0]} != floor(origin_len/2)+1 = {expected}"
            )
        object.__setattr__(self, "re", _freeze(re))
        object.__setattr__(self, "im", _freeze(im))

    @property
    def n_freqs(self) -> int:
        return self.re.shape[0]

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, a: np.ndarray, origin_len: int) -> "ComplexSpectrum":
        a = np.asarray(a)
        return cls(re=a.real.astype(np.float64), im=a.imag.astype(np.float64),
                   origin_len=origin_len)


@dataclass(frozen=True)
class KvChunk:
    """Per-layer Key/Value tensors of one reusable text segment.

    Keys are stored pre-positional-encoding so they can be re-rotated at
    their true global positions when the chunk is reused. All layers share
    one (n_tokens, n_heads, head_dim) geometry.

    source_tokens optionally carries the token ids that produced the chunk;
    it never travels through serialization and exists so the online path can
    recompute selected tokens without re-tokenizing.
    """

    chunk_id: str
    keys_raw: tuple[SeqTensor, ...]
    values: tuple[SeqTensor, ...]
    dtype_code: DtypeCode = DtypeCode.F32
    source_tokens: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        keys = tuple(self.keys_raw)
        vals = tuple(self.values)
        if len(keys) == 0 or len(keys) != len(vals):
            raise ShapeError("keys_raw and values must be non-empty, equal-length")
        shape = keys[0].shape
        for t in (*keys, *vals):
            if t.shape != shape:
                raise ShapeError(f"layer shape mismatch: {t.shape} vs {shape}")
        object.__setattr__(self, "keys_raw", keys)
        object.__setattr__(self, "values", vals)
        if self.source_tokens is not None:
            toks = _freeze(np.asarray(self.source_tokens, dtype=np.int64))
            if toks.shape != (shape[0],):
                raise ShapeError("source_tokens length must equal n_tokens")
            object.__setattr__(self, "source_tokens", toks)

    @property
    def n_layers(self) -> int:
        return len(self.keys_raw)

    @property
    def token_count(self) -> int:
        return self.keys_raw[0].n_tokens

    @property
    def n_heads(self) -> int:
        return self.keys_raw[0].n_heads

    @property
    def head_dim(self) -> int:
        return self.keys_raw[0].head_dim


def tensor_slice_tokens(t: SeqTensor, indices: Sequence[int]) -> SeqTensor:
    """Copy the given token rows, in the given order, into a new tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("cannot slice zero tokens (SeqTensor needs n_tokens >= 1)")
    if idx.min() < 0 or idx.max() >= t.n_tokens:
        raise IndexError(f"token index out of range [0, {t.n_tokens})")
    return SeqTensor(t.data[idx])


def tensor_scatter_tokens(dst: SeqTensor, src: SeqTensor | None,
                          indices: Sequence[int]) -> SeqTensor:
    """Return dst with rows at `indices` replaced by the rows of src.

    Indices must be distinct and pair 1:1 with src rows; all other rows are
    copied through bit-exactly. An empty index list returns dst unchanged
    (src may be None in that case).
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return SeqTensor(dst.data.copy())
    if src is None:
        raise ShapeError("src required when indices are non-empty")
    if idx.size != src.n_tokens:
        raise ShapeError(f"{idx.size} indices for {src.n_tokens} source rows")
    if (src.n_heads, src.head_dim) != (dst.n_heads, dst.head_dim):
        raise ShapeError("src/dst disagree on (n_heads, head_dim)")
    if idx.size != np.unique(idx).size:
        raise InvalidPlan("duplicate scatter index")
    if idx.size and (idx.min() < 0 or idx.max() >= dst.n_tokens):
        raise IndexError(f"token index out of range [0, {dst.n_tokens})")
    out = dst.data.copy()
    out[idx] = src.data
    return SeqTensor(out)
