"""Tiered external cache pool for KV chunks.

Chunks are serialized bit-exactly in the CTKV format and fetched back either
whole or sparsely: given an importance ranking, a fetch plan covers only the
complement of the recompute set, as coalesced byte ranges into the chunk
file. Every tier carries a bandwidth/latency cost model; ssd and hdd tiers
may also be file-backed, in which case the planned byte ranges are read from
real storage and accounted exactly.

CTKV chunk file layout (little-endian):

    magic "CTKV" | version u32=1 | n_layers u32 | n_tokens u32 |
    n_heads u32 | head_dim u32 | dtype u32 (0=f32) | flags u32 (bit0: keys
    are pre-RoPE)
    per layer l = 0..L-1: K_raw rows [token][head][dim] f32, then V rows f32
    optional ranking block: alpha f64 | per-layer orders (L*N u32) |
    aggregate order (N u32) | per-layer scores (L*N f64)

The ranking block is present iff the trailing byte count says so; a file may
legitimately end after the KV payload (e.g. before `analyze` has run).
"""

from __future__ import annotations

import io
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (AlreadyExists, InvalidParam, InvalidPlan, IoError,
                     NotFound, ShapeError)
from .kvcore import DtypeCode, KvChunk, SeqTensor
from .spectral import ImportanceRanking, complement_for_ratio

MAGIC = b"CTKV"
VERSION = 1
HEADER = struct.Struct("<4s7I")  # magic + version, L, N, H, D, dtype, flags
FLAG_PRE_ROPE = 1
DTYPE_SIZE = 4  # payload is always f32 on disk


# ---------------------------------------------------------------------------
# tiers

TIER_KINDS = ("gpu-sim", "cpu-mem", "ssd", "hdd", "custom")


@dataclass(frozen=True)
class TierConfig:
    """One cache medium: bandwidths in bytes/s, fixed seconds per access.

    backing=None keeps chunks in memory (transfer cost is modeled);
    backing=<dir> stores one .ctkv file per chunk and reads go through the
    filesystem.
    """

    kind: str
    read_bw: float
    write_bw: float
    fixed_latency: float = 0.0
    backing: str | None = None

    def __post_init__(self):
        if self.kind not in TIER_KINDS:
            raise InvalidParam(f"unknown tier kind {self.kind!r}")
        if self.read_bw <= 0 or self.write_bw <= 0:
            raise InvalidParam("bandwidths must be > 0")
        if self.fixed_latency < 0:
            raise InvalidParam("fixed_latency must be >= 0")

    def read_time(self, n_bytes: int) -> float:
        if n_bytes <= 0:
            return 0.0
        return self.fixed_latency + n_bytes / self.read_bw

    def write_time(self, n_bytes: int) -> float:
        if n_bytes <= 0:
            return 0.0
        return self.fixed_latency + n_bytes / self.write_bw


# Disk bandwidths follow fio sequential measurements of the reference
# offload paths; sequential streaming amortizes seeks, so the disk presets
# carry no extra fixed access latency.
TIER_PRESETS: dict[str, TierConfig] = {
    "gpu-sim": TierConfig("gpu-sim", read_bw=200e9, write_bw=200e9,
                          fixed_latency=5e-6),
    "cpu-mem": TierConfig("cpu-mem", read_bw=20e9, write_bw=20e9,
                          fixed_latency=1e-6),
    "ssd": TierConfig("ssd", read_bw=535e6, write_bw=445e6),
    "hdd": TierConfig("hdd", read_bw=205e6, write_bw=201e6),
}


def save_tier_config(tier: TierConfig, path: str | Path) -> None:
    lines = [
        f"kind={tier.kind}",
        f"read_bw_bytes={tier.read_bw:.0f}",
        f"write_bw_bytes={tier.write_bw:.0f}",
        f"fixed_latency_s={tier.fixed_latency!r}",
        f"backing={tier.backing or ''}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_tier_config(path: str | Path) -> TierConfig:
    """Parse the key=value tier description file."""
    fields: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidParam(f"bad tier config line: {raw!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    try:
        return TierConfig(
            kind=fields["kind"],
            read_bw=float(fields["read_bw_bytes"]),
            write_bw=float(fields["write_bw_bytes"]),
            fixed_latency=float(fields.get("fixed_latency_s", "0")),
            backing=fields.get("backing") or None,
        )
    except KeyError as e:
        raise InvalidParam(f"tier config missing field {e}") from e


def resolve_tier(name_or_path: str) -> TierConfig:
    """Accept either a preset name or a tier config file path."""
    if name_or_path in TIER_PRESETS:
        return TIER_PRESETS[name_or_path]
    if Path(name_or_path).exists():
        return load_tier_config(name_or_path)
    raise InvalidParam(f"not a tier preset or config file: {name_or_path!r}")


# ---------------------------------------------------------------------------
# CTKV serialization

def layer_bytes(n_tokens: int, n_heads: int, head_dim: int) -> int:
    """K plus V payload bytes for one layer."""
    return 2 * n_tokens * n_heads * head_dim * DTYPE_SIZE


def token_row_bytes(n_heads: int, head_dim: int) -> int:
    return n_heads * head_dim * DTYPE_SIZE


def ranking_block_bytes(n_layers: int, n_tokens: int) -> int:
    return 8 + n_layers * n_tokens * 4 + n_tokens * 4 + n_layers * n_tokens * 8


def chunk_file_bytes(n_layers: int, n_tokens: int, n_heads: int,
                     head_dim: int, with_ranking: bool) -> int:
    total = HEADER.size + n_layers * layer_bytes(n_tokens, n_heads, head_dim)
    if with_ranking:
        total += ranking_block_bytes(n_layers, n_tokens)
    return total


def write_ctkv(chunk: KvChunk, ranking: ImportanceRanking | None = None) -> bytes:
    """Serialize a chunk (and optionally its ranking) to CTKV bytes."""
    l, n = chunk.n_layers, chunk.token_count
    h, d = chunk.n_heads, chunk.head_dim
    buf = io.BytesIO()
    buf.write(HEADER.pack(MAGIC, VERSION, l, n, h, d,
                          int(chunk.dtype_code), FLAG_PRE_ROPE))
    for k, v in zip(chunk.keys_raw, chunk.values):
        buf.write(k.data.astype("<f4").tobytes())
        buf.write(v.data.astype("<f4").tobytes())
    if ranking is not None:
        if ranking.n_tokens != n or ranking.n_layers != l:
            raise ShapeError("ranking geometry disagrees with chunk")
        buf.write(struct.pack("<d", ranking.alpha))
        buf.write(ranking.per_layer_order.astype("<u4").tobytes())
        buf.write(ranking.aggregate_order.astype("<u4").tobytes())
        buf.write(ranking.per_layer_scores.astype("<f8").tobytes())
    return buf.getvalue()


def read_ctkv(data: bytes,
              chunk_id: str = "chunk") -> tuple[KvChunk, ImportanceRanking | None]:
    """Parse CTKV bytes back into a chunk and its ranking, if present."""
    if len(data) < HEADER.size:
        raise IoError("truncated CTKV header")
    magic, version, l, n, h, d, dtype, flags = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IoError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IoError(f"unsupported CTKV version {version}")
    if not flags & FLAG_PRE_ROPE:
        raise IoError("chunk keys are not marked pre-RoPE")
    payload = l * layer_bytes(n, h, d)
    base = HEADER.size + payload
    if len(data) not in (base, base + ranking_block_bytes(l, n)):
        raise IoError(f"CTKV length {len(data)} matches neither bare nor "
                      f"ranked layout for geometry L={l} N={n} H={h} D={d}")
    keys, values = [], []
    off = HEADER.size
    per_tensor = n * h * d * DTYPE_SIZE
    for _ in range(l):
        k = np.frombuffer(data, dtype="<f4", count=n * h * d, offset=off)
        off += per_tensor
        v = np.frombuffer(data, dtype="<f4", count=n * h * d, offset=off)
        off += per_tensor
        keys.append(SeqTensor(k.reshape(n, h, d).copy()))
        values.append(SeqTensor(v.reshape(n, h, d).copy()))
    chunk = KvChunk(chunk_id=chunk_id, keys_raw=tuple(keys),
                    values=tuple(values), dtype_code=DtypeCode(dtype))
    ranking = None
    if len(data) > base:
        (alpha,) = struct.unpack_from("<d", data, base)
        off = base + 8
        orders = np.frombuffer(data, dtype="<u4", count=l * n, offset=off)
        off += l * n * 4
        agg = np.frombuffer(data, dtype="<u4", count=n, offset=off)
        off += n * 4
        scores = np.frombuffer(data, dtype="<f8", count=l * n, offset=off)
        ranking = ImportanceRanking(
            per_layer_scores=scores.reshape(l, n).copy(),
            per_layer_order=orders.reshape(l, n).astype(np.int64),
            aggregate_order=agg.astype(np.int64),
            alpha=alpha, n_tokens=n)
    return chunk, ranking


# ---------------------------------------------------------------------------
# sparse fetch planning

@dataclass(frozen=True)
class SparseFetchPlan:
    """Byte-exact I/O plan for one layer of one chunk at ratio r.

    keep_indices is the ascending complement of the recompute set;
    byte_ranges are absolute (offset, length) pairs into the chunk file with
    contiguous token runs coalesced.
    """

    chunk_id: str
    layer: int
    keep_indices: np.ndarray
    byte_ranges: tuple[tuple[int, int], ...]
    expected_bytes: int

    def __post_init__(self):
        idx = np.asarray(self.keep_indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "keep_indices", idx)
        object.__setattr__(self, "byte_ranges", tuple(self.byte_ranges))


def _runs(sorted_idx: np.ndarray) -> list[tuple[int, int]]:
    """Coalesce ascending indices into (start, count) runs."""
    runs = []
    for i in sorted_idx:
        if runs and i == runs[-1][0] + runs[-1][1]:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((int(i), 1))
    return runs


# ---------------------------------------------------------------------------
# the pool

@dataclass
class _StoredChunk:
    tier: TierConfig
    geometry: tuple[int, int, int, int]  # L, N, H, D
    path: Path | None      # file-backed location
    blob: bytes | None     # in-memory location
    ranking: ImportanceRanking
    file_bytes: int
    modeled_write_s: float


class CachePool:
    """Chunk registry across tiers, with byte-accounted sparse fetches.

    Concurrent readers are safe; writes take a pool-level registry lock plus
    a per-chunk-id lock so a chunk id is serialized exactly once. Fetches may
    be issued from a dedicated transfer worker while compute proceeds.
    """

    def __init__(self):
        self._chunks: dict[str, _StoredChunk] = {}
        self._registry_lock = threading.Lock()
        self._id_locks: dict[str, threading.Lock] = {}
        self._stats_lock = threading.Lock()
        self.io_stats = {"bytes_read": 0, "reads": 0,
                         "bytes_written": 0, "writes": 0}

    def _count_io(self, key: str, n_bytes: int) -> None:
        with self._stats_lock:
            self.io_stats[f"bytes_{key}"] += n_bytes
            self.io_stats["reads" if key == "read" else "writes"] += 1

    # -- write path

    def put_chunk(self, chunk: KvChunk, ranking: ImportanceRanking,
                  tier: TierConfig) -> str:
        """Serialize a chunk (with its ranking) into the given tier."""
        if ranking.n_tokens != chunk.token_count or ranking.n_layers != chunk.n_layers:
            raise ShapeError("chunk and ranking disagree on N or L")
        cid = chunk.chunk_id
        with self._registry_lock:
            lock = self._id_locks.setdefault(cid, threading.Lock())
        with lock:
            if cid in self._chunks:
                raise AlreadyExists(f"chunk {cid!r} already stored")
            data = write_ctkv(chunk, ranking)
            path = None
            blob = None
            if tier.backing is not None:
                try:
                    root = Path(tier.backing)
                    root.mkdir(parents=True, exist_ok=True)
                    path = root / f"{cid}.ctkv"
                    path.write_bytes(data)
                except OSError as e:
                    raise IoError(f"failed to write chunk {cid!r}: {e}") from e
            else:
                blob = data
            stored = _StoredChunk(
                tier=tier,
                geometry=(chunk.n_layers, chunk.token_count,
                          chunk.n_heads, chunk.head_dim),
                path=path, blob=blob, ranking=ranking,
                file_bytes=len(data),
                modeled_write_s=tier.write_time(len(data)),
            )
            with self._registry_lock:
                self._chunks[cid] = stored
            self._count_io("written", len(data))
        return cid

    def attach_chunk_file(self, path: str | Path, tier: TierConfig) -> str:
        """Register an existing CTKV file (with ranking) under its stem id."""
        path = Path(path)
        cid = path.stem
        try:
            data = path.read_bytes()
        except OSError as e:
            raise IoError(f"cannot read {path}: {e}") from e
        chunk, ranking = read_ctkv(data, chunk_id=cid)
        if ranking is None:
            raise InvalidPlan(f"{path} has no ranking block; analyze it first")
        with self._registry_lock:
            if cid in self._chunks:
                raise AlreadyExists(f"chunk {cid!r} already stored")
            self._chunks[cid] = _StoredChunk(
                tier=tier,
                geometry=(chunk.n_layers, chunk.token_count,
                          chunk.n_heads, chunk.head_dim),
                path=path if tier.backing is not None else None,
                blob=None if tier.backing is not None else data,
                ranking=ranking, file_bytes=len(data),
                modeled_write_s=tier.write_time(len(data)),
            )
        return cid

    # -- lookups

    def _stored(self, chunk_id: str) -> _StoredChunk:
        try:
            return self._chunks[chunk_id]
        except KeyError:
            raise NotFound(f"chunk {chunk_id!r} not in pool") from None

    def chunk_ids(self) -> list[str]:
        return sorted(self._chunks)

    def geometry(self, chunk_id: str) -> tuple[int, int, int, int]:
        return self._stored(chunk_id).geometry

    def file_bytes(self, chunk_id: str) -> int:
        return self._stored(chunk_id).file_bytes

    def modeled_write_time(self, chunk_id: str) -> float:
        return self._stored(chunk_id).modeled_write_s

    def get_ranking(self, chunk_id: str) -> ImportanceRanking:
        return self._stored(chunk_id).ranking

    def _raw(self, stored: _StoredChunk) -> bytes:
        if stored.blob is not None:
            return stored.blob
        try:
            return stored.path.read_bytes()
        except OSError as e:
            raise IoError(f"failed to read {stored.path}: {e}") from e

    def get_full(self, chunk_id: str) -> KvChunk:
        """Deserialize the whole chunk, bit-exact."""
        stored = self._stored(chunk_id)
        data = self._raw(stored)
        self._count_io("read", len(data))
        chunk, _ = read_ctkv(data, chunk_id=chunk_id)
        return chunk

    # -- sparse path

    def plan_sparse_fetch(self, chunk_id: str, layer: int,
                          r: float) -> SparseFetchPlan:
        """Plan the layer's reused-KV byte ranges for recompute ratio r."""
        stored = self._stored(chunk_id)
        l, n, h, d = stored.geometry
        if not 0 <= layer < l:
            raise InvalidParam(f"layer {layer} out of range [0, {l})")
        keep = complement_for_ratio(stored.ranking, r)
        row = token_row_bytes(h, d)
        k_base = HEADER.size + layer * layer_bytes(n, h, d)
        v_base = k_base + n * row
        ranges: list[tuple[int, int]] = []
        for base in (k_base, v_base):
            for start, count in _runs(keep):
                ranges.append((base + start * row, count * row))
        # a K-block tail run can abut the V-block head run; merge those too
        merged: list[tuple[int, int]] = []
        for off, length in ranges:
            if merged and off == merged[-1][0] + merged[-1][1]:
                merged[-1] = (merged[-1][0], merged[-1][1] + length)
            else:
                merged.append((off, length))
        return SparseFetchPlan(
            chunk_id=chunk_id, layer=layer, keep_indices=keep,
            byte_ranges=tuple(merged),
            expected_bytes=len(keep) * row * 2,
        )

    def fetch_sparse(self, plan: SparseFetchPlan
                     ) -> tuple[SeqTensor | None, SeqTensor | None, np.ndarray]:
        """Read exactly the planned byte ranges and rebuild the kept rows.

        Returns (keys_raw, values, keep_indices); the tensors are None for
        an empty plan (full recompute). Actual bytes read always equal
        plan.expected_bytes.
        """
        stored = self._stored(plan.chunk_id)
        l, n, h, d = stored.geometry
        keep = plan.keep_indices
        row = token_row_bytes(h, d)
        if plan.expected_bytes != len(keep) * row * 2:
            raise InvalidPlan("expected_bytes disagrees with keep_indices")
        if len(keep) == 0:
            return None, None, keep

        pieces: list[bytes] = []
        if stored.path is not None:
            try:
                with open(stored.path, "rb") as f:
                    for off, length in plan.byte_ranges:
                        f.seek(off)
                        piece = f.read(length)
                        if len(piece) != length:
                            raise IoError(f"short read at {off} in {stored.path}")
                        pieces.append(piece)
            except OSError as e:
                raise IoError(f"failed sparse read of {stored.path}: {e}") from e
        else:
            blob = stored.blob
            for off, length in plan.byte_ranges:
                if off + length > len(blob):
                    raise InvalidPlan("byte range beyond stored chunk")
                pieces.append(blob[off: off + length])
        got = sum(len(p) for p in pieces)
        if got != plan.expected_bytes:
            raise IoError(f"read {got} bytes, planned {plan.expected_bytes}")
        self._count_io("read", got)

        flat = np.frombuffer(b"".join(pieces), dtype="<f4")
        per_side = len(keep) * h * d
        keys = flat[:per_side].reshape(len(keep), h, d)
        values = flat[per_side:].reshape(len(keep), h, d)
        return SeqTensor(keys.copy()), SeqTensor(values.copy()), keep

    def modeled_fetch_time(self, plan: SparseFetchPlan) -> float:
        tier = self._stored(plan.chunk_id).tier
        return tier.read_time(plan.expected_bytes)

    # -- profiling

    def measure_transfer_cost(self, tier: TierConfig, sample_bytes: int,
                              bytes_per_token: int | None = None) -> float:
        """Per-token transfer cost t_i for this tier, in seconds.

        Simulated tiers return the analytic model value; file-backed tiers
        time a real sequential read of sample_bytes. bytes_per_token defaults
        to the row geometry of any stored chunk.
        """
        if sample_bytes <= 0:
            raise InvalidParam("sample_bytes must be > 0")
        if bytes_per_token is None:
            ids = self.chunk_ids()
            if not ids:
                raise InvalidParam("pool empty: pass bytes_per_token explicitly")
            _, _, h, d = self.geometry(ids[0])
            bytes_per_token = token_row_bytes(h, d) * 2
        tokens = sample_bytes / bytes_per_token
        if tier.backing is None:
            return tier.read_time(sample_bytes) / tokens
        try:
            root = Path(tier.backing)
            root.mkdir(parents=True, exist_ok=True)
            probe = root / ".transfer_probe"
            payload = os.urandom(min(sample_bytes, 1 << 20))
            with open(probe, "wb") as f:
                written = 0
                while written < sample_bytes:
                    f.write(payload[: sample_bytes - written])
                    written += len(payload[: sample_bytes - written])
                f.flush()
                os.fsync(f.fileno())
            start = time.perf_counter()
            with open(probe, "rb") as f:
                while f.read(1 << 20):
                    pass
            elapsed = time.perf_counter() - start
            probe.unlink(missing_ok=True)
        except OSError as e:
            raise IoError(f"transfer probe failed on {tier.backing}: {e}") from e
        # cached page reads can be arbitrarily fast; keep t_i strictly positive
        return max(elapsed, 1e-12) / tokens
