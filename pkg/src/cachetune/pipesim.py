"""Deterministic event simulator for the three-stream reuse pipeline.

Streams: `forward` (per-layer fusion barrier plus fixed overhead t_o),
`transfer` (sparse fetch of reused KVs from the cache pool), `recompute`
(projection of the selected tokens, including deferred-RoPE work on reused
keys). Layer 0 is the collection layer whose gather opens the pipeline,
layer 1 the check layer (its sparse-query filtering cost is folded into
t_o), and every later layer is a fusion layer.

Scheduling rules, per layer l:
  * transfer l is issued when layer l-1's window opens and the transfer
    stream is free; the first fetch starts at time zero and nothing can
    hide it (the start-up bubble).
  * layer l's window opens once layer l-1 has fused AND layer l's transfer
    has landed.
  * recompute l starts when the window opens (it consumes layer l-1 hidden
    states) and the recompute stream is free.
  * fusion l starts only after transfer l and recompute l both end, and
    after fusion l-1; it runs for t_o.

With uniform per-layer work this yields ttft = i_0 + sum_l max(c_l + t_o,
i_{l+1}), i.e. the steady-state roofline closed form plus explicitly kept
bubble terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cachepool import TierConfig, token_row_bytes
from .errors import InvalidPlan, ShapeError
from .kvcore import SeqTensor
from .rope import RopeParams, rope_apply
from .scheduler import HardwareProfile
from .spectral import ImportanceRanking, selection_count, indices_for_ratio

COLLECTION, CHECK, FUSION = "collection", "check", "fusion"


@dataclass(frozen=True)
class ChunkMeta:
    chunk_id: str
    n_tokens: int
    n_heads: int
    head_dim: int

    @classmethod
    def from_chunk(cls, chunk) -> "ChunkMeta":
        return cls(chunk.chunk_id, chunk.token_count,
                   chunk.n_heads, chunk.head_dim)


@dataclass(frozen=True)
class ChunkSegment:
    """One chunk's slot on the concatenated global token axis."""
    chunk_id: str
    offset: int
    n_tokens: int
    recompute_local: np.ndarray  # ascending local indices
    keep_local: np.ndarray


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    layer_class: str
    recompute_indices: np.ndarray  # global, ascending
    keep_indices: np.ndarray       # global, ascending
    rope_positions: np.ndarray     # global positions of the kept tokens


@dataclass(frozen=True)
class PipelinePlan:
    layers: tuple[LayerPlan, ...]
    segments: tuple[ChunkSegment, ...]
    n_tokens: int
    n_heads: int
    head_dim: int
    ratio: float

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_keep_bytes(self, layer: int) -> int:
        row = token_row_bytes(self.n_heads, self.head_dim)
        return len(self.layers[layer].keep_indices) * row * 2


@dataclass(frozen=True)
class TimelineEvent:
    stream: str
    layer: int
    start_s: float
    end_s: float
    label: str


@dataclass(frozen=True)
class Timeline:
    events: tuple[TimelineEvent, ...]
    ttft_s: float


def _layer_class(layer: int) -> str:
    if layer == 0:
        return COLLECTION
    if layer == 1:
        return CHECK
    return FUSION


def build_plan(chunk_metas: Sequence[ChunkMeta],
               rankings: Sequence[ImportanceRanking], r: float,
               n_layers: int) -> PipelinePlan:
    """Concatenate chunks on a global axis and split each at ratio r.

    Every chunk contributes the top ceil(r * N_j) tokens of its aggregate
    order to the recompute set; the complement becomes the per-layer fetch
    plan. The same split applies at every layer so one token subset flows
    through the whole pipeline.
    """
    if n_layers < 2:
        raise InvalidPlan("need at least collection and check layers (L >= 2)")
    if len(chunk_metas) == 0 or len(chunk_metas) != len(rankings):
        raise InvalidPlan("need one ranking per chunk")
    h, d = chunk_metas[0].n_heads, chunk_metas[0].head_dim
    segments = []
    rec_global, keep_global = [], []
    offset = 0
    for meta, ranking in zip(chunk_metas, rankings):
        if (meta.n_heads, meta.head_dim) != (h, d):
            raise ShapeError("chunks disagree on (n_heads, head_dim)")
        if ranking.n_tokens != meta.n_tokens:
            raise InvalidPlan(f"ranking N {ranking.n_tokens} != chunk N "
                              f"{meta.n_tokens} for {meta.chunk_id!r}")
        rec_local = indices_for_ratio(ranking, r)
        keep_local = np.setdiff1d(np.arange(meta.n_tokens), rec_local)
        segments.append(ChunkSegment(meta.chunk_id, offset, meta.n_tokens,
                                     rec_local, keep_local))
        rec_global.append(rec_local + offset)
        keep_global.append(keep_local + offset)
        offset += meta.n_tokens
    rec = np.concatenate(rec_global) if rec_global else np.empty(0, np.int64)
    keep = np.concatenate(keep_global) if keep_global else np.empty(0, np.int64)
    layers = tuple(
        LayerPlan(layer=l, layer_class=_layer_class(l),
                  recompute_indices=rec, keep_indices=keep,
                  rope_positions=keep.copy())
        for l in range(n_layers)
    )
    return PipelinePlan(layers=layers, segments=tuple(segments),
                        n_tokens=offset, n_heads=h, head_dim=d, ratio=r)


def synthetic_plan(chunk_tokens: Sequence[int], n_layers: int, r: float,
                   n_heads: int = 2, head_dim: int = 8) -> PipelinePlan:
    """Counts-only plan for timing studies: each chunk recomputes its first
    ceil(r * N_j) positions. Latency depends only on the split sizes, so the
    placeholder index choice is immaterial."""
    if n_layers < 2:
        raise InvalidPlan("need at least collection and check layers (L >= 2)")
    segments = []
    rec_global, keep_global = [], []
    offset = 0
    for n in chunk_tokens:
        k = selection_count(r, n)
        rec_local = np.arange(k, dtype=np.int64)
        keep_local = np.arange(k, n, dtype=np.int64)
        segments.append(ChunkSegment(f"synthetic-{offset}", offset, n,
                                     rec_local, keep_local))
        rec_global.append(rec_local + offset)
        keep_global.append(keep_local + offset)
        offset += n
    rec = np.concatenate(rec_global)
    keep = np.concatenate(keep_global)
    layers = tuple(
        LayerPlan(layer=l, layer_class=_layer_class(l),
                  recompute_indices=rec, keep_indices=keep,
                  rope_positions=keep.copy())
        for l in range(n_layers)
    )
    return PipelinePlan(layers=layers, segments=tuple(segments),
                        n_tokens=offset, n_heads=n_heads, head_dim=head_dim,
                        ratio=r)


def transferred_bytes(plan: PipelinePlan) -> int:
    """Total reused-KV bytes moved for the whole request."""
    return sum(plan.layer_keep_bytes(l) for l in range(plan.n_layers))


def simulate(plan: PipelinePlan, p: HardwareProfile,
             tier: TierConfig | None = None) -> Timeline:
    """Schedule the plan's events and return the resulting timeline.

    Transfer durations come from the tier's bandwidth/latency model when a
    tier is given, else from keep-count * t_i. Deterministic given inputs.
    """
    L = plan.n_layers
    i_dur = []
    for l in range(L):
        if tier is not None:
            i_dur.append(tier.read_time(plan.layer_keep_bytes(l)))
        else:
            i_dur.append(len(plan.layers[l].keep_indices) * p.t_i)
    c_dur = [len(plan.layers[l].recompute_indices) * p.t_c for l in range(L)]

    start_t = [0.0] * L
    end_t = [0.0] * L
    start_r = [0.0] * L
    end_r = [0.0] * L
    start_f = [0.0] * L
    end_f = [0.0] * L

    end_t[0] = i_dur[0]
    window_open = end_t[0]  # collection gather lands
    for l in range(L):
        start_r[l] = max(end_r[l - 1] if l else 0.0, window_open)
        end_r[l] = start_r[l] + c_dur[l]
        start_f[l] = max(end_f[l - 1] if l else 0.0, end_r[l], end_t[l])
        end_f[l] = start_f[l] + p.t_o
        if l + 1 < L:
            # next fetch was issued when this window opened
            start_t[l + 1] = max(end_t[l], window_open)
            end_t[l + 1] = start_t[l + 1] + i_dur[l + 1]
            window_open = max(end_f[l], end_t[l + 1])

    events = []
    for l in range(L):
        cls = plan.layers[l].layer_class
        events.append(TimelineEvent("transfer", l, start_t[l], end_t[l],
                                    "gather" if l == 0 else "prefetch"))
        events.append(TimelineEvent("recompute", l, start_r[l], end_r[l],
                                    "recompute+rope"))
        events.append(TimelineEvent("forward", l, start_f[l], end_f[l],
                                    f"fuse:{cls}"))
    return Timeline(events=tuple(events), ttft_s=end_f[L - 1])


def serialized_ttft(plan: PipelinePlan, p: HardwareProfile,
                    tier: TierConfig | None = None) -> float:
    """Latency with no overlap at all: the sum of every stream's work."""
    total = 0.0
    for l in range(plan.n_layers):
        if tier is not None:
            total += tier.read_time(plan.layer_keep_bytes(l))
        else:
            total += len(plan.layers[l].keep_indices) * p.t_i
        total += len(plan.layers[l].recompute_indices) * p.t_c + p.t_o
    return total


def validate_timeline(timeline: Timeline, plan: PipelinePlan) -> list[str]:
    """Return dependency/ordering violations (empty list when sound)."""
    problems = []
    by_stream: dict[str, list[TimelineEvent]] = {}
    by_key: dict[tuple[str, int], TimelineEvent] = {}
    for ev in timeline.events:
        by_stream.setdefault(ev.stream, []).append(ev)
        by_key[(ev.stream, ev.layer)] = ev
        if ev.end_s < ev.start_s:
            problems.append(f"{ev.stream}[{ev.layer}] ends before it starts")
    for stream, evs in by_stream.items():
        evs = sorted(evs, key=lambda e: e.layer)
        for prev, cur in zip(evs, evs[1:]):
            if cur.start_s < prev.end_s - 1e-12:
                problems.append(f"{stream} events {prev.layer}->{cur.layer} overlap")
    for l in range(plan.n_layers):
        fuse = by_key[("forward", l)]
        for dep in ("transfer", "recompute"):
            if fuse.start_s < by_key[(dep, l)].end_s - 1e-12:
                problems.append(f"fusion[{l}] starts before {dep}[{l}] ends")
    if abs(timeline.ttft_s - max(e.end_s for e in timeline.events)) > 1e-12:
        problems.append("ttft_s is not the last event end")
    return problems


def timeline_to_csv(timeline: Timeline) -> str:
    lines = ["stream,layer,start_s,end_s,label"]
    for ev in timeline.events:
        lines.append(f"{ev.stream},{ev.layer},{ev.start_s!r},{ev.end_s!r},{ev.label}")
    return "\n".join(lines) + "\n"


def summarize(plan: PipelinePlan, timeline: Timeline) -> str:
    rec_tokens = sum(len(l.recompute_indices) for l in plan.layers) // plan.n_layers
    return (f"ttft_s={timeline.ttft_s!r} "
            f"transferred_bytes={transferred_bytes(plan)} "
            f"recompute_tokens_per_layer={rec_tokens} "
            f"n_tokens={plan.n_tokens} n_layers={plan.n_layers} r={plan.ratio!r}")


@dataclass(frozen=True)
class RequestSpec:
    """Synthetic calibration request: chunk sizes plus model geometry."""
    chunk_tokens: tuple[int, ...]
    n_layers: int
    n_heads: int = 2
    head_dim: int = 8

    @property
    def n_tokens(self) -> int:
        return sum(self.chunk_tokens)


def make_sim_evaluator(p: HardwareProfile, tier: TierConfig | None = None):
    """TTFT evaluator over RequestSpec samples, backed by the simulator."""
    def evaluator(request: RequestSpec, r: float) -> float:
        plan = synthetic_plan(request.chunk_tokens, request.n_layers, r,
                              request.n_heads, request.head_dim)
        return simulate(plan, p, tier=tier).ttft_s
    return evaluator


# ---------------------------------------------------------------------------
# scatter fusion

def fuse_layer(reused: tuple[SeqTensor | None, SeqTensor | None, Sequence[int]],
               recomputed: tuple[SeqTensor | None, SeqTensor | None, Sequence[int]],
               positions: Sequence[int], rope_params: RopeParams,
               n: int) -> tuple[SeqTensor, SeqTensor]:
    """Assemble one layer's complete KV from reused and recomputed parts.

    Reused keys are rotated to their true global positions first; both parts
    then scatter into NaN-initialized working buffers covering all n tokens.
    The index sets must partition [0, n).
    """
    k_reuse, v_reuse, keep_idx = reused
    k_new, v_new, rec_idx = recomputed
    keep = np.asarray(keep_idx, dtype=np.int64)
    rec = np.asarray(rec_idx, dtype=np.int64)
    merged = np.concatenate([keep, rec])
    if merged.size != n or not np.array_equal(np.sort(merged), np.arange(n)):
        raise InvalidPlan("keep/recompute sets must partition [0, n)")

    parts = [t for t in (k_reuse, k_new) if t is not None]
    if not parts:
        raise InvalidPlan("fusing two empty parts")
    h, d = parts[0].n_heads, parts[0].head_dim
    k_buf = np.full((n, h, d), np.nan, dtype=np.float32)
    v_buf = np.full((n, h, d), np.nan, dtype=np.float32)
    if keep.size:
        pos = np.asarray(positions)
        if pos.shape != (keep.size,):
            raise ShapeError(f"{pos.size} positions for {keep.size} reused tokens")
        k_buf[keep] = rope_apply(k_reuse, pos, rope_params).data
        v_buf[keep] = v_reuse.data
    if rec.size:
        k_buf[rec] = k_new.data
        v_buf[rec] = v_new.data
    if np.isnan(k_buf).any() or np.isnan(v_buf).any():
        raise InvalidPlan("fusion left untouched rows")  # unreachable given partition
    return SeqTensor(k_buf), SeqTensor(v_buf)
