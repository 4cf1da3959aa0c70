"""Seeded toy causal transformer used as the ground-truth oracle.

A small pre-norm attention-only model (MLP optional) with fixed random
weights. It supplies three forward modes: full prefill over a prompt,
isolated encoding of a chunk (producing the pre-RoPE KVs the cache pool
stores), and selective prefill, which forwards only the chosen recompute
tokens plus the suffix while every other token contributes its reused KVs
through deferred-RoPE scatter fusion. Attention records from the three
modes quantify how well selective recomputation restores the cross-chunk
attention that isolated encoding loses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidPlan, ShapeError
from .kvcore import KvChunk, SeqTensor
from .pipesim import fuse_layer
from .rope import RopeParams, rope_rotate
from .spectral import (ImportanceRanking, complement_for_ratio,
                       high_freq_scores, indices_for_ratio, rank_chunk,
                       rfft_seq)

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelConfig:
    """Weights are generated deterministically from the seed."""

    seed: int = 0
    n_layers: int = 4
    n_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 256
    mlp: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.head_dim, self.vocab_size) < 1:
            raise ShapeError("all model dims must be >= 1")
        if self.head_dim % 2 != 0:
            raise ShapeError("head_dim must be even")

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def rope_params(self) -> RopeParams:
        return RopeParams(head_dim=self.head_dim, base=self.rope_base)


class ToyModel:
    """Fixed-weight causal transformer; every forward mode is deterministic."""

    def __init__(self, config: ToyModelConfig):
        self.config = config
        hid = config.hidden_dim
        rng = np.random.default_rng(config.seed)
        scale = 1.0 / np.sqrt(hid)

        def w(*shape):
            return rng.uniform(-1.0, 1.0, size=shape) * scale

        self.embedding = w(config.vocab_size, hid)
        self.layers = []
        for _ in range(config.n_layers):
            layer = {"wq": w(hid, hid), "wk": w(hid, hid),
                     "wv": w(hid, hid), "wo": w(hid, hid)}
            if config.mlp:
                layer["w1"] = w(hid, 4 * hid)
                layer["w2"] = w(4 * hid, hid)
            self.layers.append(layer)
        self.w_out = w(hid, config.vocab_size)

    def _check_tokens(self, tokens: np.ndarray):
        if tokens.ndim != 1 or tokens.size < 1:
            raise ShapeError("token ids must be a non-empty 1-d array")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ShapeError("token id out of vocabulary")


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)


@dataclass(frozen=True)
class AttentionRecord:
    """Per-layer, per-head attention matrices for the recorded query rows.

    matrices[l] has shape [n_heads, n_queries, n_context];
    query_positions gives each row's global position.
    """

    matrices: tuple[np.ndarray, ...]
    query_positions: np.ndarray
    n_context: int

    def suffix_view(self, suffix_start: int) -> "AttentionRecord":
        """Rows at positions >= suffix_start, columns over the history only."""
        rows = np.flatnonzero(self.query_positions >= suffix_start)
        mats = tuple(m[:, rows, :suffix_start].copy() for m in self.matrices)
        return AttentionRecord(matrices=mats,
                               query_positions=self.query_positions[rows].copy(),
                               n_context=suffix_start)


def attention_deviation(a: AttentionRecord, b: AttentionRecord) -> float:
    """Mean Frobenius distance of the two records' attention matrices."""
    if len(a.matrices) != len(b.matrices):
        raise ShapeError("records have different layer counts")
    total, count = 0.0, 0
    for ma, mb in zip(a.matrices, b.matrices):
        if ma.shape != mb.shape:
            raise ShapeError(f"attention shape mismatch {ma.shape} vs {mb.shape}")
        for h in range(ma.shape[0]):
            total += np.linalg.norm(ma[h] - mb[h])
            count += 1
    return float(total / count)


@dataclass(frozen=True)
class PrefillResult:
    kv: tuple[tuple[SeqTensor, SeqTensor], ...]  # per layer (K post-RoPE, V)
    attention: AttentionRecord
    logits: np.ndarray            # [n_queries, vocab]
    query_positions: np.ndarray


def _run(model: ToyModel, tokens: np.ndarray, positions: np.ndarray,
         reused_per_layer=None, n_context: int | None = None):
    """Shared forward engine.

    With reused_per_layer=None the context is exactly the forwarded tokens.
    Otherwise each entry is (keys_raw, values, keep_global) and every layer
    scatter-fuses reused (deferred-RoPE) and recomputed KVs into a buffer of
    n_context positions before attention.
    """
    cfg = model.config
    h_dim, n_heads, d = cfg.hidden_dim, cfg.n_heads, cfg.head_dim
    a = tokens.size
    if n_context is None:
        n_context = a
    h = model.embedding[tokens]  # [A, hid]
    kv_out, k_raw_out, attn_out = [], [], []
    col_positions = (positions if reused_per_layer is None
                     else np.arange(n_context))
    causal = col_positions[None, :] <= positions[:, None]  # [A, N]

    for l, layer in enumerate(model.layers):
        x = _rms_norm(h)
        q = (x @ layer["wq"]).reshape(a, n_heads, d)
        k_raw = (x @ layer["wk"]).reshape(a, n_heads, d)
        v = (x @ layer["wv"]).reshape(a, n_heads, d)
        q_rot = rope_rotate(q, positions, cfg.rope_params)
        k_rot = rope_rotate(k_raw, positions, cfg.rope_params)

        if reused_per_layer is None:
            k_ctx, v_ctx = k_rot, v
        else:
            keys_keep, values_keep, keep_global = reused_per_layer[l]
            k_full, v_full = fuse_layer(
                reused=(keys_keep, values_keep, keep_global),
                recomputed=(SeqTensor(k_rot.astype(np.float32)),
                            SeqTensor(v.astype(np.float32)), positions),
                positions=keep_global, rope_params=cfg.rope_params,
                n=n_context)
            k_ctx = k_full.data.astype(np.float64)
            v_ctx = v_full.data.astype(np.float64)

        scores = np.einsum("ahd,nhd->han", q_rot, k_ctx) / np.sqrt(d)
        scores = np.where(causal[None, :, :], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        attn_out.append(weights)  # [H, A, N]

        ctx = np.einsum("han,nhd->ahd", weights, v_ctx).reshape(a, h_dim)
        h = h + ctx @ layer["wo"]
        if cfg.mlp:
            h = h + np.maximum(_rms_norm(h) @ layer["w1"], 0.0) @ layer["w2"]

        k_raw_out.append(k_raw)
        kv_out.append((SeqTensor(k_ctx.astype(np.float32)),
                       SeqTensor(v_ctx.astype(np.float32))))

    logits = h @ model.w_out
    return h, kv_out, k_raw_out, attn_out, logits


def full_prefill(model: ToyModel, tokens: Sequence[int]) -> PrefillResult:
    """Standard causal forward over the whole prompt; the baseline oracle."""
    toks = np.asarray(tokens, dtype=np.int64)
    model._check_tokens(toks)
    pos = np.arange(toks.size)
    _, kv, _, attn, logits = _run(model, toks, pos)
    record = AttentionRecord(matrices=tuple(attn), query_positions=pos,
                             n_context=toks.size)
    return PrefillResult(kv=tuple(kv), attention=record, logits=logits,
                         query_positions=pos)


def encode_chunk_isolated(model: ToyModel, tokens: Sequence[int],
                          chunk_id: str = "chunk") -> KvChunk:
    """Forward the chunk alone (local positions) and keep pre-RoPE KVs."""
    toks = np.asarray(tokens, dtype=np.int64)
    model._check_tokens(toks)
    pos = np.arange(toks.size)
    _, kv, k_raw, _, _ = _run(model, toks, pos)
    return KvChunk(
        chunk_id=chunk_id,
        keys_raw=tuple(SeqTensor(k.astype(np.float32)) for k in k_raw),
        values=tuple(v for _, v in kv),
        source_tokens=toks,
    )


def selective_prefill(model: ToyModel, chunks: Sequence[KvChunk],
                      rankings: Sequence[ImportanceRanking],
                      suffix_tokens: Sequence[int], r: float) -> PrefillResult:
    """Online reuse path: recompute the ratio-r selection plus the suffix.

    Chunks are concatenated in order and take their true global positions.
    Selected tokens and the suffix forward through the model; at every layer
    their attention spans the fused KV of reused (deferred-RoPE) and
    recomputed entries. At r=1 this reproduces full_prefill.
    """
    cfg = model.config
    if len(chunks) == 0 or len(chunks) != len(rankings):
        raise InvalidPlan("need one ranking per chunk")
    for chunk, ranking in zip(chunks, rankings):
        if ranking.n_tokens != chunk.token_count:
            raise InvalidPlan("ranking/chunk token counts disagree")
        if chunk.n_layers != cfg.n_layers:
            raise InvalidPlan("chunk layer count disagrees with model")
        if (chunk.n_heads, chunk.head_dim) != (cfg.n_heads, cfg.head_dim):
            raise ShapeError("chunk geometry disagrees with model")
        if chunk.source_tokens is None:
            raise InvalidPlan("chunk lacks source_tokens; cannot recompute")

    offsets = np.cumsum([0] + [c.token_count for c in chunks])
    history = int(offsets[-1])
    suffix = np.asarray(suffix_tokens, dtype=np.int64)
    n_context = history + suffix.size

    rec_parts, keep_parts = [], []
    active_tokens_parts = []
    for chunk, ranking, off in zip(chunks, rankings, offsets):
        rec_local = indices_for_ratio(ranking, r)
        keep_local = complement_for_ratio(ranking, r)
        rec_parts.append(rec_local + off)
        keep_parts.append(keep_local + off)
        active_tokens_parts.append(chunk.source_tokens[rec_local])
    rec_global = np.concatenate(rec_parts).astype(np.int64)
    keep_global = np.concatenate(keep_parts).astype(np.int64)
    active_positions = np.concatenate([rec_global, np.arange(history, n_context)])
    active_tokens = np.concatenate(
        active_tokens_parts + [suffix]) if suffix.size or rec_global.size else \
        np.empty(0, dtype=np.int64)
    order = np.argsort(active_positions, kind="stable")
    active_positions = active_positions[order]
    active_tokens = active_tokens[order]

    reused_per_layer = []
    for l in range(cfg.n_layers):
        if keep_global.size:
            keys = np.concatenate([
                c.keys_raw[l].data[k] for c, k, in zip(
                    chunks, (kp - off for kp, off in zip(keep_parts, offsets)))
            ])
            values = np.concatenate([
                c.values[l].data[kp - off]
                for c, kp, off in zip(chunks, keep_parts, offsets)
            ])
            reused_per_layer.append((SeqTensor(keys), SeqTensor(values),
                                     keep_global))
        else:
            reused_per_layer.append((None, None, keep_global))

    if active_tokens.size == 0:
        # pure reuse, no suffix: nothing is forwarded at all
        kv = []
        for keys_keep, values_keep, kg in reused_per_layer:
            k_full, v_full = fuse_layer(
                reused=(keys_keep, values_keep, kg),
                recomputed=(None, None, np.empty(0, dtype=np.int64)),
                positions=kg, rope_params=cfg.rope_params, n=n_context)
            kv.append((k_full, v_full))
        empty = np.empty(0, dtype=np.int64)
        record = AttentionRecord(
            matrices=tuple(np.zeros((cfg.n_heads, 0, n_context))
                           for _ in range(cfg.n_layers)),
            query_positions=empty, n_context=n_context)
        return PrefillResult(kv=tuple(kv), attention=record,
                             logits=np.zeros((0, cfg.vocab_size)),
                             query_positions=empty)

    model._check_tokens(active_tokens)
    _, kv, _, attn, logits = _run(model, active_tokens, active_positions,
                                  reused_per_layer=reused_per_layer,
                                  n_context=n_context)
    record = AttentionRecord(matrices=tuple(attn),
                             query_positions=active_positions,
                             n_context=n_context)
    return PrefillResult(kv=tuple(kv), attention=record, logits=logits,
                         query_positions=active_positions)


# ---------------------------------------------------------------------------
# spectrum reporting

def spectrum_report(chunk: KvChunk, n_bands: int = 10) -> dict[str, np.ndarray]:
    """Energy fraction per frequency band for the chunk's Keys and Values.

    Averaged over layers, heads and dims, with conjugate-symmetric interior
    bins double-weighted so a white-noise chunk reports near-flat bands.
    Reported for plotting; toy weights need not mimic trained-model spectra.
    """
    n = chunk.token_count
    n_freqs = n // 2 + 1
    weights = np.full(n_freqs, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    edges = [int(np.floor(b * n_freqs / n_bands)) for b in range(n_bands + 1)]
    out = {}
    for name, side in (("key", chunk.keys_raw), ("value", chunk.values)):
        per_bin = np.zeros(n_freqs)
        for t in side:
            spec = rfft_seq(t).to_complex()
            per_bin += (np.abs(spec) ** 2).reshape(n_freqs, -1).sum(axis=1)
        per_bin *= weights
        total = per_bin.sum()
        bands = np.array([per_bin[edges[b]:edges[b + 1]].sum()
                          for b in range(n_bands)])
        out[name] = bands / total if total > 0 else bands
    return out


# ---------------------------------------------------------------------------
# selection-strategy experiment (attention recovery)

STRATEGIES = ("lowfreq", "highfreq", "random", "none", "full")


def strategy_ranking(chunk: KvChunk, strategy: str, alpha: float = 0.5,
                     rng: np.random.Generator | None = None) -> ImportanceRanking:
    """Build the token order a selection strategy would recompute first."""
    if strategy in ("lowfreq", "none", "full"):
        return rank_chunk(chunk, alpha)
    if strategy == "highfreq":
        scores = np.stack([high_freq_scores(k, v, alpha)
                           for k, v in zip(chunk.keys_raw, chunk.values)])
        orders = np.stack([np.argsort(-row, kind="stable") for row in scores])
        agg = np.argsort(-scores.mean(axis=0), kind="stable")
        return ImportanceRanking(per_layer_scores=scores, per_layer_order=orders,
                                 aggregate_order=agg, alpha=alpha,
                                 n_tokens=chunk.token_count)
    if strategy == "random":
        if rng is None:
            raise InvalidPlan("random strategy needs an rng")
        n = chunk.token_count
        perm = rng.permutation(n)
        scores = np.tile((n - np.argsort(perm)).astype(np.float64), (chunk.n_layers, 1))
        orders = np.tile(perm, (chunk.n_layers, 1))
        return ImportanceRanking(per_layer_scores=scores, per_layer_order=orders,
                                 aggregate_order=perm, alpha=alpha, n_tokens=n)
    raise InvalidPlan(f"unknown strategy {strategy!r}")


def effective_ratio(strategy: str, r: float) -> float:
    if strategy == "none":
        return 0.0
    if strategy == "full":
        return 1.0
    return r


def run_selection_experiment(seeds: Sequence[int], r: float = 0.15,
                             strategy: str = "lowfreq",
                             chunk_tokens: Sequence[int] = (64, 64, 64),
                             suffix_len: int = 8,
                             alpha: float = 0.5,
                             mlp: bool = False) -> list[tuple[int, float]]:
    """Suffix-attention deviation from the full-recompute baseline, per seed.

    All strategies at one r share an identical recompute budget. Token ids
    and the random-selection permutation derive from the seed, so results
    are reproducible.
    """
    if strategy not in STRATEGIES:
        raise InvalidPlan(f"unknown strategy {strategy!r}")
    results = []
    for seed in seeds:
        cfg = ToyModelConfig(seed=seed, mlp=mlp)
        model = ToyModel(cfg)
        tok_rng = np.random.default_rng([seed, 1])
        sel_rng = np.random.default_rng([seed, 2])
        chunk_ids = [tok_rng.integers(0, cfg.vocab_size, size=n)
                     for n in chunk_tokens]
        suffix = tok_rng.integers(0, cfg.vocab_size, size=suffix_len)
        history = int(sum(chunk_tokens))

        full = full_prefill(model, np.concatenate(chunk_ids + [suffix]))
        chunks = [encode_chunk_isolated(model, t, chunk_id=f"s{seed}-c{j}")
                  for j, t in enumerate(chunk_ids)]
        rankings = [strategy_ranking(c, strategy, alpha, rng=sel_rng)
                    for c in chunks]
        sel = selective_prefill(model, chunks, rankings, suffix,
                                effective_ratio(strategy, r))
        dev = attention_deviation(full.attention.suffix_view(history),
                                  sel.attention.suffix_view(history))
        results.append((seed, dev))
    return results
