"""Command-line surface: offline analysis, pool management, calibration,
simulation and report emission.

Every subcommand is deterministic given its flags plus the seed (env var
CACHETUNE_SEED overrides the default); wall-clock measurements are confined
to `# meta:` lines so primary outputs compare byte-for-byte across runs.
Exit codes: 0 ok, 2 input error, 3 environment/profiling error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import cachepool, pipesim, scheduler, spectral, toymodel
from .cachepool import CachePool, TierConfig, read_ctkv, resolve_tier, write_ctkv
from .errors import CacheTuneError, InvalidParam, ProfileError
from .kvcore import DtypeCode, KvChunk, SeqTensor
from .scheduler import HardwareProfile, SearchConfig
from .spectral import rank_chunk, selection_stability

DEFAULT_SEED = 7
DEFAULT_LAYERS = 4
DEFAULT_HEADS = 2
DEFAULT_HEAD_DIM = 8
DEFAULT_T_C = 2e-6
DEFAULT_T_O = 2e-6


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CACHETUNE_SEED")
    return int(env) if env else DEFAULT_SEED


def _parse_synthetic(spec: str) -> dict[str, int]:
    """Parse 'N=64,H=2,D=8,L=4,seed=7' into ints."""
    out = {}
    for part in spec.split(","):
        if "=" not in part:
            raise InvalidParam(f"bad synthetic field {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = int(v)
    for key in ("N", "H", "D", "L"):
        if key not in out:
            raise InvalidParam(f"synthetic spec missing {key}")
    return out


def synthetic_chunk(n: int, h: int, d: int, l: int, seed: int,
                    chunk_id: str = "synthetic") -> KvChunk:
    """Seeded random chunk: standard-normal KV lanes."""
    rng = np.random.default_rng(seed)
    keys = tuple(SeqTensor(rng.standard_normal((n, h, d)).astype(np.float32))
                 for _ in range(l))
    values = tuple(SeqTensor(rng.standard_normal((n, h, d)).astype(np.float32))
                   for _ in range(l))
    return KvChunk(chunk_id=chunk_id, keys_raw=keys, values=values,
                   dtype_code=DtypeCode.F32)


def _load_or_make_chunk(args, seed: int) -> tuple[KvChunk, Path]:
    if args.synthetic:
        spec = _parse_synthetic(args.synthetic)
        chunk = synthetic_chunk(spec["N"], spec["H"], spec["D"], spec["L"],
                                spec.get("seed", seed))
        path = Path(args.out or "synthetic.ctkv")
        return chunk, path
    if not args.chunk_file:
        raise InvalidParam("pass a chunk file or --synthetic")
    path = Path(args.chunk_file)
    chunk, _ = read_ctkv(path.read_bytes(), chunk_id=path.stem)
    return chunk, path


def _default_profile(tier: TierConfig | None, t_c: float, t_o: float,
                     t_i: float | None) -> HardwareProfile:
    if t_i is None:
        if tier is not None:
            bpt = cachepool.token_row_bytes(DEFAULT_HEADS, DEFAULT_HEAD_DIM) * 2
            sample = 1 << 20
            t_i = tier.read_time(sample) * bpt / sample
        else:
            t_i = 3e-6
    return HardwareProfile(t_c=t_c, t_i=t_i, t_o=t_o)


# ---------------------------------------------------------------------------
# subcommands

def cmd_analyze(args) -> int:
    seed = _seed(args)
    chunk, path = _load_or_make_chunk(args, seed)
    ranking = rank_chunk(chunk, args.alpha)
    path.write_bytes(write_ctkv(chunk, ranking))

    n = ranking.n_tokens
    k = spectral.selection_count(args.top_ratio, n)
    top = ranking.aggregate_order[:k]
    mean_scores = ranking.per_layer_scores.mean(axis=0)
    print(f"analyzed {path} alpha={args.alpha!r} n_tokens={n} "
          f"n_layers={ranking.n_layers}")
    print(f"top-{k} tokens (ratio {args.top_ratio!r}), descending importance:")
    print("rank,token,mean_score")
    for i, t in enumerate(top):
        print(f"{i},{t},{float(mean_scores[t])!r}")
    print("per-layer score summary:")
    print("layer,min,mean,max")
    for l, row in enumerate(ranking.per_layer_scores):
        print(f"{l},{float(row.min())!r},{float(row.mean())!r},{float(row.max())!r}")
    print("alpha stability (jaccard of top-15% selections):")
    for (a, b), j in selection_stability(chunk).items():
        print(f"alpha {a} vs {b}: jaccard={j:.4f}")
    return 0


def cmd_pool_put(args) -> int:
    tier = resolve_tier(args.tier)
    path = Path(args.chunk_file)
    chunk, ranking = read_ctkv(path.read_bytes(), chunk_id=path.stem)
    if ranking is None:
        raise InvalidParam(f"{path} has no ranking block; run analyze first")
    pool = CachePool()
    cid = pool.put_chunk(chunk, ranking, tier)
    print(f"stored chunk_id={cid} tier={tier.kind} "
          f"bytes={pool.file_bytes(cid)} "
          f"modeled_write_s={pool.modeled_write_time(cid)!r}")
    return 0


def cmd_pool_fetch(args) -> int:
    tier = resolve_tier(args.tier)
    pool = CachePool()
    if tier.backing is None:
        raise InvalidParam("pool-fetch needs a file-backed tier (backing=dir)")
    target = Path(tier.backing) / f"{args.chunk_id}.ctkv"
    pool.attach_chunk_file(target, tier)
    plan = pool.plan_sparse_fetch(args.chunk_id, args.layer, args.r)
    keys, values, keep = pool.fetch_sparse(plan)
    print(f"fetched chunk_id={args.chunk_id} layer={args.layer} r={args.r!r}")
    print(f"keep_tokens={len(keep)} expected_bytes={plan.expected_bytes} "
          f"ranges={len(plan.byte_ranges)} "
          f"modeled_fetch_s={pool.modeled_fetch_time(plan)!r}")
    if keys is not None:
        print(f"keys_norm={float(np.linalg.norm(keys.data))!r} "
              f"values_norm={float(np.linalg.norm(values.data))!r}")
    return 0


def cmd_calibrate(args) -> int:
    tier = resolve_tier(args.tier)
    cfg = SearchConfig(r_min=args.r_min, r_max=args.r_max, epsilon=args.epsilon)
    profile = _default_profile(tier, args.t_c, args.t_o, args.t_i)
    chunk_tokens = tuple(int(x) for x in args.chunks.split(","))
    cal_set = [pipesim.RequestSpec(chunk_tokens=chunk_tokens,
                                   n_layers=args.layers,
                                   n_heads=DEFAULT_HEADS,
                                   head_dim=DEFAULT_HEAD_DIM)
               for _ in range(args.cal_n)]
    if args.evaluator == "sim":
        evaluator = pipesim.make_sim_evaluator(profile, tier=tier)
    else:
        evaluator = _real_evaluator(profile, tier, _seed(args))
    report = scheduler.calibrate(CachePool(), tier, evaluator, cal_set, cfg,
                                 profile=profile)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"r0={report.r0!r} r_star={report.r_star!r} "
          f"eval_count={report.eval_count}")
    return 0


def _real_evaluator(profile: HardwareProfile, tier: TierConfig, seed: int):
    """Wall-clock evaluator: times a real sparse fetch plus toy recompute."""
    import time

    model = toymodel.ToyModel(toymodel.ToyModelConfig(seed=seed))
    pool = CachePool()
    rng = np.random.default_rng(seed)

    def evaluator(request: pipesim.RequestSpec, r: float) -> float:
        start = time.perf_counter()
        for j, n in enumerate(request.chunk_tokens):
            cid = f"cal-{j}-{n}"
            if cid not in pool.chunk_ids():
                toks = rng.integers(0, model.config.vocab_size, size=n)
                chunk = toymodel.encode_chunk_isolated(model, toks, chunk_id=cid)
                pool.put_chunk(chunk, rank_chunk(chunk), tier)
            for layer in range(request.n_layers):
                pool.fetch_sparse(pool.plan_sparse_fetch(cid, layer, r))
            toks = pool.get_full(cid).source_tokens
        # recompute cost: forward the selected fraction of each chunk
        for j, n in enumerate(request.chunk_tokens):
            k = spectral.selection_count(r, n)
            if k:
                toymodel.full_prefill(
                    model, rng.integers(0, model.config.vocab_size, size=k))
        return time.perf_counter() - start

    return evaluator


def _parse_sweep(spec: str) -> np.ndarray:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise InvalidParam(f"bad sweep spec {spec!r}, want lo:hi:step")
    if step <= 0 or hi < lo:
        raise InvalidParam(f"bad sweep spec {spec!r}")
    count = int(round((hi - lo) / step))
    return np.array([min(lo + i * step, hi) for i in range(count + 1)])


def cmd_simulate(args) -> int:
    tier = resolve_tier(args.tier) if args.tier else None
    profile = _default_profile(tier, args.t_c, args.t_o, args.t_i)
    chunk_tokens = tuple(int(x) for x in args.chunks.split(","))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        rows = ["r,ttft_s,transferred_bytes"]
        points = []
        for r in _parse_sweep(args.sweep):
            plan = pipesim.synthetic_plan(chunk_tokens, args.layers, float(r),
                                          DEFAULT_HEADS, DEFAULT_HEAD_DIM)
            tl = pipesim.simulate(plan, profile, tier=tier)
            rows.append(f"{float(r)!r},{tl.ttft_s!r},"
                        f"{pipesim.transferred_bytes(plan)}")
            points.append((float(r), tl.ttft_s))
        csv_path = out_dir / "sweep.csv"
        csv_path.write_text("\n".join(rows) + "\n")
        best = min(points, key=lambda p: p[1])
        print(f"wrote {csv_path}")
        print(f"sweep_min r={best[0]!r} ttft_s={best[1]!r}")
        if args.svg:
            svg_path = out_dir / "sweep.svg"
            svg_path.write_text(_svg_curve(points, "recompute ratio r",
                                           "ttft (s)"))
            print(f"wrote {svg_path}")
        return 0

    plan = pipesim.synthetic_plan(chunk_tokens, args.layers, args.r,
                                  DEFAULT_HEADS, DEFAULT_HEAD_DIM)
    tl = pipesim.simulate(plan, profile, tier=tier)
    csv_path = out_dir / "timeline.csv"
    csv_path.write_text(pipesim.timeline_to_csv(tl))
    print(f"wrote {csv_path}")
    print(pipesim.summarize(plan, tl))
    if args.svg:
        svg_path = out_dir / "timeline.svg"
        svg_path.write_text(_svg_gantt(tl))
        print(f"wrote {svg_path}")
    return 0


def cmd_attn_experiment(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    strategies = args.strategy.split(",")
    rows = ["strategy,seed,deviation"]
    means = []
    for strategy in strategies:
        results = toymodel.run_selection_experiment(
            seeds, r=args.r, strategy=strategy,
            chunk_tokens=tuple(int(x) for x in args.chunks.split(",")),
            suffix_len=args.suffix)
        for seed, dev in results:
            rows.append(f"{strategy},{seed},{dev!r}")
        mean = sum(d for _, d in results) / len(results)
        means.append((strategy, mean))
        rows.append(f"{strategy},mean,{mean!r}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    sys.stdout.write(text)
    for strategy, mean in means:
        print(f"mean_deviation {strategy}={mean!r}")
    return 0


def cmd_spectrum_report(args) -> int:
    seed = _seed(args)
    chunk, _ = _load_or_make_chunk(args, seed) if (args.chunk_file or
                                                   args.synthetic) else (None, None)
    if chunk is None:
        chunk = synthetic_chunk(64, DEFAULT_HEADS, DEFAULT_HEAD_DIM,
                                DEFAULT_LAYERS, seed)
    report = toymodel.spectrum_report(chunk)
    rows = ["band,key_fraction,value_fraction"]
    for b in range(len(report["key"])):
        rows.append(f"{b + 1},{float(report['key'][b])!r},"
                    f"{float(report['value'][b])!r}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# deterministic SVG emission (plots are conveniences; CSV is the contract)

_STREAM_COLORS = {"transfer": "#1f77b4", "recompute": "#ff7f0e",
                  "forward": "#2ca02c"}


def _svg_header(w: int, h: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
            f'height="{h}" viewBox="0 0 {w} {h}">',
            f'<rect width="{w}" height="{h}" fill="white"/>']


def _svg_curve(points: list[tuple[float, float]], xlabel: str,
               ylabel: str) -> str:
    w, h, pad = 640, 400, 50
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = lambda x: pad + (x - x0) / (x1 - x0 or 1) * (w - 2 * pad)
    sy = lambda y: h - pad - (y - y0) / (y1 - y0 or 1) * (h - 2 * pad)
    path = " ".join(f"{'M' if i == 0 else 'L'}{sx(x):.2f},{sy(y):.2f}"
                    for i, (x, y) in enumerate(points))
    parts = _svg_header(w, h)
    parts.append(f'<path d="{path}" fill="none" stroke="#1f77b4" '
                 f'stroke-width="2"/>')
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
                     f'fill="#1f77b4"/>')
    parts.append(f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" '
                 f'font-size="14">{xlabel}</text>')
    parts.append(f'<text x="14" y="{h / 2:.0f}" text-anchor="middle" '
                 f'font-size="14" transform="rotate(-90 14 {h / 2:.0f})">'
                 f'{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _svg_gantt(timeline: pipesim.Timeline) -> str:
    w, h, pad, row_h = 800, 220, 60, 40
    streams = ["transfer", "recompute", "forward"]
    t1 = timeline.ttft_s or 1.0
    sx = lambda t: pad + t / t1 * (w - 2 * pad)
    parts = _svg_header(w, h)
    for i, stream in enumerate(streams):
        y = pad + i * row_h
        parts.append(f'<text x="8" y="{y + row_h / 2:.0f}" '
                     f'font-size="12">{stream}</text>')
        for ev in timeline.events:
            if ev.stream != stream or ev.end_s <= ev.start_s:
                continue
            x, x2 = sx(ev.start_s), sx(ev.end_s)
            parts.append(
                f'<rect x="{x:.2f}" y="{y + 6}" width="{max(x2 - x, 0.5):.2f}" '
                f'height="{row_h - 12}" fill="{_STREAM_COLORS[stream]}" '
                f'stroke="black" stroke-width="0.5"><title>layer '
                f'{ev.layer}: {ev.label}</title></rect>')
    parts.append(f'<text x="{w / 2:.0f}" y="{h - 10}" text-anchor="middle" '
                 f'font-size="12">time, 0 .. {t1!r} s</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cachetune",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        description="KV-chunk frequency analysis, tiered cache pool, "
                    "pipeline simulation and recompute-ratio calibration.")
    p.add_argument("--seed", type=int, default=None,
                   help="global seed (default: $CACHETUNE_SEED or 7)")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="rank a chunk's tokens and store the "
                                       "ranking in its CTKV file")
    a.add_argument("chunk_file", nargs="?", help="CTKV file to update in place")
    a.add_argument("--synthetic", help="N=..,H=..,D=..,L=..[,seed=..]")
    a.add_argument("--out", help="output path for --synthetic")
    a.add_argument("--alpha", type=float, default=spectral.DEFAULT_ALPHA)
    a.add_argument("--top-ratio", type=float, default=0.15)
    a.set_defaults(func=cmd_analyze)

    pp = sub.add_parser("pool-put", help="store an analyzed chunk in a tier")
    pp.add_argument("chunk_file")
    pp.add_argument("--tier", required=True, help="preset name or config file")
    pp.set_defaults(func=cmd_pool_put)

    pf = sub.add_parser("pool-fetch", help="sparse-fetch a stored chunk layer")
    pf.add_argument("chunk_id")
    pf.add_argument("--tier", required=True)
    pf.add_argument("--layer", type=int, default=0)
    pf.add_argument("--r", type=float, default=0.15)
    pf.set_defaults(func=cmd_pool_fetch)

    c = sub.add_parser("calibrate", help="search the TTFT-optimal ratio")
    c.add_argument("--tier", required=True)
    c.add_argument("--cal-n", type=int, default=10)
    c.add_argument("--epsilon", type=float, default=0.01)
    c.add_argument("--r-min", type=float, default=0.15)
    c.add_argument("--r-max", type=float, default=0.9)
    c.add_argument("--evaluator", choices=("sim", "real"), default="sim")
    c.add_argument("--chunks", default="64,64,64",
                   help="token counts of the calibration request's chunks")
    c.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    c.add_argument("--t-c", type=float, default=DEFAULT_T_C)
    c.add_argument("--t-o", type=float, default=DEFAULT_T_O)
    c.add_argument("--t-i", type=float, default=None)
    c.add_argument("--out", help="write the report here")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="simulate the reuse pipeline")
    s.add_argument("--chunks", default="64,64,64")
    s.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    s.add_argument("--tier", default=None)
    s.add_argument("--t-c", type=float, default=DEFAULT_T_C)
    s.add_argument("--t-o", type=float, default=DEFAULT_T_O)
    s.add_argument("--t-i", type=float, default=None)
    s.add_argument("--r", type=float, default=0.15)
    s.add_argument("--sweep", help="lo:hi:step over r")
    s.add_argument("--out-dir", default=".")
    s.add_argument("--svg", action="store_true")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("attn-experiment",
                       help="attention-recovery comparison across strategies")
    e.add_argument("--seeds", default=",".join(str(s) for s in range(25)))
    e.add_argument("--r", type=float, default=0.15)
    e.add_argument("--strategy", default="lowfreq",
                   help="comma list from: " + ",".join(toymodel.STRATEGIES))
    e.add_argument("--chunks", default="64,64,64")
    e.add_argument("--suffix", type=int, default=8)
    e.add_argument("--out")
    e.set_defaults(func=cmd_attn_experiment)

    sr = sub.add_parser("spectrum-report", help="per-band KV energy fractions")
    sr.add_argument("chunk_file", nargs="?")
    sr.add_argument("--synthetic")
    sr.add_argument("--out")
    sr.set_defaults(func=cmd_spectrum_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProfileError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CacheTuneError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
