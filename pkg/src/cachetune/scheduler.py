"""Hardware-aware co-scheduling of recomputation and cache transfer.

Per-layer latency follows a roofline: the compute arm grows with the
recompute ratio r while the transfer arm shrinks, and the layer pays the
slower of the two plus a fixed overhead. The analytic crossover
r0 = t_i / (t_c + t_i) seeds a golden-section search over a measured (or
simulated) mean-TTFT objective, which absorbs the second-order effects the
closed form ignores.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence


from .errors import InvalidParam, ObjectiveError, ProfileError

GOLDEN_PHI = (math.sqrt(5.0) - 1.0) / 2.0  # ~0.618


@dataclass(frozen=True)
class HardwareProfile:
    """Measured per-token costs: recompute t_c, transfer t_i, per-layer overhead t_o."""

    t_c: float  # seconds per token per layer, recompute
    t_i: float  # seconds per token per layer, effective transfer
    t_o: float = 0.0  # seconds per layer, fixed pipeline overhead

    def __post_init__(self):
        if self.t_c <= 0 or self.t_i <= 0:
            raise InvalidParam("t_c and t_i must be > 0")
        if self.t_o < 0:
            raise InvalidParam("t_o must be >= 0")


@dataclass(frozen=True)
class SearchConfig:
    """Ratio search interval and tolerance.

    r_min is the quality-preserving lower bound (15% by default): on fast
    media the analytic optimum can collapse toward zero recomputation, which
    costs accuracy, so neither the prior nor the search may go below it.
    """

    r_min: float = 0.15
    r_max: float = 0.9
    epsilon: float = 0.01
    phi: float = GOLDEN_PHI

    def __post_init__(self):
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise InvalidParam("need 0 <= r_min <= r_max <= 1")
        if self.epsilon <= 0:
            raise InvalidParam("epsilon must be > 0")
        if abs(self.phi - GOLDEN_PHI) > 1e-12:
            raise InvalidParam("phi must be (sqrt(5)-1)/2")


def per_layer_latency(r: float, n: int, p: HardwareProfile) -> float:
    """max(r*N*t_c, (1-r)*N*t_i) + t_o for one layer."""
    if not 0.0 <= r <= 1.0:
        raise InvalidParam(f"ratio must be in [0, 1], got {r}")
    return max(r * n * p.t_c, (1.0 - r) * n * p.t_i) + p.t_o


def ttft_model(r: float, n: int, n_layers: int, p: HardwareProfile) -> float:
    """Steady-state TTFT of the overlapped pipeline, bubble terms neglected."""
    if n_layers < 1:
        raise InvalidParam("n_layers must be >= 1")
    return n_layers * per_layer_latency(r, n, p)


def roofline_r0(p: HardwareProfile, cfg: SearchConfig) -> float:
    """Analytic crossover t_i/(t_c+t_i), clipped into [r_min, r_max]."""
    r0 = p.t_i / (p.t_c + p.t_i)
    return min(max(r0, cfg.r_min), cfg.r_max)


def eval_mean_ttft(evaluator: Callable[[object, float], float],
                   cal_set: Sequence[object], r: float) -> float:
    """Mean of evaluator(sample, r) over the calibration set."""
    if len(cal_set) == 0:
        raise InvalidParam("calibration set is empty")
    return sum(evaluator(s, r) for s in cal_set) / len(cal_set)


def gss_optimize(f: Callable[[float], float], r0: float,
                 cfg: SearchConfig
                 ) -> tuple[float, int, list[tuple[float, float, float, float]]]:
    """Golden-section search warm-started with the roofline prior.

    The prior replaces whichever golden probe lies in its half of the
    interval; every loop iteration evaluates exactly one new point and
    shrinks the bracket until its width drops below epsilon. Returns the
    bracket midpoint, the evaluation count, and the probe trace as
    (a, b, r, f(r)) rows.
    """
    a, b = cfg.r_min, cfg.r_max
    if not a <= r0 <= b:
        raise InvalidParam(f"prior {r0} outside [{a}, {b}]")
    phi = cfg.phi
    trace: list[tuple[float, float, float, float]] = []

    def probe(x: float) -> float:
        fx = f(x)
        if not math.isfinite(fx):
            raise ObjectiveError(f"objective returned {fx!r} at r={x}")
        trace.append((a, b, x, fx))
        return fx

    if b - a < cfg.epsilon:
        return (a + b) / 2.0, 0, trace

    if r0 <= (a + b) / 2.0:
        x1, x2 = r0, a + phi * (b - a)
    else:
        x1, x2 = b - phi * (b - a), r0
    # a prior clipped onto an interval endpoint cannot bracket anything;
    # fall back to the standard golden probe so the shrink rate (and the
    # evaluation budget) is preserved
    if x1 <= a:
        x1 = b - phi * (b - a)
    if x2 >= b:
        x2 = a + phi * (b - a)
    f1, f2 = probe(x1), probe(x2)
    if x1 > x2:
        x1, x2, f1, f2 = x2, x1, f2, f1
    while abs(b - a) >= cfg.epsilon:
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - phi * (b - a)
            f1 = probe(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (b - a)
            f2 = probe(x2)
        # a surviving warm-start probe is not at a golden position, so the
        # fresh probe can land on its far side; restore x1 <= x2 so each cut
        # keeps the minimum bracketed
        if x1 > x2:
            x1, x2, f1, f2 = x2, x1, f2, f1
    return (a + b) / 2.0, len(trace), trace


def gss_eval_budget(cfg: SearchConfig) -> int:
    """Upper bound on gss_optimize evaluations for the configured interval."""
    width = cfg.r_max - cfg.r_min
    if width < cfg.epsilon:
        return 2
    return math.ceil(math.log(width / cfg.epsilon) / math.log(1.0 / cfg.phi)) + 2


@dataclass(frozen=True)
class CalibrationReport:
    profile: HardwareProfile
    r0: float
    r_star: float
    eval_count: int
    trace: tuple[tuple[float, float, float, float], ...]
    wall_time_s: float
    cfg: SearchConfig = field(default_factory=SearchConfig)

    def to_text(self) -> str:
        """Line-oriented report; the wall-time metadata line comes last."""
        lines = [
            "# calibration report",
            f"t_c_s={self.profile.t_c!r}",
            f"t_i_s={self.profile.t_i!r}",
            f"t_o_s={self.profile.t_o!r}",
            f"r_min={self.cfg.r_min!r}",
            f"r_max={self.cfg.r_max!r}",
            f"epsilon={self.cfg.epsilon!r}",
            f"r0={self.r0!r}",
            f"r_star={self.r_star!r}",
            f"eval_count={self.eval_count}",
            "# trace: iter,a,b,probe,f_seconds",
        ]
        for i, (lo, hi, r, fx) in enumerate(self.trace):
            lines.append(f"{i},{lo!r},{hi!r},{r!r},{fx!r}")
        lines.append(f"# meta: wall_time_s={self.wall_time_s:.6f}")
        return "\n".join(lines) + "\n"


def profile_recompute_cost(run_once: Callable[[], None], n_tokens: int,
                           n_layers: int, repeats: int = 3) -> float:
    """Time a model forward and return seconds per token per layer."""
    try:
        run_once()  # warm-up
        best = min(_timed(run_once) for _ in range(repeats))
    except Exception as e:  # pragma: no cover - depends on injected callable
        raise ProfileError(f"recompute profiling failed: {e}") from e
    t_c = best / (n_tokens * n_layers)
    if not math.isfinite(t_c) or t_c <= 0:
        raise ProfileError(f"unusable recompute timing {t_c!r}")
    return t_c


def _timed(fn: Callable[[], None]) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def calibrate(pool, tier, model_evaluator: Callable[[object, float], float],
              cal_set: Sequence[object], cfg: SearchConfig = SearchConfig(),
              *, profile: HardwareProfile | None = None,
              t_c: float | None = None, t_o: float | None = None,
              bytes_per_token: int | None = None,
              sample_bytes: int = 1 << 20) -> CalibrationReport:
    """Two-stage ratio selection: roofline prior, then calibration search.

    The hardware profile may be injected whole (`profile`), assembled from
    injected scalars, or measured: t_i always comes from the pool/tier
    transfer probe unless a full profile is given. The objective evaluator is
    whatever the caller trusts to produce a TTFT for (sample, r) - the
    closed-form model, the pipeline simulator, or a real timed run.
    """
    start = time.perf_counter()
    if profile is None:
        if t_c is None:
            raise ProfileError("pass t_c (or a full profile); timed recompute "
                               "profiling goes through profile_recompute_cost")
        try:
            t_i = pool.measure_transfer_cost(tier, sample_bytes,
                                             bytes_per_token=bytes_per_token)
        except Exception as e:
            raise ProfileError(f"transfer profiling failed: {e}") from e
        profile = HardwareProfile(t_c=t_c, t_i=t_i, t_o=t_o or 0.0)
    r0 = roofline_r0(profile, cfg)
    objective = lambda r: eval_mean_ttft(model_evaluator, cal_set, r)
    r_star, evals, trace = gss_optimize(objective, r0, cfg)
    return CalibrationReport(profile=profile, r0=r0, r_star=r_star,
                             eval_count=evals, trace=tuple(trace),
                             wall_time_s=time.perf_counter() - start, cfg=cfg)
