"""cachetune: frequency-guided selective KV recomputation, sparse tiered
cache offloading with deferred rotary recovery, and hardware-aware
recompute-ratio scheduling, validated at desk scale against brute-force
oracles and a seeded toy transformer."""

from .errors import (AlreadyExists, CacheTuneError, InvalidParam, InvalidPlan,
                     IoError, NotFound, ObjectiveError, ProfileError,
                     ShapeError)
from .kvcore import (ComplexSpectrum, DtypeCode, KvChunk, SeqTensor,
                     tensor_scatter_tokens, tensor_slice_tokens)
from .spectral import (ImportanceRanking, complement_for_ratio,
                       indices_for_ratio, irfft_seq, low_freq_scores, lowpass,
                       rank_chunk, rfft_seq)
from .rope import RopeParams, rope_apply
from .cachepool import (CachePool, SparseFetchPlan, TierConfig, TIER_PRESETS,
                        load_tier_config, read_ctkv, resolve_tier,
                        save_tier_config, write_ctkv)
from .scheduler import (CalibrationReport, HardwareProfile, SearchConfig,
                        calibrate, eval_mean_ttft, gss_optimize,
                        per_layer_latency, roofline_r0, ttft_model)
from .pipesim import (ChunkMeta, PipelinePlan, RequestSpec, Timeline,
                      build_plan, fuse_layer, make_sim_evaluator, simulate,
                      synthetic_plan, transferred_bytes)
from .toymodel import (AttentionRecord, ToyModel, ToyModelConfig,
                       attention_deviation, encode_chunk_isolated,
                       full_prefill, run_selection_experiment,
                       selective_prefill, spectrum_report)
from .estimators import FrequencyTokenRanker, RatioCalibrator

__version__ = "0.1.0"
