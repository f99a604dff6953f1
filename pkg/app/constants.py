"""Defaults and fixed constants shared by the search pipeline."""

from __future__ import annotations

SCHEMA_VERSION = 1

SECONDS_PER_HOUR = 3600

# Backward pass costs twice the forward FLOPs of the same operator.
BWD_FLOP_RATIO = 2.0

DEFAULT_BYTES_PER_ELEMENT = 2
DEFAULT_HOST_BW = 32e9
DEFAULT_EFFICIENCY = 0.5

# Efficiency predictions are clamped into (0, 1]; this is the floor.
MIN_EFFICIENCY = 1e-6

# Activation coefficients, in elements per token per hidden unit.
ACTIVATION_BASE = 34.0
ACTIVATION_REPLICATED = 10.0
ATTENTION_MAP = 5.0
FULL_RECOMPUTE_INPUT = 2.0
LOGITS_ACTIVATION = 2.0

# Static bytes per parameter: weights, gradients, optimizer states.
WEIGHT_BYTES = 2.0
GRAD_BYTES = 4.0
OPTIMIZER_BYTES = 12.0

FRAMEWORK_OVERHEAD_BYTES = 2 * 1024**3

# Size buckets for efficiency lookups (upper bounds, exclusive).
FLOP_BUCKETS = (("small", 1e9), ("medium", 1e11))
BYTE_BUCKETS = (("small", 1024**2), ("medium", 64 * 1024**2))
LARGE_BUCKET = "large"

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

WORKERS_ENV = "PARASEARCH_WORKERS"
LOG_LEVEL_ENV = "PARASEARCH_LOG_LEVEL"
FIXTURES_ENV = "PARASEARCH_FIXTURES"

RECOMPUTE_GRANULARITIES = ("selective", "full", "hybrid")
RECOMPUTE_METHODS = ("block", "uniform")

# Enumeration order of ParallelParams candidate lists.
PARAM_FIELDS = (
    "pp",
    "tp",
    "micro_batch",
    "vpp_layers",
    "sequence_parallel",
    "distributed_optimizer",
    "recompute_granularity",
    "recompute_method",
    "recompute_num_layers",
    "offload_optimizer",
    "no_overlap_offload_optimizer",
    "overlap_p2p",
    "tp_comm_overlap",
    "overlap_grad_reduce",
    "overlap_param_gather",
    "use_flash_attn",
    "moe",
)

DEFAULT_RULES = """\
# Flash attention already recomputes the attention map; selective recompute is redundant.
flash_attn_selective: $use_flash_attn != None && $recompute_granularity == selective
# Cannot recompute more layers than there are pipeline stages.
recompute_layers: $recompute_num_layers > $pipeline_model_parallel_size
# pp * tp must divide the GPU count.
gpu_division: $num_gpus % ($pipeline_model_parallel_size * $tensor_model_parallel_size) != 0
"""
