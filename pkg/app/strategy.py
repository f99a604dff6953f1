"""Parallel-parameter search space and strategy enumeration."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .catalog import embedding_param_count, layer_param_count, read_json
from .constants import PARAM_FIELDS, RECOMPUTE_GRANULARITIES, RECOMPUTE_METHODS
from .errors import StrategyError
from .modes import GpuConfig
from .schemas import GpuCatalog, ModelArch, MoeSpec, RangeSpec, TrainConfig
from .utils import candidate_range, pow2_range, split_evenly, stable_hash

if TYPE_CHECKING:
    from .hetero import HeteroPartition

logger = logging.getLogger(__name__)

PARAM_ALIASES = {
    "pipeline_model_parallel_size": "pp",
    "tensor_model_parallel_size": "tp",
    "micro_batch_size": "micro_batch",
    "num_layers_per_virtual_pipeline_stage": "vpp_layers",
    "use_distributed_optimizer": "distributed_optimizer",
    "overlap_p2p_communication": "overlap_p2p",
}

INT_FIELDS = {"pp", "tp", "micro_batch", "recompute_num_layers"}
BOOL_FIELDS = {
    "sequence_parallel",
    "distributed_optimizer",
    "offload_optimizer",
    "no_overlap_offload_optimizer",
    "overlap_p2p",
    "tp_comm_overlap",
    "overlap_grad_reduce",
    "overlap_param_gather",
}


@dataclass(frozen=True)
class ParallelParams:
    """One point of the parallel-parameter space."""

    pp: int
    tp: int
    dp: int
    micro_batch: int
    vpp_layers: Optional[int] = None
    sequence_parallel: bool = False
    distributed_optimizer: bool = False
    recompute_granularity: Optional[str] = None
    recompute_method: Optional[str] = None
    recompute_num_layers: int = 1
    offload_optimizer: bool = False
    no_overlap_offload_optimizer: bool = False
    overlap_p2p: bool = True
    tp_comm_overlap: bool = True
    overlap_grad_reduce: bool = True
    overlap_param_gather: bool = True
    use_flash_attn: Optional[bool] = True
    moe: Optional[MoeSpec] = None

    def __post_init__(self) -> None:
        # Flash attention switched off is held as None, the absent value rules compare against.
        if self.use_flash_attn is False:
            object.__setattr__(self, "use_flash_attn", None)

    def to_dict(self) -> Dict[str, Any]:
        data = {name: getattr(self, name) for name in ("dp",) + PARAM_FIELDS}
        data["moe"] = self.moe.model_dump() if self.moe is not None else None
        return data

    @property
    def flash_attention(self) -> bool:
        return bool(self.use_flash_attn)


@dataclass(frozen=True)
class ParamSpace:
    """Finite candidate list for every ParallelParams field except dp."""

    candidates: Dict[str, Tuple[Any, ...]]

    def __post_init__(self) -> None:
        missing = [name for name in PARAM_FIELDS if name not in self.candidates]
        if missing:
            raise StrategyError(f"param space lacks candidates for {', '.join(missing)}", entity=missing[0])
        for name, values in self.candidates.items():
            if not values:
                logger.warning("candidate list for '%s' is empty; the search space is empty", name)

    def lists(self) -> List[Tuple[Any, ...]]:
        return [self.candidates[name] for name in PARAM_FIELDS]

    def with_overrides(self, **overrides: Sequence[Any]) -> "ParamSpace":
        merged = dict(self.candidates)
        for name, values in overrides.items():
            merged[name] = tuple(values)
        return ParamSpace(candidates=merged)

    def to_dict(self) -> Dict[str, List[Any]]:
        result = {}
        for name in PARAM_FIELDS:
            values = self.candidates[name]
            if name == "moe":
                result[name] = [value.model_dump() if value is not None else None for value in values]
            else:
                result[name] = list(values)
        return result


@dataclass(frozen=True)
class Strategy:
    """A parallel strategy bound to a GPU configuration and a model."""

    gpu_config: GpuConfig
    params: ParallelParams
    arch: ModelArch
    partition: Optional["HeteroPartition"] = None
    id: str = field(default="", compare=False)

    @classmethod
    def build(
        cls,
        gpu_config: GpuConfig,
        params: ParallelParams,
        arch: ModelArch,
        partition: Optional["HeteroPartition"] = None,
    ) -> "Strategy":
        if gpu_config.heterogeneous != (partition is not None):
            raise StrategyError(
                "a partition is required exactly for heterogeneous configs", entity=gpu_config.label
            )
        payload = {
            "config": gpu_config.to_dict(),
            "params": params.to_dict(),
            "arch": arch.model_dump(),
            "partition": partition.to_dict() if partition is not None else None,
        }
        return cls(gpu_config, params, arch, partition, stable_hash(payload))

    @property
    def num_gpus(self) -> int:
        return self.gpu_config.total

    @property
    def heterogeneous(self) -> bool:
        return self.partition is not None

    def num_microbatches(self, train: TrainConfig) -> int:
        return train.global_batch // (self.params.dp * self.params.micro_batch)

    def interleave_chunks(self) -> int:
        if self.params.vpp_layers is None:
            return 1
        return self.arch.num_layers // (self.params.pp * self.params.vpp_layers)

    def stage_layers(self) -> List[int]:
        """Layers per pipeline stage; uneven splits favour the earliest stages."""
        if self.partition is not None:
            return [layers for _, layers in self.partition.stage_layout()]
        return list(split_evenly(self.arch.num_layers, self.params.pp))

    def stage_param_count(self, stage: int, layers: int) -> int:
        """Unsharded parameters held by one stage.

        The first stage owns the input embedding. The last stage owns the
        output projection unless it is tied to the embedding on a single stage.
        """
        count = layers * layer_param_count(self.arch)
        if stage == 0:
            count += embedding_param_count(self.arch)
        if stage == self.params.pp - 1 and (self.params.pp > 1 or not self.arch.tied_embeddings):
            count += embedding_param_count(self.arch)
        return count

    def stage_gpu_types(self) -> List[str]:
        if self.partition is not None:
            return [gpu for gpu, _ in self.partition.stage_layout()]
        return [self.gpu_config.gpu_type] * self.params.pp

    def gpu_bill(self) -> List[Tuple[str, int]]:
        """GPUs used per type, in configuration order."""
        if self.partition is None:
            return list(self.gpu_config.entries)
        group = self.params.dp * self.params.tp
        return [(segment.gpu_type, segment.stages * group) for segment in self.partition.segments if segment.stages]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "gpu_config": self.gpu_config.to_dict(),
            "params": self.params.to_dict(),
            "model": self.arch.family,
            "partition": self.partition.to_dict() if self.partition is not None else None,
        }


def derive_dp(num_gpus: int, pp: int, tp: int) -> int:
    """Data-parallel degree implied by the GPU count and the model-parallel degrees."""
    if pp < 1 or tp < 1:
        raise StrategyError(f"pp={pp} and tp={tp} must be positive", entity="pp,tp")
    group = pp * tp
    if num_gpus % group != 0:
        raise StrategyError(f"pp*tp={group} does not divide {num_gpus} gpus", entity=f"pp={pp},tp={tp}")
    return num_gpus // group


def structural_violation(
    num_gpus: int,
    values: Dict[str, Any],
    arch: ModelArch,
    train: TrainConfig,
    heterogeneous: bool = False,
) -> Optional[str]:
    """Why a candidate cannot form a well-defined strategy, or None."""
    pp, tp, micro_batch = values["pp"], values["tp"], values["micro_batch"]
    if pp < 1 or tp < 1 or micro_batch < 1:
        return "non-positive degree"
    if num_gpus % (pp * tp) != 0:
        return "pp*tp does not divide gpu count"
    if pp > arch.num_layers:
        return "more stages than layers"
    if arch.num_heads % tp != 0 or arch.hidden_size % tp != 0:
        return "tp does not divide heads or hidden size"
    dp = num_gpus // (pp * tp)
    if train.global_batch % dp != 0:
        return "dp does not divide global batch"
    if (train.global_batch // dp) % micro_batch != 0:
        return "micro batch does not divide per-replica batch"
    vpp_layers = values["vpp_layers"]
    if vpp_layers is not None:
        if heterogeneous or pp == 1:
            return "interleaving needs a homogeneous pipeline with pp > 1"
        if vpp_layers < 1 or arch.num_layers % (pp * vpp_layers) != 0:
            return "vpp layers do not tile the stages"
    if values["recompute_num_layers"] < 1:
        return "recompute_num_layers must be positive"
    moe = values["moe"]
    if moe is not None and (moe.num_experts % moe.ep_size != 0 or moe.topk > moe.num_experts):
        return "invalid expert configuration"
    return None


def enumerate_strategies(
    configs: Sequence[GpuConfig],
    space: ParamSpace,
    arch: ModelArch,
    train: TrainConfig,
) -> Iterator[Strategy]:
    """Yield every structurally valid strategy in lexicographic field order."""
    lists = space.lists()
    for config in configs:
        for combo in itertools.product(*lists):
            values = dict(zip(PARAM_FIELDS, combo))
            if structural_violation(config.total, values, arch, train, config.heterogeneous):
                continue
            dp = config.total // (values["pp"] * values["tp"])
            params = ParallelParams(dp=dp, **values)
            if not config.heterogeneous:
                yield Strategy.build(config, params, arch)
                continue
            from .hetero import enumerate_partitions

            partitions = enumerate_partitions(
                params.pp, arch.num_layers, config.type_limits, dp, params.tp
            )
            for partition in partitions:
                yield Strategy.build(config, params, arch, partition)


def search_space_size(configs: Sequence[GpuConfig], space: ParamSpace) -> int:
    """Product of candidate-list lengths times the number of configs."""
    return math.prod(len(values) for values in space.lists()) * len(configs)


def default_param_space(
    arch: ModelArch,
    configs: Sequence[GpuConfig],
    catalog: GpuCatalog,
    train: TrainConfig,
) -> ParamSpace:
    """Divisor-bounded power-of-two defaults; tp stays inside one node."""
    max_gpus = max((config.total for config in configs), default=1)
    type_names = set()
    for config in configs:
        type_names.update(name for name, _ in config.entries)
        type_names.update(name for name, _ in config.type_limits)
    per_node = [catalog.find(name).gpus_per_node for name in sorted(type_names) if name in catalog]
    node_cap = min(per_node) if per_node else 1
    return ParamSpace(
        candidates={
            "pp": tuple(pow2_range(1, min(arch.num_layers, max_gpus))),
            "tp": tuple(pow2_range(1, min(arch.num_heads, node_cap, max_gpus))),
            "micro_batch": tuple(pow2_range(1, min(8, train.global_batch))),
            "vpp_layers": (None,),
            "sequence_parallel": (False, True),
            "distributed_optimizer": (False, True),
            "recompute_granularity": (None, "selective", "full"),
            "recompute_method": (None,),
            "recompute_num_layers": (1,),
            "offload_optimizer": (False,),
            "no_overlap_offload_optimizer": (False,),
            "overlap_p2p": (True,),
            "tp_comm_overlap": (True,),
            "overlap_grad_reduce": (True,),
            "overlap_param_gather": (True,),
            "use_flash_attn": (True,),
            "moe": (None,),
        }
    )


def _parse_candidates(name: str, raw: Any) -> Tuple[Any, ...]:
    if isinstance(raw, dict):
        if name not in INT_FIELDS and name != "vpp_layers":
            raise StrategyError("range objects are only valid for integer parameters", entity=name)
        try:
            spec = RangeSpec.model_validate(raw)
        except ValidationError as exc:
            raise StrategyError(f"invalid range for '{name}': {exc.errors()[0]['msg']}", entity=name) from exc
        return tuple(candidate_range(spec.min, spec.max, spec.scale))
    if not isinstance(raw, list):
        raise StrategyError("candidates must be a list or a range object", entity=name)
    values = tuple(_parse_value(name, value) for value in raw)
    if name == "use_flash_attn":
        # false and null both mean off.
        values = tuple(dict.fromkeys(values))
    return values


def _parse_value(name: str, value: Any) -> Any:
    if name in INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise StrategyError(f"'{name}' candidates must be positive integers, got {value!r}", entity=name)
        return value
    if name == "vpp_layers":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise StrategyError(f"'vpp_layers' candidates must be null or positive, got {value!r}", entity=name)
        return value
    if name in BOOL_FIELDS:
        if not isinstance(value, bool):
            raise StrategyError(f"'{name}' candidates must be booleans, got {value!r}", entity=name)
        return value
    if name == "use_flash_attn":
        if value is not None and not isinstance(value, bool):
            raise StrategyError(f"'use_flash_attn' candidates must be boolean or null, got {value!r}", entity=name)
        return value or None
    if name in ("recompute_granularity", "recompute_method"):
        allowed = RECOMPUTE_GRANULARITIES if name == "recompute_granularity" else RECOMPUTE_METHODS
        if value is None or value == "none":
            return None
        if value not in allowed:
            raise StrategyError(f"'{name}' must be one of none, {', '.join(allowed)}; got {value!r}", entity=name)
        return value
    if name == "moe":
        if value is None:
            return None
        try:
            return MoeSpec.model_validate(value)
        except ValidationError as exc:
            raise StrategyError(f"invalid moe candidate: {exc.errors()[0]['msg']}", entity=name) from exc
    raise StrategyError(f"unknown parameter '{name}'", entity=name)


def parse_param_space(data: Any, base: ParamSpace) -> ParamSpace:
    """Overlay a param-space mapping on top of base defaults."""
    if not isinstance(data, dict):
        raise StrategyError("param space must be a JSON object", entity="<root>")
    overrides: Dict[str, Tuple[Any, ...]] = {}
    for key, raw in data.items():
        name = PARAM_ALIASES.get(key, key)
        if name not in PARAM_FIELDS:
            raise StrategyError(f"unknown parameter '{key}' in param space", entity=key)
        overrides[name] = _parse_candidates(name, raw)
    return base.with_overrides(**overrides)


def load_param_space(path: str | Path, base: ParamSpace) -> ParamSpace:
    data = read_json(path, StrategyError)
    space = parse_param_space(data, base)
    logger.debug("loaded param space %s", path)
    return space
