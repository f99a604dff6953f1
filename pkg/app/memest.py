"""Per-stage memory estimation and the memory-based strategy filter."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

from .catalog import read_json, validate_model
from .errors import MemoryEstimateError
from .schemas import GpuCatalog, MemCoeffs, ModelArch, TrainConfig
from .strategy import ParallelParams, Strategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageMemory:
    stage_index: int
    params_bytes: float
    grads_bytes: float
    optim_bytes: float
    activation_bytes: float
    overhead_bytes: float
    total_bytes: float

    @classmethod
    def from_parts(
        cls,
        stage_index: int,
        params_bytes: float,
        grads_bytes: float,
        optim_bytes: float,
        activation_bytes: float,
        overhead_bytes: float,
    ) -> "StageMemory":
        total = params_bytes + grads_bytes + optim_bytes + activation_bytes + overhead_bytes
        return cls(stage_index, params_bytes, grads_bytes, optim_bytes, activation_bytes, overhead_bytes, total)


@dataclass(frozen=True)
class MemoryDrop:
    strategy_id: str
    stage_index: int
    bytes_over: float


def load_mem_coeffs(path: str | Path | None) -> MemCoeffs:
    """Load a coefficient file; missing keys keep their defaults."""
    if path is None:
        return MemCoeffs()
    data = read_json(path, MemoryEstimateError)
    return validate_model(MemCoeffs, data, MemoryEstimateError, f"coefficients {path}")


def _activation_per_layer(
    arch: ModelArch, train: TrainConfig, params: ParallelParams, coeffs: MemCoeffs, mode: str
) -> float:
    s, b, h = train.seq_len, params.micro_batch, arch.hidden_size
    t = params.tp
    unit = s * b * h * train.bytes_per_element
    if mode == "full":
        stored = unit * coeffs.full_recompute_input
        return stored / t if params.sequence_parallel else stored

    attention_map = coeffs.attention_map
    if params.flash_attention:
        attention_map *= coeffs.flash_attn_map_factor
    if mode == "selective":
        attention_map *= coeffs.selective_map_factor
    attention_term = attention_map * arch.num_heads * s / h
    if params.sequence_parallel:
        return unit * (coeffs.activation_base + attention_term) / t
    parallel_part = coeffs.activation_base - coeffs.activation_replicated
    return unit * (coeffs.activation_replicated + (parallel_part + attention_term) / t)


def layer_activation_bytes(
    arch: ModelArch, train: TrainConfig, params: ParallelParams, coeffs: MemCoeffs
) -> float:
    """Activation bytes one layer keeps for one in-flight microbatch."""
    granularity = params.recompute_granularity
    if granularity == "full":
        mode = "full"
    elif granularity in ("selective", "hybrid"):
        mode = "selective"
    else:
        mode = "store"
    return _activation_per_layer(arch, train, params, coeffs, mode)


def recomputed_layers(params: ParallelParams, layers_on_stage: int) -> int:
    """Layers of a stage that are fully recomputed."""
    if params.recompute_granularity not in ("full", "hybrid"):
        return 0
    if params.recompute_granularity == "full" and params.recompute_method != "block":
        return layers_on_stage
    return min(params.recompute_num_layers, layers_on_stage)


def _layer_terms(s: Strategy, coeffs: MemCoeffs, train: TrainConfig) -> Tuple[float, float]:
    """(fully recomputed, kept) activation bytes per layer and microbatch."""
    params = s.params
    kept_mode = "selective" if params.recompute_granularity in ("selective", "hybrid") else "store"
    full = _activation_per_layer(s.arch, train, params, coeffs, "full")
    return full, _activation_per_layer(s.arch, train, params, coeffs, kept_mode)


def _stage_activation(
    s: Strategy,
    stage: int,
    layers: int,
    coeffs: MemCoeffs,
    train: TrainConfig,
    terms: Optional[Tuple[float, float]] = None,
) -> float:
    params = s.params
    full_bytes, kept_bytes = terms if terms is not None else _layer_terms(s, coeffs, train)
    full_layers = recomputed_layers(params, layers)
    per_microbatch = full_layers * full_bytes + (layers - full_layers) * kept_bytes
    in_flight = min(params.pp - stage, s.num_microbatches(train))
    activation = in_flight * per_microbatch
    if stage == params.pp - 1:
        logits = train.seq_len * params.micro_batch * s.arch.vocab_size * train.bytes_per_element
        activation += logits * coeffs.logits_activation / params.tp
    return activation


def _stage_static_params(s: Strategy, stage: int, layers: int) -> float:
    count = float(s.stage_param_count(stage, layers))
    moe = s.params.moe
    if moe is not None:
        mlp = s.arch.mlp_matrices * s.arch.hidden_size * s.arch.intermediate_size
        count += layers * mlp * (moe.num_experts / moe.ep_size - 1)
    return count / s.params.tp


def stage_memory(s: Strategy, stage: int, coeffs: MemCoeffs, train: TrainConfig) -> StageMemory:
    """Memory one GPU of the given pipeline stage needs."""
    layers_per_stage = s.stage_layers()
    if not 0 <= stage < len(layers_per_stage):
        raise MemoryEstimateError(
            f"stage {stage} out of range for {len(layers_per_stage)} stages", entity=s.id
        )
    return _stage_memory(s, stage, layers_per_stage[stage], coeffs, train)


def _stage_memory(
    s: Strategy,
    stage: int,
    layers: int,
    coeffs: MemCoeffs,
    train: TrainConfig,
    terms: Optional[Tuple[float, float]] = None,
) -> StageMemory:
    params = s.params
    stage_params = _stage_static_params(s, stage, layers)
    if params.offload_optimizer:
        optim = 0.0
    elif params.distributed_optimizer:
        optim = stage_params * coeffs.optimizer_bytes / params.dp
    else:
        optim = stage_params * coeffs.optimizer_bytes
    return StageMemory.from_parts(
        stage_index=stage,
        params_bytes=stage_params * coeffs.weight_bytes,
        grads_bytes=stage_params * coeffs.grad_bytes,
        optim_bytes=optim,
        activation_bytes=_stage_activation(s, stage, layers, coeffs, train, terms),
        overhead_bytes=coeffs.overhead_bytes,
    )


def first_overflow(
    s: Strategy, catalog: GpuCatalog, coeffs: MemCoeffs, train: TrainConfig
) -> Optional[MemoryDrop]:
    """The first stage whose memory exceeds its GPU's capacity, if any."""
    capacities = {}
    terms = _layer_terms(s, coeffs, train)
    for stage, (gpu_type, layers) in enumerate(zip(s.stage_gpu_types(), s.stage_layers())):
        capacity = capacities.get(gpu_type)
        if capacity is None:
            capacity = capacities[gpu_type] = catalog.find(gpu_type).mem_bytes
        total = _stage_memory(s, stage, layers, coeffs, train, terms).total_bytes
        if total > capacity:
            return MemoryDrop(strategy_id=s.id, stage_index=stage, bytes_over=total - capacity)
    return None


def filter_by_memory(
    strategies: Iterable[Strategy],
    catalog: GpuCatalog,
    coeffs: MemCoeffs,
    train: TrainConfig,
    drops: Optional[List[MemoryDrop]] = None,
) -> Iterator[Strategy]:
    """Keep strategies whose every stage fits its GPU; record why others were dropped."""
    for s in strategies:
        drop = first_overflow(s, catalog, coeffs, train)
        if drop is None:
            yield s
            continue
        logger.debug("memory drop %s: stage %d over by %.0f bytes", s.id, drop.stage_index, drop.bytes_over)
        if drops is not None:
            drops.append(drop)
