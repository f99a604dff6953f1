"""Heterogeneous pipelines: stage partitions, pipeline time and the per-family search."""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .errors import HeteroError
from .modes import GpuConfig
from .schemas import GpuCatalog, MemCoeffs, ModelArch, TrainConfig
from .strategy import ParallelParams, Strategy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    """A run of consecutive stages on one GPU type with equal layer counts."""

    gpu_type: str
    stages: int
    layers_per_stage: int

    @property
    def layers(self) -> int:
        return self.stages * self.layers_per_stage


@dataclass(frozen=True)
class HeteroPartition:
    """Stage and layer assignment over the GPU types, in request order.

    Every requested type has a segment; unused types carry zero stages and
    zero layers so that equal assignments compare equal.
    """

    segments: Tuple[Segment, ...]

    @property
    def num_stages(self) -> int:
        return sum(segment.stages for segment in self.segments)

    @property
    def num_layers(self) -> int:
        return sum(segment.layers for segment in self.segments)

    def stage_layout(self) -> List[Tuple[str, int]]:
        layout = []
        for segment in self.segments:
            layout.extend([(segment.gpu_type, segment.layers_per_stage)] * segment.stages)
        return layout

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"gpu_type": s.gpu_type, "stages": s.stages, "layers_per_stage": s.layers_per_stage}
                for s in self.segments
            ]
        }


@dataclass(frozen=True)
class StageTimes:
    """Per-stage compute time t and exposed transfer time h for one phase."""

    t: Tuple[float, ...]
    h: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.t) != len(self.h):
            raise HeteroError(f"stage times have {len(self.t)} compute and {len(self.h)} transfer entries")
        if not self.t:
            raise HeteroError("a pipeline needs at least one stage")

    def service(self) -> List[float]:
        return [t + h for t, h in zip(self.t, self.h)]


def canonicalize_partition(
    stage_types: Sequence[str], type_order: Optional[Sequence[str]] = None
) -> Tuple[Tuple[str, int], ...]:
    """Group a stage-to-type labelling into contiguous (type, count) segments.

    Stages are reordered so that each type occupies one contiguous run, in
    type_order (first appearance when not given).
    """
    counts: Dict[str, int] = {}
    for name in stage_types:
        counts[name] = counts.get(name, 0) + 1
    order = list(type_order) if type_order is not None else list(counts)
    unknown = set(counts) - set(order)
    if unknown:
        raise HeteroError(f"stage types {sorted(unknown)} are missing from the type order")
    return tuple((name, counts[name]) for name in order if counts.get(name))


def _stage_counts(total: int, caps: Sequence[int]) -> Iterator[Tuple[int, ...]]:
    """Vectors m with 0 <= m_i <= caps[i] summing to total, lexicographic."""
    if len(caps) == 1:
        if total <= caps[0]:
            yield (total,)
        return
    rest_cap = sum(caps[1:])
    for first in range(max(0, total - rest_cap), min(caps[0], total) + 1):
        for tail in _stage_counts(total - first, caps[1:]):
            yield (first,) + tail


def _layer_counts(stages: Sequence[int], layers: int) -> Iterator[Tuple[int, ...]]:
    """Vectors n >= 1 with sum(stages[i] * n[i]) == layers, lexicographic."""
    if len(stages) == 1:
        if layers % stages[0] == 0 and layers // stages[0] >= 1:
            yield (layers // stages[0],)
        return
    rest_min = sum(stages[1:])
    first_max = (layers - rest_min) // stages[0]
    for first in range(1, first_max + 1):
        for tail in _layer_counts(stages[1:], layers - stages[0] * first):
            yield (first,) + tail


def enumerate_partitions(
    num_stages: int,
    num_layers: int,
    types: Sequence[Tuple[str, Optional[int]]],
    dp: int,
    tp: int,
    layer_mode: str = "uniform",
) -> List[HeteroPartition]:
    """Every assignment of stages and layers to GPU types under the type limits.

    A stage of type i uses dp * tp GPUs, so type i holds at most
    limit_i // (dp * tp) stages. Each used type gives its stages an equal
    number of layers, at least one.
    """
    if layer_mode != "uniform":
        raise HeteroError(f"layer mode '{layer_mode}' is not supported", entity=layer_mode)
    if num_stages < 1:
        raise HeteroError(f"pipeline needs at least one stage, got {num_stages}")
    if not types:
        raise HeteroError("no gpu types to partition over")
    group = dp * tp
    caps = [num_stages if limit is None else min(num_stages, limit // group) for _, limit in types]
    partitions = []
    for stages in _stage_counts(num_stages, caps):
        used = [index for index, count in enumerate(stages) if count]
        for layer_counts in _layer_counts([stages[index] for index in used], num_layers):
            per_type = dict(zip(used, layer_counts))
            segments = tuple(
                Segment(name, stages[index], per_type.get(index, 0)) for index, (name, _) in enumerate(types)
            )
            partitions.append(HeteroPartition(segments))
    logger.debug(
        "%d partitions of %d stages and %d layers over %d types",
        len(partitions), num_stages, num_layers, len(types),
    )
    return partitions


def _check_microbatches(num_microbatches: int) -> None:
    if num_microbatches < 1:
        raise HeteroError(f"need at least one microbatch, got {num_microbatches}")


def hetero_pipeline_time(stages: StageTimes, num_microbatches: int) -> float:
    """Makespan of a synchronous pipeline: fill once, then drain at the slowest stage."""
    _check_microbatches(num_microbatches)
    service = stages.service()
    return math.fsum(service) + (num_microbatches - 1) * max(service)


def simulate_pipeline_schedule(stages: StageTimes, num_microbatches: int) -> float:
    """Event-driven makespan of the same pipeline, one server per stage.

    Stage i serves microbatches in arrival order and passes each to stage
    i + 1 when done.
    """
    _check_microbatches(num_microbatches)
    service = stages.service()
    queues: List[deque] = [deque() for _ in service]
    busy = [False] * len(service)
    events: List[Tuple[float, int, int, int]] = []
    order = itertools.count()

    def start(stage: int, now: float) -> None:
        if busy[stage] or not queues[stage]:
            return
        microbatch = queues[stage].popleft()
        busy[stage] = True
        heapq.heappush(events, (now + service[stage], next(order), stage, microbatch))

    queues[0].extend(range(num_microbatches))
    start(0, 0.0)
    finish = 0.0
    while events:
        now, _, stage, microbatch = heapq.heappop(events)
        busy[stage] = False
        if stage + 1 < len(service):
            queues[stage + 1].append(microbatch)
            start(stage + 1, now)
        else:
            finish = now
        start(stage, now)
    return finish


def best_hetero_strategies(
    config: GpuConfig,
    params: ParallelParams,
    arch: ModelArch,
    catalog: GpuCatalog,
    eff,
    coeffs: MemCoeffs,
    train: TrainConfig,
):
    """Evaluate every partition of one strategy family.

    Returns the memory-feasible evaluations sorted by throughput descending,
    then cost ascending. An empty list means no partition fits.

    This is the entry point for ranking a single (config, params) family.
    ``search.run_search`` does the same work for whole spaces: partitions are
    expanded in ``enumerate_strategies`` so the rule filter, memory filter
    and drop counters see each partition as its own strategy, then every
    survivor goes through ``costsim.simulate`` and ``pareto.evaluate``.
    """
    from .costsim import simulate
    from .memest import first_overflow
    from .pareto import evaluate, sort_evaluations

    if not config.heterogeneous:
        raise HeteroError("family is not heterogeneous", entity=config.label)
    partitions = enumerate_partitions(params.pp, arch.num_layers, config.type_limits, params.dp, params.tp)
    evaluations = []
    for partition in partitions:
        strategy = Strategy.build(config, params, arch, partition)
        if first_overflow(strategy, catalog, coeffs, train) is not None:
            continue
        evaluations.append(evaluate(strategy, simulate(strategy, catalog, eff, train), catalog))
    return sort_evaluations(evaluations)
