"""Analytical per-stage and per-iteration time model.

Every operator costs theta / (peak * eta): FLOPs over peak FLOP/s for
compute and bytes on the wire over link bandwidth for communication.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from .constants import BWD_FLOP_RATIO
from .efficiency import (
    COMPUTE_SCOPE,
    EfficiencyModel,
    EfficiencyQuery,
    collective_factor,
    kind_family,
)
from .errors import CostModelError, UnsupportedStrategyError
from .hetero import StageTimes, hetero_pipeline_time
from .memest import recomputed_layers
from .schemas import GpuCatalog, GpuSpec, TrainConfig
from .strategy import Strategy

logger = logging.getLogger(__name__)

OP_PHASES = ("fwd", "bwd", "recompute")
COMM_PHASES = ("fwd", "bwd", "recompute", "iteration")
COMM_SCOPES = ("intra_node", "inter_node", "host")

LAYER_OPS = ("matmul_qkv", "matmul_attn_score", "matmul_attn_ctx", "matmul_proj", "matmul_mlp_up", "matmul_mlp_down")
SELECTIVE_OPS = ("matmul_attn_score", "matmul_attn_ctx")


@dataclass(frozen=True, slots=True)
class OpDesc:
    """A compute operator, repeated `repeat` times in its phase."""

    kind: str
    theta_flops: float
    phase: str = "fwd"
    repeat: int = 1

    def __post_init__(self) -> None:
        if not self.theta_flops > 0:
            raise CostModelError(f"operator '{self.kind}' has non-positive FLOPs {self.theta_flops}", entity=self.kind)
        if self.phase not in OP_PHASES:
            raise CostModelError(f"unknown operator phase '{self.phase}'", entity=self.kind)
        if self.repeat < 1:
            raise CostModelError(f"operator repeat must be >= 1, got {self.repeat}", entity=self.kind)


@dataclass(frozen=True, slots=True)
class CommDesc:
    """A communication operator; theta_bytes is the payload before the collective factor."""

    kind: str
    theta_bytes: float
    scope: str
    group_size: int
    phase: str = "fwd"
    repeat: int = 1

    def __post_init__(self) -> None:
        if not self.theta_bytes > 0:
            raise CostModelError(f"transfer '{self.kind}' has non-positive size {self.theta_bytes}", entity=self.kind)
        if self.scope not in COMM_SCOPES:
            raise CostModelError(f"unknown link scope '{self.scope}'", entity=self.kind)
        if self.phase not in COMM_PHASES:
            raise CostModelError(f"unknown transfer phase '{self.phase}'", entity=self.kind)
        if self.repeat < 1:
            raise CostModelError(f"transfer repeat must be >= 1, got {self.repeat}", entity=self.kind)
        family = kind_family(self.kind)
        if family in ("allreduce", "allgather", "reducescatter") and self.group_size < 2:
            raise CostModelError(f"collective '{self.kind}' needs a group of at least 2", entity=self.kind)

    @property
    def is_tp(self) -> bool:
        return self.kind.startswith("tp_")


@dataclass(frozen=True)
class Links:
    """Bandwidths one stage sees, in bytes/s."""

    intra_node: float
    inter_node: float
    host: float
    p2p: float

    @classmethod
    def for_gpu(cls, gpu: GpuSpec, p2p: Optional[float] = None) -> "Links":
        return cls(gpu.intra_node_bw, gpu.inter_node_bw, gpu.host_bw, gpu.intra_node_bw if p2p is None else p2p)

    def bandwidth(self, comm: CommDesc) -> float:
        if comm.kind == "p2p_activation":
            return self.p2p
        if comm.scope == "host":
            return self.host
        return self.inter_node if comm.scope == "inter_node" else self.intra_node


@dataclass(frozen=True)
class StageCost:
    """Per-microbatch times of one stage, plus its once-per-iteration exchanges."""

    comp_fwd: float
    comp_bwd: float
    tp_fwd: float = 0.0
    tp_bwd: float = 0.0
    h_fwd: float = 0.0
    h_bwd: float = 0.0
    t_dp_comm: float = 0.0
    t_offload: float = 0.0

    @property
    def t_fwd(self) -> float:
        return self.comp_fwd + self.tp_fwd

    @property
    def t_bwd(self) -> float:
        return self.comp_bwd + self.tp_bwd

    @property
    def per_microbatch(self) -> float:
        return self.t_fwd + self.h_fwd + self.t_bwd + self.h_bwd

    @property
    def per_iteration_extra(self) -> float:
        return self.t_dp_comm + self.t_offload


@dataclass(frozen=True)
class CostBreakdown:
    t_comp: float
    t_comm: float
    t_bubble: float
    t_total: float
    throughput_tokens_per_s: float
    throughput_samples_per_s: float
    tokens_per_gpu_s: float

    @classmethod
    def from_parts(
        cls, t_comp: float, t_comm: float, t_bubble: float, train: TrainConfig, num_gpus: int
    ) -> "CostBreakdown":
        t_total = t_comp + t_comm + t_bubble
        if not t_total > 0:
            raise CostModelError(f"iteration time must be positive, got {t_total}")
        tokens = train.global_batch * train.seq_len / t_total
        return cls(
            t_comp=t_comp,
            t_comm=t_comm,
            t_bubble=t_bubble,
            t_total=t_total,
            throughput_tokens_per_s=tokens,
            throughput_samples_per_s=train.global_batch / t_total,
            tokens_per_gpu_s=tokens / num_gpus,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "T_comp": self.t_comp,
            "T_comm": self.t_comm,
            "T_bubble": self.t_bubble,
            "T_total": self.t_total,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "throughput_samples_per_s": self.throughput_samples_per_s,
            "tokens_per_gpu_s": self.tokens_per_gpu_s,
        }


def op_compute_time(op: OpDesc, gpu: GpuSpec, eff: EfficiencyModel) -> float:
    """Seconds for one execution of op."""
    eta = eff.predict(EfficiencyQuery(kind=op.kind, theta=op.theta_flops, gpu=gpu.name, peak=gpu.peak_flops))
    return op.theta_flops / (gpu.peak_flops * eta)


def op_comm_time(c: CommDesc, link_bw: float, eff: EfficiencyModel, gpu_name: str = "") -> float:
    """Seconds for one execution of c over a link of link_bw bytes/s."""
    wire_bytes = collective_factor(c.kind, c.group_size) * c.theta_bytes
    eta = eff.predict(
        EfficiencyQuery(
            kind=c.kind, theta=wire_bytes, gpu=gpu_name, scope=c.scope, group_size=c.group_size, peak=link_bw
        )
    )
    return wire_bytes / (link_bw * eta)


def _scope(group_span: int, gpus_per_node: int) -> str:
    return "intra_node" if group_span <= gpus_per_node else "inter_node"


def _p2p_scope(s: Strategy, gpus_per_node: int) -> str:
    # Consecutive stages sit on different nodes once a stage fills a node.
    return "inter_node" if s.params.tp * s.params.dp >= gpus_per_node else "intra_node"


def build_stage_ops(
    s: Strategy,
    layers_on_stage: int,
    gpu: GpuSpec,
    train: TrainConfig,
    first_stage: bool = True,
    last_stage: bool = True,
) -> Tuple[List[OpDesc], List[CommDesc]]:
    """Operators one GPU of a stage runs per microbatch, plus per-iteration exchanges."""
    p = s.params
    if p.moe is not None:
        raise UnsupportedStrategyError("expert-parallel layers are not modelled", entity=s.id or "moe")
    arch = s.arch
    seq, b, h = train.seq_len, p.micro_batch, arch.hidden_size
    f, vocab, t = arch.intermediate_size, arch.vocab_size, p.tp
    layers = layers_on_stage
    ops: List[OpDesc] = []
    comms: List[CommDesc] = []

    layer_flops = {
        "matmul_qkv": 6.0 * seq * b * h * h / t,
        "matmul_attn_score": 2.0 * seq * seq * b * h / t,
        "matmul_attn_ctx": 2.0 * seq * seq * b * h / t,
        "matmul_proj": 2.0 * seq * b * h * h / t,
        "matmul_mlp_up": 2.0 * (arch.mlp_matrices - 1) * seq * b * h * f / t,
        "matmul_mlp_down": 2.0 * seq * b * h * f / t,
    }
    full_layers = recomputed_layers(p, layers)
    selective_layers = layers if p.recompute_granularity in ("selective", "hybrid") else 0

    if layers:
        for kind in LAYER_OPS:
            ops.append(OpDesc(kind, layer_flops[kind], "fwd", layers))
        for kind in LAYER_OPS:
            ops.append(OpDesc(kind, BWD_FLOP_RATIO * layer_flops[kind], "bwd", layers))
        if full_layers:
            for kind in LAYER_OPS:
                ops.append(OpDesc(kind, layer_flops[kind], "recompute", full_layers))
        if selective_layers:
            for kind in SELECTIVE_OPS:
                ops.append(OpDesc(kind, layer_flops[kind], "recompute", selective_layers))
    if first_stage:
        embed = float(seq * b * h)
        ops.append(OpDesc("embed", embed, "fwd"))
        ops.append(OpDesc("embed", BWD_FLOP_RATIO * embed, "bwd"))
    if last_stage:
        logits = 2.0 * seq * b * h * vocab / t
        ops.append(OpDesc("logits", logits, "fwd"))
        ops.append(OpDesc("logits", BWD_FLOP_RATIO * logits, "bwd"))

    activation_bytes = float(seq * b * h * train.bytes_per_element)
    if t > 1 and layers:
        scope = _scope(t, gpu.gpus_per_node)
        # Two collectives per layer and phase: one after attention, one after the MLP.
        if p.sequence_parallel:
            kinds = ("tp_allgather", "tp_reducescatter")
        else:
            kinds = ("tp_allreduce",)
        for phase, count in (("fwd", layers), ("bwd", layers), ("recompute", full_layers)):
            if not count:
                continue
            for kind in kinds:
                comms.append(CommDesc(kind, activation_bytes, scope, t, phase, 2 * count))

    if p.pp > 1:
        p2p_bytes = activation_bytes / t if p.sequence_parallel else activation_bytes
        scope = _p2p_scope(s, gpu.gpus_per_node)
        chunks = s.interleave_chunks()
        comms.append(CommDesc("p2p_activation", p2p_bytes, scope, 2, "fwd", chunks))
        comms.append(CommDesc("p2p_activation", p2p_bytes, scope, 2, "bwd", chunks))

    stage_index = 0 if first_stage else (p.pp - 1 if last_stage else 1)
    stage_params = s.stage_param_count(stage_index, layers) / t
    if p.dp > 1:
        kind = "dp_reducescatter_gather" if p.distributed_optimizer else "dp_allreduce"
        grad_bytes = stage_params * train.bytes_per_element
        comms.append(CommDesc(kind, grad_bytes, _scope(t * p.dp, gpu.gpus_per_node), p.dp, "iteration"))
    if p.offload_optimizer:
        # Gradients go down to the host and updated weights come back.
        host_bytes = stage_params * (train.bytes_per_element + train.bytes_per_element)
        comms.append(CommDesc("host_offload", host_bytes, "host", 1, "iteration"))
    return ops, comms


def _exposed(comm_time: float, hiding_time: float, overlapped: bool) -> float:
    if not overlapped:
        return comm_time
    return max(0.0, comm_time - hiding_time)


def stage_time(
    ops: List[OpDesc],
    comms: List[CommDesc],
    gpu: GpuSpec,
    links: Links,
    eff: EfficiencyModel,
    s: Optional[Strategy] = None,
) -> StageCost:
    """Fold operators into per-phase times, hiding overlappable transfers behind compute."""
    p = s.params if s is not None else None
    comp = {"fwd": 0.0, "bwd": 0.0}
    for op in ops:
        phase = "fwd" if op.phase == "fwd" else "bwd"
        comp[phase] += op.repeat * op_compute_time(op, gpu, eff)

    tp = {"fwd": 0.0, "bwd": 0.0}
    p2p = {"fwd": 0.0, "bwd": 0.0}
    dp_time = 0.0
    offload_time = 0.0
    sharded_dp = False
    for comm in comms:
        seconds = comm.repeat * op_comm_time(comm, links.bandwidth(comm), eff, gpu.name)
        if comm.is_tp:
            tp["fwd" if comm.phase == "fwd" else "bwd"] += seconds
        elif comm.kind == "p2p_activation":
            p2p["fwd" if comm.phase == "fwd" else "bwd"] += seconds
        elif comm.kind == "host_offload":
            offload_time += seconds
        else:
            dp_time += seconds
            sharded_dp = comm.kind == "dp_reducescatter_gather"

    tp_overlap = p.tp_comm_overlap if p is not None else False
    p2p_overlap = p.overlap_p2p if p is not None else False
    # TP and p2p transfers of a phase share that phase's compute as hiding budget.
    spare = dict(comp)
    tp_exposed = {}
    p2p_exposed = {}
    for phase in ("fwd", "bwd"):
        tp_exposed[phase] = _exposed(tp[phase], spare[phase], tp_overlap)
        if tp_overlap:
            spare[phase] = max(0.0, spare[phase] - tp[phase])
        p2p_exposed[phase] = _exposed(p2p[phase], spare[phase], p2p_overlap)
    t_fwd = comp["fwd"] + tp_exposed["fwd"]
    t_bwd = comp["bwd"] + tp_exposed["bwd"]

    # Gradient exchange and host offload draw on one backward budget.
    grad_overlap = p.overlap_grad_reduce if p is not None else False
    bwd_budget = t_bwd
    if sharded_dp:
        # Reduce-scatter of gradients hides behind backward, the parameter gather behind forward.
        gather_overlap = p.overlap_param_gather if p is not None else False
        half = dp_time / 2.0
        exposed_dp = _exposed(half, bwd_budget, grad_overlap) + _exposed(half, t_fwd, gather_overlap)
        reduced = half
    else:
        exposed_dp = _exposed(dp_time, bwd_budget, grad_overlap)
        reduced = dp_time
    if grad_overlap:
        bwd_budget = max(0.0, bwd_budget - reduced)
    offload_overlap = not p.no_overlap_offload_optimizer if p is not None else False

    return StageCost(
        comp_fwd=comp["fwd"],
        comp_bwd=comp["bwd"],
        tp_fwd=tp_exposed["fwd"],
        tp_bwd=tp_exposed["bwd"],
        h_fwd=p2p_exposed["fwd"],
        h_bwd=p2p_exposed["bwd"],
        t_dp_comm=exposed_dp,
        t_offload=_exposed(offload_time, bwd_budget, offload_overlap),
    )


def _stage_links(s: Strategy, stage: int, types: List[str], catalog: GpuCatalog) -> Links:
    gpu = catalog.find(types[stage])
    neighbours = {types[i] for i in (stage - 1, stage + 1) if 0 <= i < len(types)} - {types[stage]}
    if neighbours:
        # Boundary between GPU types: the slower endpoint's inter-node link.
        bw = min([gpu.inter_node_bw] + [catalog.find(name).inter_node_bw for name in sorted(neighbours)])
        return Links.for_gpu(gpu, p2p=bw)
    if _p2p_scope(s, gpu.gpus_per_node) == "inter_node":
        return Links.for_gpu(gpu, p2p=gpu.inter_node_bw)
    return Links.for_gpu(gpu)


def stage_costs(s: Strategy, catalog: GpuCatalog, eff: EfficiencyModel, train: TrainConfig) -> List[StageCost]:
    """StageCost of every pipeline stage, in stage order."""
    types = s.stage_gpu_types()
    layers = s.stage_layers()
    last = len(types) - 1
    cache: Dict[tuple, StageCost] = {}
    costs = []
    for stage, (gpu_type, stage_layers) in enumerate(zip(types, layers)):
        gpu = catalog.find(gpu_type)
        if gpu is None:
            raise CostModelError(f"unknown gpu type '{gpu_type}'", entity=gpu_type)
        links = _stage_links(s, stage, types, catalog)
        key = (gpu_type, stage_layers, stage == 0, stage == last, links)
        cost = cache.get(key)
        if cost is None:
            ops, comms = build_stage_ops(s, stage_layers, gpu, train, stage == 0, stage == last)
            cost = cache[key] = stage_time(ops, comms, gpu, links, eff, s)
        costs.append(cost)
    return costs


def representative_stage(costs: List[StageCost]) -> StageCost:
    """The slowest stage, carrying the slowest per-iteration exchanges of any stage."""
    if not costs:
        raise CostModelError("strategy has no stages")
    slowest = max(range(len(costs)), key=lambda index: (costs[index].per_microbatch, -index))
    return replace(
        costs[slowest],
        t_dp_comm=max(cost.t_dp_comm for cost in costs),
        t_offload=max(cost.t_offload for cost in costs),
    )


def iteration_time_homogeneous(
    s: Strategy, stage: StageCost, num_microbatches: int, train: TrainConfig
) -> CostBreakdown:
    """Iteration time of a pipeline of identical stages under 1F1B."""
    if s.heterogeneous:
        raise CostModelError("heterogeneous strategy: use the hetero pipeline evaluation", entity=s.id)
    if num_microbatches < 1:
        raise CostModelError(f"need at least one microbatch, got {num_microbatches}", entity=s.id)
    k = num_microbatches
    t_comp = k * (stage.comp_fwd + stage.comp_bwd)
    t_comm = k * (stage.tp_fwd + stage.tp_bwd + stage.h_fwd + stage.h_bwd) + stage.per_iteration_extra
    pipelined = k * stage.per_microbatch
    t_bubble = (s.params.pp - 1) / (k * s.interleave_chunks()) * pipelined
    return CostBreakdown.from_parts(t_comp, t_comm, t_bubble, train, s.num_gpus)


def _phase_time(stages: StageTimes, num_microbatches: int, chunks: int) -> float:
    if chunks == 1:
        return hetero_pipeline_time(stages, num_microbatches)
    # Interleaved chunks shorten fill and drain; the bottleneck stage still serves every microbatch.
    service = stages.service()
    peak = max(service)
    return num_microbatches * peak + (math.fsum(service) - peak) / chunks


def pipeline_breakdown(
    s: Strategy, costs: List[StageCost], num_microbatches: int, train: TrainConfig
) -> CostBreakdown:
    """Iteration time from per-stage costs: fill once, then drain at the slowest stage of each phase.

    With identical stages this equals ``iteration_time_homogeneous``; the
    bubble is whatever the pipeline adds on top of the slowest stage's own
    compute and exchanges.
    """
    if not costs:
        raise CostModelError("strategy has no stages", entity=s.id)
    if num_microbatches < 1:
        raise CostModelError(f"need at least one microbatch, got {num_microbatches}", entity=s.id)
    k = num_microbatches
    chunks = s.interleave_chunks()
    forward = StageTimes(tuple(c.t_fwd for c in costs), tuple(c.h_fwd for c in costs))
    backward = StageTimes(tuple(c.t_bwd for c in costs), tuple(c.h_bwd for c in costs))
    stage = representative_stage(costs)
    t_total = _phase_time(forward, k, chunks) + _phase_time(backward, k, chunks) + stage.per_iteration_extra
    t_comp = k * (stage.comp_fwd + stage.comp_bwd)
    t_comm = k * (stage.tp_fwd + stage.tp_bwd + stage.h_fwd + stage.h_bwd) + stage.per_iteration_extra
    t_bubble = max(0.0, t_total - t_comp - t_comm) if len(costs) > 1 else 0.0
    return CostBreakdown.from_parts(t_comp, t_comm, t_bubble, train, s.num_gpus)


def simulate(s: Strategy, catalog: GpuCatalog, eff: EfficiencyModel, train: TrainConfig) -> CostBreakdown:
    """Cost breakdown of one strategy on its GPU configuration.

    Homogeneous and heterogeneous strategies go through the same per-stage
    pipeline evaluation, so a heterogeneous layout of one GPU type costs
    exactly what the matching homogeneous strategy costs.
    """
    return pipeline_breakdown(s, stage_costs(s, catalog, eff, train), s.num_microbatches(train), train)
