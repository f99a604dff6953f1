"""End-to-end search: inputs, enumeration, filters, simulation, pricing and the report."""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence

from .catalog import load_catalog, load_model_arch, validate_model
from .constants import DEFAULT_RULES, SCHEMA_VERSION
from .costsim import simulate
from .efficiency import EfficiencyModel, calibrate_efficiency, load_efficiency_model
from .errors import ModeError, ReportError, UnsupportedStrategyError
from .fixtures import Fixture, load_fixture
from .memest import filter_by_memory, load_mem_coeffs
from .modes import GpuConfig, generate_gpu_configs
from .pareto import Evaluation, ParetoPoint, evaluate, pareto_pool, select_best_within_budget, sort_evaluations
from .rulelang import RuleSet, filter_by_rules, load_rules, parse_rules
from .schemas import GpuCatalog, MemCoeffs, ModelArch, SearchRequest, SearchSettings, TrainConfig
from .strategy import (
    ParamSpace,
    Strategy,
    default_param_space,
    enumerate_strategies,
    load_param_space,
    parse_param_space,
    search_space_size,
)

logger = logging.getLogger(__name__)

# Below this many strategies a worker pool costs more than it saves.
MIN_PARALLEL_BATCH = 256


@dataclass(frozen=True)
class SearchInputs:
    """Everything loaded and validated before enumeration starts."""

    arch: ModelArch
    catalog: GpuCatalog
    train: TrainConfig
    request: SearchRequest
    configs: List[GpuConfig]
    space: ParamSpace
    rules: RuleSet
    coeffs: MemCoeffs
    eff: EfficiencyModel
    total_tokens: Optional[float]
    top_k: int
    strict_dominance: bool
    fixture: Optional[str] = None


@dataclass
class SearchCounts:
    search_space_size: int = 0
    generated: int = 0
    rule_dropped: Counter = field(default_factory=Counter)
    memory_dropped: int = 0
    unsupported: int = 0
    simulated: int = 0

    @property
    def dropped(self) -> int:
        return sum(self.rule_dropped.values()) + self.memory_dropped + self.unsupported

    @property
    def balanced(self) -> bool:
        return self.generated == self.simulated + self.dropped

    def to_dict(self) -> Dict[str, Any]:
        return {
            "search_space_size": self.search_space_size,
            "generated": self.generated,
            "rule_dropped": dict(sorted(self.rule_dropped.items())),
            "memory_dropped": self.memory_dropped,
            "unsupported": self.unsupported,
            "simulated": self.simulated,
        }


@dataclass(frozen=True)
class SearchTimings:
    search_s: float = 0.0
    simulation_s: float = 0.0
    e2e_s: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {"search_s": self.search_s, "simulation_s": self.simulation_s, "e2e_s": self.e2e_s}


@dataclass
class SearchReport:
    request: Dict[str, Any]
    counts: SearchCounts
    ranked: List[Evaluation]
    frontier: List[ParetoPoint]
    selected: Optional[Evaluation]
    timings: SearchTimings
    budgeted: bool = False

    @property
    def exit_code(self) -> int:
        if self.counts.simulated == 0:
            return 2
        if self.budgeted and self.selected is None:
            return 2
        return 0

    def to_dict(self, include_timings: bool = False) -> Dict[str, Any]:
        strategies = []
        for rank, item in enumerate(self.ranked, start=1):
            entry = item.strategy.to_dict()
            entry.update({"rank": rank, "cost": item.cost.to_dict(), "pareto": item.point.to_dict()})
            strategies.append(entry)
        payload = {
            "schema": SCHEMA_VERSION,
            "request": self.request,
            "counts": self.counts.to_dict(),
            "strategies": strategies,
            "frontier": [point.to_dict() for point in self.frontier],
            "selected": self.selected.point.strategy_id if self.selected is not None else None,
        }
        if include_timings:
            payload["timings"] = self.timings.to_dict()
        return payload


def _require(value: Any, name: str) -> Any:
    if value is None:
        raise ReportError(f"missing required setting '{name}' (give the flag or a fixture)", entity=name)
    return value


def resolve_inputs(settings: SearchSettings) -> SearchInputs:
    """Merge explicit settings over fixture defaults and load every input file."""
    fixture: Optional[Fixture] = load_fixture(settings.fixture) if settings.fixture else None
    defaults = fixture.request if fixture is not None else None

    def from_fixture(attribute: str) -> Any:
        return getattr(defaults, attribute) if defaults is not None else None

    def pick(attribute: str) -> Any:
        value = getattr(settings, attribute)
        return value if value is not None else from_fixture(attribute)

    arch = load_model_arch(settings.model) if settings.model else _require(fixture, "model").arch
    catalog = load_catalog(settings.catalog) if settings.catalog else _require(fixture, "catalog").catalog
    train = TrainConfig(
        global_batch=_require(pick("global_batch"), "global_batch"),
        seq_len=_require(pick("seq_len"), "seq_len"),
        bytes_per_element=pick("bytes_per_element") or 2,
    )
    request_data = {
        "mode": _require(pick("mode"), "mode"),
        "gpu_type": pick("gpu_type"),
        "gpu_count": pick("gpu_count"),
        "type_limits": pick("type_limits") or (),
        "max_gpus": pick("max_gpus"),
        "max_money": pick("max_money"),
        "ladder": settings.ladder or "pow2",
    }
    request = validate_model(SearchRequest, request_data, ModeError, "search request")
    configs = generate_gpu_configs(request, catalog)

    base = default_param_space(arch, configs, catalog, train)
    if settings.space:
        space = load_param_space(settings.space, base)
    elif fixture is not None:
        space = parse_param_space(fixture.space, base)
    else:
        space = base

    if settings.rules:
        rules = load_rules(settings.rules)
    elif fixture is not None:
        rules = fixture.rules
    else:
        rules = parse_rules(DEFAULT_RULES)

    if settings.mem_coeffs:
        coeffs = load_mem_coeffs(settings.mem_coeffs)
    else:
        coeffs = fixture.coeffs if fixture is not None else MemCoeffs()

    if settings.eff_model:
        eff = load_efficiency_model(settings.eff_model, catalog)
    elif fixture is not None:
        eff = calibrate_efficiency(fixture.samples)
    else:
        eff = load_efficiency_model(None)

    return SearchInputs(
        arch=arch,
        catalog=catalog,
        train=train,
        request=request,
        configs=configs,
        space=space,
        rules=rules,
        coeffs=coeffs,
        eff=eff,
        total_tokens=settings.total_tokens,
        top_k=settings.top_k,
        strict_dominance=settings.strict_dominance,
        fixture=settings.fixture,
    )


def _request_echo(inputs: SearchInputs) -> Dict[str, Any]:
    request = inputs.request
    return {
        "fixture": inputs.fixture,
        "mode": request.mode,
        "model": inputs.arch.family,
        "gpu_type": request.gpu_type,
        "gpu_count": request.gpu_count,
        "type_limits": [[name, limit] for name, limit in request.type_limits],
        "max_gpus": request.max_gpus,
        "max_money": request.max_money,
        "ladder": request.ladder,
        "configs": [config.label for config in inputs.configs],
        "global_batch": inputs.train.global_batch,
        "seq_len": inputs.train.seq_len,
        "bytes_per_element": inputs.train.bytes_per_element,
        "total_tokens": inputs.total_tokens,
        "top_k": inputs.top_k,
        "strict_dominance": inputs.strict_dominance,
    }


@dataclass(frozen=True)
class _EvalContext:
    catalog: GpuCatalog
    eff: EfficiencyModel
    train: TrainConfig
    total_tokens: Optional[float]


_WORKER_CONTEXT: Optional[_EvalContext] = None


def _init_worker(context: _EvalContext) -> None:
    global _WORKER_CONTEXT
    _WORKER_CONTEXT = context


def _evaluate_one(s: Strategy, context: _EvalContext) -> Optional[Evaluation]:
    try:
        cost = simulate(s, context.catalog, context.eff, context.train)
    except UnsupportedStrategyError as exc:
        logger.debug("unsupported strategy %s: %s", s.id, exc.message)
        return None
    return evaluate(s, cost, context.catalog, context.total_tokens)


def _evaluate_chunk(chunk: Sequence[Strategy]) -> List[Optional[Evaluation]]:
    return [_evaluate_one(s, _WORKER_CONTEXT) for s in chunk]


def _chunks(items: Sequence[Strategy], size: int) -> Iterator[Sequence[Strategy]]:
    for start in range(0, len(items), size):
        yield items[start:start + size]


def evaluate_strategies(
    strategies: Sequence[Strategy],
    catalog: GpuCatalog,
    eff: EfficiencyModel,
    train: TrainConfig,
    total_tokens: Optional[float] = None,
    workers: int = 1,
) -> List[Optional[Evaluation]]:
    """Simulate and price each strategy, in input order; None marks an unsupported one."""
    context = _EvalContext(catalog, eff, train, total_tokens)
    if workers <= 1 or len(strategies) < MIN_PARALLEL_BATCH:
        return [_evaluate_one(s, context) for s in strategies]
    size = max(1, math.ceil(len(strategies) / (workers * 4)))
    results: List[Optional[Evaluation]] = []
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(context,)) as pool:
        for chunk_results in pool.map(_evaluate_chunk, _chunks(strategies, size)):
            results.extend(chunk_results)
    return results


def _counted(strategies: Iterable[Strategy], counts: SearchCounts) -> Iterator[Strategy]:
    for s in strategies:
        counts.generated += 1
        yield s


def run_search(settings: SearchSettings) -> SearchReport:
    """Run the whole pipeline for one set of settings."""
    started = time.perf_counter()
    inputs = resolve_inputs(settings)
    counts = SearchCounts(search_space_size=search_space_size(inputs.configs, inputs.space))

    candidates = _counted(enumerate_strategies(inputs.configs, inputs.space, inputs.arch, inputs.train), counts)
    ruled = filter_by_rules(candidates, inputs.rules, inputs.train, counts.rule_dropped)
    drops: list = []
    survivors = list(filter_by_memory(ruled, inputs.catalog, inputs.coeffs, inputs.train, drops))
    counts.memory_dropped = len(drops)
    searched = time.perf_counter()
    logger.info(
        "enumerated %d strategies, %d rule drops, %d memory drops, %d survivors in %.3fs",
        counts.generated, sum(counts.rule_dropped.values()), counts.memory_dropped, len(survivors), searched - started,
    )

    outcomes = evaluate_strategies(
        survivors, inputs.catalog, inputs.eff, inputs.train, inputs.total_tokens, settings.workers
    )
    evaluations = [item for item in outcomes if item is not None]
    counts.unsupported = len(outcomes) - len(evaluations)
    counts.simulated = len(evaluations)
    simulated = time.perf_counter()
    if counts.unsupported:
        logger.warning("%d strategies use features the simulator does not model", counts.unsupported)
    logger.info("simulated %d strategies in %.3fs", counts.simulated, simulated - searched)

    ranked = sort_evaluations(evaluations)
    frontier = pareto_pool([item.point for item in ranked], strict=inputs.strict_dominance)
    choice = select_best_within_budget(frontier, inputs.request.max_money)
    selected = None
    if choice is not None:
        selected = next(item for item in ranked if item.point.strategy_id == choice.strategy_id)
    if not evaluations:
        logger.warning("no strategy survived the filters")

    finished = time.perf_counter()
    return SearchReport(
        request=_request_echo(inputs),
        counts=counts,
        ranked=ranked[: inputs.top_k],
        frontier=frontier,
        selected=selected,
        timings=SearchTimings(searched - started, simulated - searched, finished - started),
        budgeted=inputs.request.max_money is not None,
    )
