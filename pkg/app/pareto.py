"""Money pricing, the throughput/cost frontier and budget selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .costsim import CostBreakdown
from .errors import PricingError
from .schemas import GpuCatalog
from .strategy import Strategy


@dataclass(frozen=True)
class BillLine:
    gpu_type: str
    count: int
    fee_per_second: float


@dataclass(frozen=True)
class ParetoPoint:
    """Throughput (tokens/s) and money for one strategy over the pricing horizon."""

    strategy_id: str
    throughput: float
    money: float
    duration_s: float = 0.0
    gpu_bill: Tuple[BillLine, ...] = ()

    def sort_key(self) -> Tuple[float, float, str]:
        return (-self.throughput, self.money, self.strategy_id)

    def to_dict(self) -> dict:
        return {
            "strategy_id": self.strategy_id,
            "throughput": self.throughput,
            "money": self.money,
            "duration_s": self.duration_s,
            "gpu_bill": [
                {"gpu_type": line.gpu_type, "count": line.count, "fee_per_second": line.fee_per_second}
                for line in self.gpu_bill
            ],
        }


@dataclass(frozen=True)
class Evaluation:
    """A simulated and priced strategy."""

    strategy: Strategy
    cost: CostBreakdown
    point: ParetoPoint


def money_cost(duration_s: float, bill: Iterable[Tuple[int, float]]) -> float:
    """Sum of duration * count * fee over the bill."""
    if duration_s < 0:
        raise PricingError(f"duration must be >= 0, got {duration_s}")
    terms = []
    for count, fee in bill:
        if count < 0 or fee < 0:
            raise PricingError(f"bill entries must be >= 0, got count={count} fee={fee}")
        terms.append(duration_s * count * fee)
    return math.fsum(terms)


def pricing_duration(cost: CostBreakdown, total_tokens: Optional[float] = None) -> float:
    """Seconds being paid for: the token budget when given, else one iteration."""
    if total_tokens is None:
        return cost.t_total
    if total_tokens <= 0:
        raise PricingError(f"total_tokens must be > 0, got {total_tokens}")
    return total_tokens / cost.throughput_tokens_per_s


def price_strategy(
    s: Strategy, cost: CostBreakdown, catalog: GpuCatalog, total_tokens: Optional[float] = None
) -> ParetoPoint:
    duration = pricing_duration(cost, total_tokens)
    lines = []
    for gpu_type, count in s.gpu_bill():
        gpu = catalog.find(gpu_type)
        if gpu is None:
            raise PricingError(f"no price for unknown gpu type '{gpu_type}'", entity=gpu_type)
        lines.append(BillLine(gpu_type, count, gpu.price_per_second))
    money = money_cost(duration, [(line.count, line.fee_per_second) for line in lines])
    return ParetoPoint(s.id, cost.throughput_tokens_per_s, money, duration, tuple(lines))


def evaluate(
    s: Strategy, cost: CostBreakdown, catalog: GpuCatalog, total_tokens: Optional[float] = None
) -> Evaluation:
    return Evaluation(s, cost, price_strategy(s, cost, catalog, total_tokens))


def sort_strategies(points: Iterable[ParetoPoint]) -> List[ParetoPoint]:
    """Throughput descending, then money ascending, then strategy id."""
    return sorted(points, key=ParetoPoint.sort_key)


def sort_evaluations(evaluations: Iterable[Evaluation]) -> List[Evaluation]:
    return sorted(evaluations, key=lambda item: item.point.sort_key())


def pareto_pool(points: Sequence[ParetoPoint], strict: bool = False) -> List[ParetoPoint]:
    """Points not dominated in (throughput up, money down), throughput descending.

    The default drops a point when another is at least as fast and cheaper,
    or faster and no dearer; equal duplicates keep the lowest id. With
    strict=True a point is dropped only when another is both faster and
    cheaper, so equal-throughput points at different prices all survive.
    """
    ordered = sort_strategies(points)
    pool: List[ParetoPoint] = []
    if not strict:
        cheapest = math.inf
        for point in ordered:
            if point.money < cheapest:
                pool.append(point)
                cheapest = point.money
        return pool

    cheapest_faster = math.inf
    index = 0
    while index < len(ordered):
        group_end = index
        while group_end < len(ordered) and ordered[group_end].throughput == ordered[index].throughput:
            group_end += 1
        group = ordered[index:group_end]
        pool.extend(point for point in group if point.money <= cheapest_faster)
        cheapest_faster = min(cheapest_faster, group[0].money)
        index = group_end
    return pool


def select_best_within_budget(
    frontier: Sequence[ParetoPoint], budget: Optional[float] = None
) -> Optional[ParetoPoint]:
    """Fastest point whose money fits the budget; None when nothing fits."""
    for point in sort_strategies(frontier):
        if budget is None or point.money <= budget:
            return point
    return None
