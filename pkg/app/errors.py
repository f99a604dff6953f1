"""Exception hierarchy; every error names its module and offending entity."""

from __future__ import annotations


class ParaSearchError(Exception):
    """Base error carrying the owning module and the offending entity."""

    module = "parasearch"
    code = "SEARCH_ERROR"

    def __init__(self, message: str, entity: str | None = None):
        super().__init__(message)
        self.message = message
        self.entity = entity

    def __str__(self) -> str:
        base = super().__str__()
        if self.entity:
            return f"[{self.module}] {base} (entity: {self.entity})"
        return f"[{self.module}] {base}"


class CatalogError(ParaSearchError):
    module = "catalog"
    code = "INVALID_CATALOG"


class ModeError(ParaSearchError):
    module = "modes"
    code = "INVALID_REQUEST"


class StrategyError(ParaSearchError):
    module = "strategy"
    code = "INVALID_STRATEGY"


class RuleSyntaxError(ParaSearchError):
    module = "rulelang"
    code = "RULE_SYNTAX"

    def __init__(self, message: str, line: int, column: int, entity: str | None = None):
        super().__init__(f"{message} at line {line}, column {column}", entity)
        self.line = line
        self.column = column


class RuleEvalError(ParaSearchError):
    module = "rulelang"
    code = "RULE_EVAL"


class MemoryEstimateError(ParaSearchError):
    module = "memest"
    code = "MEMORY_ESTIMATE"


class EfficiencyModelError(ParaSearchError):
    module = "costsim"
    code = "EFFICIENCY_MODEL"


class CostModelError(ParaSearchError):
    module = "costsim"
    code = "COST_MODEL"


class UnsupportedStrategyError(CostModelError):
    code = "UNSUPPORTED_STRATEGY"


class HeteroError(ParaSearchError):
    module = "hetero"
    code = "HETERO"


class PricingError(ParaSearchError):
    module = "pareto"
    code = "PRICING"


class FixtureError(ParaSearchError):
    module = "fixtures"
    code = "UNKNOWN_FIXTURE"


class ReportError(ParaSearchError):
    module = "cli"
    code = "REPORT"
