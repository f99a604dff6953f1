"""Search engine for hybrid-parallel training strategies."""

__all__ = [
    "catalog",
    "cli",
    "costsim",
    "efficiency",
    "fixtures",
    "hetero",
    "memest",
    "modes",
    "pareto",
    "rulelang",
    "schemas",
    "search",
    "strategy",
]
