"""Expansion of a search request into the GPU configurations to explore."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

from .errors import ModeError
from .schemas import GpuCatalog, SearchRequest
from .utils import linear_ladder, pow2_ladder


@dataclass(frozen=True)
class GpuConfig:
    """A runnable GPU collection.

    Concrete configs list (type, count) entries. The heterogeneous config is
    symbolic: it carries the total and per-type limits, and the per-type
    counts are resolved by pipeline partitioning.
    """

    entries: Tuple[Tuple[str, int], ...]
    total: int
    type_limits: Tuple[Tuple[str, Optional[int]], ...] = ()

    @property
    def heterogeneous(self) -> bool:
        return bool(self.type_limits)

    @property
    def gpu_type(self) -> str:
        if self.heterogeneous or len(self.entries) != 1:
            raise ModeError("config does not have a single gpu type", entity=self.label)
        return self.entries[0][0]

    @property
    def label(self) -> str:
        if self.heterogeneous:
            limits = ",".join(f"{name}<={limit}" for name, limit in self.type_limits)
            return f"{self.total}[{limits}]"
        return "+".join(f"{name}x{count}" for name, count in self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [[name, count] for name, count in self.entries],
            "total": self.total,
            "type_limits": [[name, limit] for name, limit in self.type_limits],
        }


def _require_type(catalog: GpuCatalog, name: str) -> None:
    if name not in catalog:
        raise ModeError(f"unknown gpu type '{name}' (catalog has {', '.join(catalog.names)})", entity=name)


def generate_gpu_configs(req: SearchRequest, catalog: GpuCatalog) -> List[GpuConfig]:
    """Return the GPU configurations the request asks to explore."""
    if req.mode == "homogeneous":
        _require_type(catalog, req.gpu_type)
        available = catalog.find(req.gpu_type).max_available
        if available is not None and req.gpu_count > available:
            raise ModeError(
                f"requested {req.gpu_count} '{req.gpu_type}' gpus but only {available} are available",
                entity=req.gpu_type,
            )
        return [GpuConfig(entries=((req.gpu_type, req.gpu_count),), total=req.gpu_count)]

    if req.mode == "heterogeneous":
        limits = []
        for name, limit in req.type_limits:
            _require_type(catalog, name)
            available = catalog.find(name).max_available
            if available is not None:
                limit = min(limit, available)
            limits.append((name, limit))
        return [GpuConfig(entries=(), total=req.gpu_count, type_limits=tuple(limits))]

    _require_type(catalog, req.gpu_type)
    if req.max_gpus is None or req.max_gpus < 1:
        raise ModeError("cost mode needs max_gpus >= 1", entity="max_gpus")
    max_gpus = req.max_gpus
    available = catalog.find(req.gpu_type).max_available
    if available is not None and available < max_gpus:
        max_gpus = available
        if max_gpus < 1:
            raise ModeError(f"no '{req.gpu_type}' gpus available", entity=req.gpu_type)
    counts = pow2_ladder(max_gpus) if req.ladder == "pow2" else linear_ladder(max_gpus)
    return [GpuConfig(entries=((req.gpu_type, count),), total=count) for count in counts]
