"""Hardware-efficiency models: constant, calibrated lookup and tree ensemble.

An efficiency eta in (0, 1] scales a GPU's peak FLOP rate or a link's
bandwidth down to what a given operator actually achieves.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .catalog import read_json, validate_model
from .constants import BYTE_BUCKETS, DEFAULT_EFFICIENCY, FLOP_BUCKETS, LARGE_BUCKET, MIN_EFFICIENCY
from .errors import EfficiencyModelError
from .schemas import (
    ConstantModelFile,
    EnsembleModelFile,
    GpuCatalog,
    LookupModelFile,
    ProfileRow,
    TreeNode,
)
from .utils import describe_validation_error

logger = logging.getLogger(__name__)

COMPUTE_SCOPE = "device"

# Ensemble feature vector layout.
FEATURE_NAMES = ("log10_theta", "is_comm", "inter_node", "group_size", "log10_peak")

_FAMILIES = {
    "embed": "embed",
    "tp_allreduce": "allreduce",
    "dp_allreduce": "allreduce",
    "dp_reducescatter_gather": "allreduce",
    "allreduce": "allreduce",
    "tp_allgather": "allgather",
    "allgather": "allgather",
    "tp_reducescatter": "reducescatter",
    "reducescatter": "reducescatter",
    "p2p_activation": "p2p",
    "p2p": "p2p",
    "host_offload": "host_offload",
    "host": "host_offload",
}

COMM_FAMILIES = frozenset({"allreduce", "allgather", "reducescatter", "p2p", "host_offload"})


def kind_family(kind: str) -> str:
    """Coarse operator family used as the lookup key."""
    if kind.startswith("matmul") or kind == "logits":
        return "matmul"
    family = _FAMILIES.get(kind)
    if family is None:
        raise EfficiencyModelError(f"unknown operator kind '{kind}'", entity=kind)
    return family


def collective_factor(kind: str, group_size: int) -> float:
    """Bytes each rank moves per payload byte, for ring collectives."""
    family = kind_family(kind)
    g = group_size
    if family == "allreduce":
        return 2.0 * (g - 1) / g
    if family in ("allgather", "reducescatter"):
        return (g - 1) / g
    return 1.0


def size_bucket(theta: float, is_comm: bool) -> str:
    bounds = BYTE_BUCKETS if is_comm else FLOP_BUCKETS
    for name, upper in bounds:
        if theta < upper:
            return name
    return LARGE_BUCKET


def clamp_efficiency(eta: float) -> float:
    if math.isnan(eta):
        return MIN_EFFICIENCY
    return min(1.0, max(MIN_EFFICIENCY, eta))


@dataclass(frozen=True, slots=True)
class EfficiencyQuery:
    """Everything an efficiency model may condition on."""

    kind: str
    theta: float
    gpu: str
    scope: str = COMPUTE_SCOPE
    group_size: int = 1
    peak: float = 1.0

    @property
    def family(self) -> str:
        return kind_family(self.kind)

    @property
    def is_comm(self) -> bool:
        return self.family in COMM_FAMILIES

    def features(self) -> Tuple[float, ...]:
        return (
            math.log10(self.theta) if self.theta > 0 else 0.0,
            1.0 if self.is_comm else 0.0,
            1.0 if self.scope == "inter_node" else 0.0,
            float(self.group_size),
            math.log10(self.peak) if self.peak > 0 else 0.0,
        )


class EfficiencyModel(Protocol):
    def predict(self, query: EfficiencyQuery) -> float: ...


@dataclass(frozen=True)
class ConstantEfficiency:
    eta: float = DEFAULT_EFFICIENCY

    def predict(self, query: EfficiencyQuery) -> float:
        return clamp_efficiency(self.eta)


LookupKey = Tuple[str, str, str, str]


@dataclass(frozen=True)
class LookupEfficiency:
    """Table keyed by (family, size bucket, gpu, scope) with a default."""

    table: Dict[LookupKey, float] = field(default_factory=dict)
    default: float = DEFAULT_EFFICIENCY

    @staticmethod
    def key_for(query: EfficiencyQuery) -> LookupKey:
        scope = query.scope if query.is_comm else COMPUTE_SCOPE
        return (query.family, size_bucket(query.theta, query.is_comm), query.gpu, scope)

    def predict(self, query: EfficiencyQuery) -> float:
        return clamp_efficiency(self.table.get(self.key_for(query), self.default))


def _leaf_value(node: TreeNode, features: Sequence[float]) -> float:
    while node.leaf is None:
        if node.feature >= len(features):
            raise EfficiencyModelError(
                f"tree splits on feature {node.feature} but only {len(features)} exist", entity=str(node.feature)
            )
        node = node.left if features[node.feature] < node.threshold else node.right
    return node.leaf


@dataclass(frozen=True)
class TreeEnsembleEfficiency:
    """Sum of regression-tree leaves plus a base score; x < threshold goes left."""

    trees: Tuple[TreeNode, ...]
    base_score: float = 0.0

    def predict(self, query: EfficiencyQuery) -> float:
        features = query.features()
        return clamp_efficiency(self.base_score + math.fsum(_leaf_value(tree, features) for tree in self.trees))


def predict_efficiency(model: EfficiencyModel, query: EfficiencyQuery) -> float:
    return model.predict(query)


@dataclass(frozen=True)
class ProfileSample:
    """A profiling row resolved to its workload size and peak rate."""

    row: int
    kind: str
    gpu: str
    scope: str
    theta: float
    peak: float
    measured_seconds: float

    @property
    def query(self) -> EfficiencyQuery:
        return EfficiencyQuery(kind=self.kind, theta=self.theta, gpu=self.gpu, scope=self.scope, peak=self.peak)


def calibrate_efficiency(
    samples: Iterable[ProfileSample], default: float = DEFAULT_EFFICIENCY
) -> LookupEfficiency:
    """Median of ideal/measured time per lookup key, clipped into (0, 1]."""
    ratios: Dict[LookupKey, List[float]] = {}
    for sample in samples:
        if not sample.measured_seconds > 0:
            raise EfficiencyModelError(
                f"row {sample.row}: measured_seconds must be > 0, got {sample.measured_seconds}",
                entity=f"row {sample.row}",
            )
        ideal = sample.theta / sample.peak
        ratios.setdefault(LookupEfficiency.key_for(sample.query), []).append(ideal / sample.measured_seconds)
    table = {
        key: float(np.clip(np.median(np.asarray(values)), MIN_EFFICIENCY, 1.0))
        for key, values in sorted(ratios.items())
    }
    logger.info("calibrated %d efficiency entries", len(table))
    return LookupEfficiency(table=table, default=default)


def _resolve_row(row_number: int, row: ProfileRow, catalog: GpuCatalog) -> ProfileSample:
    gpu = catalog.find(row.gpu)
    if gpu is None:
        raise EfficiencyModelError(f"row {row_number}: unknown gpu '{row.gpu}'", entity=f"row {row_number}")
    try:
        family = kind_family(row.kind)
    except EfficiencyModelError as exc:
        raise EfficiencyModelError(f"row {row_number}: {exc.message}", entity=f"row {row_number}") from exc
    if family in COMM_FAMILIES:
        group = max(row.m, 1)
        theta = collective_factor(row.kind, group) * row.k_or_bytes
        peak = {"intra_node": gpu.intra_node_bw, "inter_node": gpu.inter_node_bw, "host": gpu.host_bw}[row.scope]
        scope = row.scope
    else:
        theta = 2.0 * row.m * row.n * row.k_or_bytes if family == "matmul" else float(row.m * row.n)
        peak = gpu.peak_flops
        scope = COMPUTE_SCOPE
    if not theta > 0:
        raise EfficiencyModelError(f"row {row_number}: workload size must be > 0", entity=f"row {row_number}")
    return ProfileSample(row_number, row.kind, row.gpu, scope, theta, peak, row.measured_seconds)


def load_profile_csv(path: str | Path, catalog: GpuCatalog) -> List[ProfileSample]:
    """Parse a profiling CSV; rows are numbered by file line."""
    file_path = Path(path)
    try:
        handle = file_path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise EfficiencyModelError(f"cannot read {file_path}: {exc.strerror or exc}", entity=str(file_path)) from exc
    samples = []
    with handle:
        for line, raw in enumerate(csv.DictReader(handle), start=2):
            try:
                row = ProfileRow.model_validate(raw)
            except ValidationError as exc:
                raise EfficiencyModelError(
                    f"row {line}: {describe_validation_error(exc)}", entity=f"row {line}"
                ) from exc
            samples.append(_resolve_row(line, row, catalog))
    return samples


def load_efficiency_model(path: Optional[str | Path], catalog: Optional[GpuCatalog] = None) -> EfficiencyModel:
    """Load a model file; a .csv profile is calibrated into a lookup table."""
    if path is None:
        return ConstantEfficiency()
    file_path = Path(path)
    if file_path.suffix.lower() == ".csv":
        if catalog is None:
            raise EfficiencyModelError("calibrating a profile needs the gpu catalog", entity=str(file_path))
        return calibrate_efficiency(load_profile_csv(file_path, catalog))

    data = read_json(file_path, EfficiencyModelError)
    if isinstance(data, list):
        data = {"type": "ensemble", "trees": data}
    kind = data.get("type") if isinstance(data, dict) else None
    source = f"efficiency model {file_path}"
    if kind == "constant":
        spec = validate_model(ConstantModelFile, data, EfficiencyModelError, source)
        return ConstantEfficiency(spec.eta)
    if kind == "lookup":
        spec = validate_model(LookupModelFile, data, EfficiencyModelError, source)
        table = {(e.kind, e.bucket, e.gpu, e.scope): e.eta for e in spec.entries}
        return LookupEfficiency(table=table, default=spec.default)
    if kind == "ensemble":
        spec = validate_model(EnsembleModelFile, data, EfficiencyModelError, source)
        return TreeEnsembleEfficiency(trees=tuple(spec.trees), base_score=spec.base_score)
    raise EfficiencyModelError(
        f"{source}: 'type' must be constant, lookup or ensemble, got {kind!r}", entity=str(file_path)
    )
