"""Pydantic schemas for every file format and for the search request."""

from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import (
    ACTIVATION_BASE,
    ACTIVATION_REPLICATED,
    ATTENTION_MAP,
    DEFAULT_BYTES_PER_ELEMENT,
    DEFAULT_EFFICIENCY,
    DEFAULT_HOST_BW,
    FRAMEWORK_OVERHEAD_BYTES,
    FULL_RECOMPUTE_INPUT,
    GRAD_BYTES,
    LOGITS_ACTIVATION,
    OPTIMIZER_BYTES,
    SECONDS_PER_HOUR,
    WEIGHT_BYTES,
)


class GpuSpec(BaseModel):
    """Hardware capability, memory, bandwidth and price of one GPU type."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1)
    peak_flops: float = Field(gt=0)
    mem_bytes: float = Field(gt=0)
    intra_node_bw: float = Field(gt=0)
    inter_node_bw: float = Field(gt=0)
    gpus_per_node: int = Field(ge=1)
    price_per_second: float = Field(ge=0)
    max_available: Optional[int] = Field(default=None, ge=0)
    host_bw: float = Field(default=DEFAULT_HOST_BW, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _convert_hourly_price(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        if "price_per_hour" not in data:
            return data
        if "price_per_second" in data:
            raise ValueError("give exactly one of price_per_hour, price_per_second")
        converted = dict(data)
        hourly = converted.pop("price_per_hour")
        if isinstance(hourly, (int, float)) and not isinstance(hourly, bool):
            converted["price_per_second"] = hourly / SECONDS_PER_HOUR
        else:
            converted["price_per_second"] = hourly
        return converted


class GpuCatalog(BaseModel):
    """Set of GPU types with unique names."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    gpus: Tuple[GpuSpec, ...] = Field(min_length=1)

    @field_validator("gpus")
    @classmethod
    def _unique_names(cls, value: Tuple[GpuSpec, ...]) -> Tuple[GpuSpec, ...]:
        seen = set()
        for gpu in value:
            if gpu.name in seen:
                raise ValueError(f"duplicate gpu name '{gpu.name}'")
            seen.add(gpu.name)
        return value

    @property
    def names(self) -> List[str]:
        return [gpu.name for gpu in self.gpus]

    def __len__(self) -> int:
        return len(self.gpus)

    def __contains__(self, name: object) -> bool:
        return any(gpu.name == name for gpu in self.gpus)

    def find(self, name: str) -> Optional[GpuSpec]:
        for gpu in self.gpus:
            if gpu.name == name:
                return gpu
        return None


class ModelArch(BaseModel):
    """Transformer shape."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: str = Field(min_length=1)
    num_layers: int = Field(ge=1)
    hidden_size: int = Field(ge=1)
    num_heads: int = Field(ge=1)
    intermediate_size: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    mlp_matrices: Literal[2, 3] = 2
    tied_embeddings: bool = True

    @model_validator(mode="after")
    def _heads_divide_hidden(self) -> "ModelArch":
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        return self


class TrainConfig(BaseModel):
    """Run settings shared by every strategy of a search."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    global_batch: int = Field(ge=1)
    seq_len: int = Field(ge=1)
    bytes_per_element: int = Field(default=DEFAULT_BYTES_PER_ELEMENT, ge=1)


class MemCoeffs(BaseModel):
    """Coefficients of the per-layer memory formula."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    activation_base: float = Field(default=ACTIVATION_BASE, ge=0)
    activation_replicated: float = Field(default=ACTIVATION_REPLICATED, ge=0)
    attention_map: float = Field(default=ATTENTION_MAP, ge=0)
    full_recompute_input: float = Field(default=FULL_RECOMPUTE_INPUT, ge=0)
    flash_attn_map_factor: float = Field(default=0.0, ge=0)
    selective_map_factor: float = Field(default=0.0, ge=0)
    logits_activation: float = Field(default=LOGITS_ACTIVATION, ge=0)
    weight_bytes: float = Field(default=WEIGHT_BYTES, ge=0)
    grad_bytes: float = Field(default=GRAD_BYTES, ge=0)
    optimizer_bytes: float = Field(default=OPTIMIZER_BYTES, ge=0)
    overhead_bytes: float = Field(default=FRAMEWORK_OVERHEAD_BYTES, ge=0)

    @model_validator(mode="after")
    def _replicated_within_base(self) -> "MemCoeffs":
        if self.activation_replicated > self.activation_base:
            raise ValueError("activation_replicated cannot exceed activation_base")
        return self


class RangeSpec(BaseModel):
    """Candidate range of an integer search parameter."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    min: int = Field(ge=1)
    max: int = Field(ge=1)
    scale: Literal["pow2", "linear"] = "pow2"

    @model_validator(mode="after")
    def _ordered(self) -> "RangeSpec":
        if self.min > self.max:
            raise ValueError(f"range min {self.min} exceeds max {self.max}")
        return self


class MoeSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_experts: int = Field(ge=1)
    ep_size: int = Field(ge=1)
    topk: int = Field(ge=1)


class ProfileRow(BaseModel):
    """One profiling measurement."""

    kind: str = Field(min_length=1)
    m: int = Field(ge=0)
    n: int = Field(ge=0)
    k_or_bytes: float = Field(ge=0)
    gpu: str = Field(min_length=1)
    scope: Literal["intra_node", "inter_node", "host"]
    measured_seconds: float


class ConstantModelFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["constant"]
    eta: float = Field(default=DEFAULT_EFFICIENCY, gt=0, le=1)


class LookupEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    bucket: str
    gpu: str
    scope: str
    eta: float = Field(gt=0, le=1)


class LookupModelFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["lookup"]
    default: float = Field(default=DEFAULT_EFFICIENCY, gt=0, le=1)
    entries: List[LookupEntry] = Field(default_factory=list)


class TreeNode(BaseModel):
    """Binary tree node: either a split or a leaf."""

    model_config = ConfigDict(extra="forbid")

    feature: Optional[int] = Field(default=None, ge=0)
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    leaf: Optional[float] = None

    @model_validator(mode="after")
    def _split_or_leaf(self) -> "TreeNode":
        is_leaf = self.leaf is not None
        is_split = None not in (self.feature, self.threshold, self.left, self.right)
        if is_leaf == is_split:
            raise ValueError("node must be either a leaf or a complete split")
        return self


TreeNode.model_rebuild()


class EnsembleModelFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["ensemble"]
    base_score: float = 0.0
    trees: List[TreeNode] = Field(min_length=1)


EfficiencyModelFile = Union[ConstantModelFile, LookupModelFile, EnsembleModelFile]


SearchMode = Literal["homogeneous", "heterogeneous", "cost"]


def _coerce_type_limits(value: Any) -> Any:
    if isinstance(value, dict):
        return [(name, count) for name, count in value.items()]
    return value


class SearchRequest(BaseModel):
    """GPU-pool request for one of the three search modes."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: SearchMode
    gpu_type: Optional[str] = None
    gpu_count: Optional[int] = Field(default=None, ge=1)
    type_limits: Tuple[Tuple[str, int], ...] = ()
    max_gpus: Optional[int] = None
    max_money: Optional[float] = Field(default=None, ge=0)
    ladder: Literal["pow2", "linear"] = "pow2"

    @field_validator("type_limits", mode="before")
    @classmethod
    def _limits_from_mapping(cls, value: Any) -> Any:
        return _coerce_type_limits(value)

    @field_validator("type_limits")
    @classmethod
    def _limits_positive(cls, value: Tuple[Tuple[str, int], ...]) -> Tuple[Tuple[str, int], ...]:
        names = [name for name, _ in value]
        if len(set(names)) != len(names):
            raise ValueError("type_limits names must be unique")
        for name, count in value:
            if count < 1:
                raise ValueError(f"type limit for '{name}' must be >= 1")
        return value

    @model_validator(mode="after")
    def _mode_fields(self) -> "SearchRequest":
        missing = []
        if self.mode in ("homogeneous", "cost") and not self.gpu_type:
            missing.append("gpu_type")
        if self.mode in ("homogeneous", "heterogeneous") and self.gpu_count is None:
            missing.append("gpu_count")
        if self.mode == "heterogeneous" and not self.type_limits:
            missing.append("type_limits")
        if self.mode == "cost" and self.max_gpus is None:
            missing.append("max_gpus")
        if missing:
            raise ValueError(f"mode '{self.mode}' requires: {', '.join(missing)}")
        return self


class SearchSettings(BaseModel):
    """Everything run_search needs; built by the CLI and by the HTTP endpoint."""

    model_config = ConfigDict(extra="forbid")

    fixture: Optional[str] = None
    mode: Optional[SearchMode] = None
    model: Optional[str] = None
    catalog: Optional[str] = None
    space: Optional[str] = None
    rules: Optional[str] = None
    mem_coeffs: Optional[str] = None
    eff_model: Optional[str] = None
    global_batch: Optional[int] = Field(default=None, ge=1)
    seq_len: Optional[int] = Field(default=None, ge=1)
    bytes_per_element: Optional[int] = Field(default=None, ge=1)
    gpu_type: Optional[str] = None
    gpu_count: Optional[int] = Field(default=None, ge=1)
    type_limits: Optional[Tuple[Tuple[str, int], ...]] = None
    max_gpus: Optional[int] = None
    max_money: Optional[float] = Field(default=None, ge=0)
    total_tokens: Optional[float] = Field(default=None, gt=0)
    top_k: int = Field(default=10, ge=0)
    workers: int = Field(default=1, ge=1)
    strict_dominance: bool = False
    ladder: Optional[Literal["pow2", "linear"]] = None

    @field_validator("type_limits", mode="before")
    @classmethod
    def _limits_from_mapping(cls, value: Any) -> Any:
        return _coerce_type_limits(value)


class FixtureRequest(BaseModel):
    """Default request values shipped with a fixture (request.json)."""

    model_config = ConfigDict(extra="forbid")

    mode: SearchMode
    global_batch: int = Field(ge=1)
    seq_len: int = Field(ge=1)
    bytes_per_element: int = Field(default=DEFAULT_BYTES_PER_ELEMENT, ge=1)
    gpu_type: Optional[str] = None
    gpu_count: Optional[int] = Field(default=None, ge=1)
    type_limits: Tuple[Tuple[str, int], ...] = ()
    max_gpus: Optional[int] = None
    max_money: Optional[float] = Field(default=None, ge=0)

    @field_validator("type_limits", mode="before")
    @classmethod
    def _limits_from_mapping(cls, value: Any) -> Any:
        return _coerce_type_limits(value)


SpaceFile = Dict[str, Any]
