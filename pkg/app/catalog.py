"""GPU catalog and model-architecture loading plus parameter accounting."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Type, TypeVar

from pydantic import BaseModel, ValidationError

from .errors import CatalogError, ParaSearchError
from .schemas import GpuCatalog, ModelArch
from .utils import describe_validation_error, first_error_field

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def read_json(path: str | Path, error_cls: Type[ParaSearchError]) -> Any:
    """Read a JSON file, wrapping I/O and syntax failures into error_cls."""
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise error_cls(f"cannot read {file_path}: {exc.strerror or exc}", entity=str(file_path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise error_cls(
            f"malformed JSON in {file_path}: {exc.msg} (line {exc.lineno}, column {exc.colno})",
            entity=str(file_path),
        ) from exc


def validate_model(
    schema: Type[ModelT], data: Any, error_cls: Type[ParaSearchError], source: str
) -> ModelT:
    """Validate data against schema, naming the offending field on failure."""
    try:
        return schema.model_validate(data)
    except ValidationError as exc:
        raise error_cls(
            f"invalid {source}: {describe_validation_error(exc)}",
            entity=first_error_field(exc) or source,
        ) from exc


def load_catalog(path: str | Path) -> GpuCatalog:
    """Load and validate a GPU catalog file."""
    data = read_json(path, CatalogError)
    catalog = validate_model(GpuCatalog, data, CatalogError, f"catalog {path}")
    logger.debug("loaded catalog %s with %d gpu types", path, len(catalog))
    return catalog


def dump_catalog(catalog: GpuCatalog) -> str:
    """Serialise a catalog; prices are written per second."""
    payload = catalog.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def load_model_arch(path: str | Path) -> ModelArch:
    """Load and validate a transformer model-shape file."""
    data = read_json(path, CatalogError)
    arch = validate_model(ModelArch, data, CatalogError, f"model {path}")
    logger.debug("loaded model %s (%d layers, hidden %d)", arch.family, arch.num_layers, arch.hidden_size)
    return arch


def layer_param_count(arch: ModelArch) -> int:
    """Parameters of one transformer layer: attention, MLP and two norms."""
    h = arch.hidden_size
    attention = 4 * h * h
    mlp = arch.mlp_matrices * h * arch.intermediate_size
    norms = 2 * h
    return attention + mlp + norms


def embedding_param_count(arch: ModelArch) -> int:
    return arch.vocab_size * arch.hidden_size


def param_count(arch: ModelArch) -> int:
    """Total parameters; embeddings counted once when tied, twice otherwise."""
    embedding_copies = 1 if arch.tied_embeddings else 2
    return arch.num_layers * layer_param_count(arch) + embedding_copies * embedding_param_count(arch)
