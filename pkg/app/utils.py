"""Small numeric, hashing and formatting helpers."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Iterator, List

from pydantic import ValidationError


def pow2_range(low: int, high: int) -> List[int]:
    """Return the powers of two inside [low, high], ascending."""
    values = []
    candidate = 1
    while candidate <= high:
        if candidate >= low:
            values.append(candidate)
        candidate *= 2
    return values


def pow2_ladder(maximum: int) -> List[int]:
    """Doubling ladder 2, 4, 8, ... capped at maximum, always ending at maximum."""
    rungs = pow2_range(2, maximum)
    if maximum not in rungs:
        rungs.append(maximum)
    return sorted(set(rungs))


def linear_ladder(maximum: int, step: int = 2) -> List[int]:
    """Arithmetic ladder step, 2*step, ... capped at maximum, always ending at maximum."""
    rungs = list(range(step, maximum + 1, step))
    if maximum not in rungs:
        rungs.append(maximum)
    return sorted(set(rungs))


def split_evenly(total: int, parts: int) -> Iterator[int]:
    """Split total into parts, giving the remainder to the earliest parts."""
    base, extra = divmod(total, parts)
    for index in range(parts):
        yield base + (1 if index < extra else 0)


def stable_hash(payload: Any, length: int = 16) -> str:
    """Deterministic short hash of a JSON-serialisable payload."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    return digest[:length]


def describe_validation_error(err: ValidationError) -> str:
    """Flatten a pydantic error into 'field.path: message; ...'."""
    parts = []
    for item in err.errors():
        location = ".".join(str(piece) for piece in item.get("loc", ())) or "<root>"
        parts.append(f"{location}: {item.get('msg', 'invalid value')}")
    return "; ".join(parts)


def first_error_field(err: ValidationError) -> str | None:
    for item in err.errors():
        location = item.get("loc", ())
        if location:
            return ".".join(str(piece) for piece in location)
    return None


def candidate_range(low: int, high: int, scale: str) -> List[int]:
    """Expand a {min, max, scale} range object into its candidate values."""
    if scale == "pow2":
        return pow2_range(low, high)
    return list(range(low, high + 1))
