"""Shipped fixtures: model shape, catalog, space, rules, coefficients and profile per name."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional

from .catalog import load_catalog, load_model_arch, read_json, validate_model
from .constants import FIXTURES_ENV
from .efficiency import ProfileSample, load_profile_csv
from .errors import FixtureError
from .memest import load_mem_coeffs
from .rulelang import RuleSet, load_rules
from .schemas import FixtureRequest, GpuCatalog, MemCoeffs, ModelArch

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
CATALOG_FILE = "catalog.json"
SPACE_FILE = "space.json"
COEFFS_FILE = "coeffs.json"
RULES_FILE = "rules.txt"
PROFILE_FILE = "profile.csv"
REQUEST_FILE = "request.json"


def fixtures_root() -> Path:
    """PARASEARCH_FIXTURES when set, else the fixtures/ directory of the repository."""
    override = os.getenv(FIXTURES_ENV)
    if override:
        return Path(override)
    return Path(__file__).resolve().parent.parent / "fixtures"


def available_fixtures(root: Optional[Path] = None) -> List[str]:
    base = root or fixtures_root()
    if not base.is_dir():
        return []
    return sorted(entry.name for entry in base.iterdir() if (entry / MODEL_FILE).is_file())


@dataclass(frozen=True)
class Fixture:
    name: str
    directory: Path
    arch: ModelArch
    catalog: GpuCatalog
    space: Any
    rules: RuleSet
    coeffs: MemCoeffs
    samples: List[ProfileSample]
    request: FixtureRequest

    def path(self, filename: str) -> Path:
        return self.directory / filename


def load_fixture(name: str, root: Optional[Path] = None) -> Fixture:
    """Load and validate every file of a named fixture."""
    base = root or fixtures_root()
    directory = base / name
    if not (directory / MODEL_FILE).is_file():
        available = ", ".join(available_fixtures(base)) or "none"
        raise FixtureError(f"unknown fixture '{name}' (available: {available})", entity=name)
    catalog = load_catalog(directory / CATALOG_FILE)
    fixture = Fixture(
        name=name,
        directory=directory,
        arch=load_model_arch(directory / MODEL_FILE),
        catalog=catalog,
        space=read_json(directory / SPACE_FILE, FixtureError),
        rules=load_rules(directory / RULES_FILE),
        coeffs=load_mem_coeffs(directory / COEFFS_FILE),
        samples=load_profile_csv(directory / PROFILE_FILE, catalog),
        request=validate_model(
            FixtureRequest, read_json(directory / REQUEST_FILE, FixtureError), FixtureError, f"fixture {name} request"
        ),
    )
    logger.debug("loaded fixture %s from %s", name, directory)
    return fixture
