"""Entry point for ``python -m app``."""

from .cli import main

raise SystemExit(main())
