"""Runtime configuration for the service and CLI."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .imagery import DEFAULT_CACHE_BUDGET_BYTES, TOKEN_ENV

DEFAULT_TILE_URL = "https://tile.openstreetmap.org/{z}/{x}/{y}.png"


@dataclass
class AppConfig:
    """Knobs for the service process; JSON config file mirrors the fields."""

    provider: str = "fixture"  # "fixture" | "mapillary"
    fixture_dir: Path | None = None
    token_env: str = TOKEN_ENV
    cache_dir: Path | None = None
    cache_budget_bytes: int = DEFAULT_CACHE_BUDGET_BYTES
    backend: str = "mock"  # "mock" | "http"
    backend_url: str | None = None
    backend_token_env: str = "STREETSTAGE_BACKEND_TOKEN"
    mock_latency_s: float = 0.0
    workdir: Path = field(default_factory=lambda: Path("streetstage_work"))
    tile_url: str = DEFAULT_TILE_URL
    static_dir: Path | None = None

    @property
    def provider_token(self) -> str:
        return os.environ.get(self.token_env, "")

    @property
    def backend_token(self) -> str | None:
        return os.environ.get(self.backend_token_env) or None


def load_config(path: str | Path | None = None, **overrides) -> AppConfig:
    """Config from an optional JSON file plus keyword overrides."""
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
    raw.update({k: v for k, v in overrides.items() if v is not None})
    config = AppConfig()
    for key, value in raw.items():
        if not hasattr(config, key):
            raise ValueError(f"unknown config key {key!r}")
        if key in ("fixture_dir", "cache_dir", "workdir", "static_dir") and value is not None:
            value = Path(value)
        setattr(config, key, value)
    return config
