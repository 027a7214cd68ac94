"""Pipeline configuration: a YAML (or JSON) mapping onto :class:`PipelineConfig`."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import yaml

from .extract import DEFAULT_BOGONS

# Fixed clock for offline runs so cached timestamps are reproducible.
FIXTURE_EPOCH = "2020-01-01T00:00:00Z"

_PATH_KEYS = ("samples_dir", "manifest", "geo_fixture", "scan_fixture", "amplification_ruleset", "cache_path")
_SECRET_HINTS = ("key", "secret", "token", "password")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # inputs
    samples_dir: str | None = None
    manifest: str | None = None
    geo_fixture: str | None = None
    scan_fixture: str | None = None
    amplification_ruleset: str | None = None
    cache_path: str | None = None
    # extraction
    bogons: list[str] = field(default_factory=lambda: list(DEFAULT_BOGONS))
    raw32: bool = False
    workers: int = 1
    # affinity
    overlap_metric: str = "jaccard"
    keep_pair_table: bool = False
    multiplicity_threshold: int = 10
    # geo
    cluster_key: str = "country"
    grid_degrees: float = 5.0
    min_degree: int = 500
    top_k: int = 5
    distance_bin_km: float = 1000.0
    # exposure / netscope
    threshold: float = 0.10
    min_support: int = 20
    # enrichment
    offline: bool = False
    rate_limit: float = 1.0
    ttl_days: float = 30.0
    in_flight: int = 4
    clock: str | None = None

    def validate(self) -> "PipelineConfig":
        if self.overlap_metric not in ("jaccard", "containment"):
            raise ConfigError(f"overlap_metric must be jaccard or containment, not {self.overlap_metric!r}")
        if self.cluster_key not in ("country", "grid"):
            raise ConfigError(f"cluster_key must be country or grid, not {self.cluster_key!r}")
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must lie in (0, 1]")
        for name in ("min_support", "min_degree", "workers", "in_flight", "top_k", "multiplicity_threshold"):
            if getattr(self, name) < (0 if name in ("min_support", "min_degree") else 1):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")
        for name in ("rate_limit", "ttl_days", "grid_degrees", "distance_bin_km"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.clock is not None:
            parse_time(self.clock)
        return self

    @property
    def ttl_seconds(self) -> float:
        return self.ttl_days * 86400.0

    def fixed_clock(self) -> float | None:
        """Pinned time for the store, or None for wall-clock time."""
        if self.clock is not None:
            return parse_time(self.clock)
        if self.offline:
            return parse_time(FIXTURE_EPOCH)
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_time(text: str) -> float:
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ConfigError(f"clock {text!r} is not an ISO-8601 timestamp") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def from_mapping(data: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    for key in data:
        if key not in known:
            if any(h in key.lower() for h in _SECRET_HINTS):
                raise ConfigError(f"config key {key!r} looks like a secret; provider keys come from the environment")
            raise ConfigError(f"unknown config key {key!r}")
    values = dict(data)
    if base_dir is not None:
        for key in _PATH_KEYS:
            if values.get(key):
                values[key] = str((Path(base_dir) / values[key]).resolve())
    if "bogons" in values:
        values["bogons"] = list(values["bogons"] or [])
    try:
        return PipelineConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"config {path} must be a mapping")
    return from_mapping(data, p.parent)
