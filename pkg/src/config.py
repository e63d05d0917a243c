import hashlib
import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a scenario file cannot be read or fails validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometryConfig(_Section):
    block_length: float = Field(default=200.0, gt=0)
    box_size: float = Field(default=20.0, gt=0)
    control_length: float = Field(default=80.0, gt=0)
    stub_length: float = Field(default=50.0, gt=0)
    # Defaults to box_size / 4
    lane_offset: float | None = Field(default=None, gt=0)
    arc_points: int = Field(default=24, ge=3)


class GridConfig(_Section):
    rows: int = Field(default=5, ge=1)
    cols: int = Field(default=5, ge=1)
    geometry: GeometryConfig = GeometryConfig()


class LimitsConfig(_Section):
    u_min: float = -3.0
    u_max: float = 3.0
    v_min: float = 2.0
    v_max: float = 15.0

    @model_validator(mode="after")
    def _ordered(self) -> "LimitsConfig":
        if not self.u_min < 0 < self.u_max:
            raise ValueError("acceleration limits must satisfy u_min < 0 < u_max")
        if not 0 < self.v_min <= self.v_max:
            raise ValueError("speed limits must satisfy 0 < v_min <= v_max")
        return self


class SafetyConfig(_Section):
    rho: float = Field(default=2.0, gt=0)
    phi: float = Field(default=0.5, ge=0)


class RoutingConfig(_Section):
    routes_per_cav: int = Field(default=3, ge=1, le=3)
    kappa: float = Field(default=0.5, ge=0)
    delayed_only: bool = True
    oracle_budget: int = Field(default=3**9, ge=1)


class SearchConfig(_Section):
    step: float = Field(default=0.05, gt=0)
    tolerance: float = Field(default=1e-4, gt=0)


class TripConfig(_Section):
    origin: int = Field(ge=0)
    destination: int = Field(ge=0)
    start_time: float = Field(ge=0)

    @model_validator(mode="after")
    def _distinct(self) -> "TripConfig":
        if self.origin == self.destination:
            raise ValueError("origin and destination must differ")
        return self


class RandomTripsConfig(_Section):
    count: int = Field(default=100, ge=0)
    # Falls back to the scenario seed
    seed: int | None = None
    window: tuple[float, float] = (0.0, 120.0)

    @field_validator("window")
    @classmethod
    def _window_ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        lo, hi = value
        if not 0 <= lo <= hi:
            raise ValueError("window must satisfy 0 <= start <= end")
        return value


class ScenarioConfig(_Section):
    network: GridConfig | None = None
    network_file: str | None = None
    limits: LimitsConfig = LimitsConfig()
    safety: SafetyConfig = SafetyConfig()
    routing: RoutingConfig = RoutingConfig()
    search: SearchConfig = SearchConfig()
    departure_speed_ratio: float = Field(default=0.8, gt=0, le=1)
    stall_delay: float = Field(default=0.5, gt=0)
    trips: list[TripConfig] | None = None
    random_trips: RandomTripsConfig | None = None
    mode: Literal["proposed", "baseline", "oracle"] = "proposed"
    seed: int = 0
    output_dir: str = "runs/latest"

    @model_validator(mode="after")
    def _sources(self) -> "ScenarioConfig":
        if self.network is not None and self.network_file is not None:
            raise ValueError("give either 'network' or 'network_file', not both")
        if self.trips is not None and self.random_trips is not None:
            raise ValueError("give either 'trips' or 'random_trips', not both")
        if self.departure_speed_ratio * self.limits.v_max < self.limits.v_min:
            raise ValueError("departure speed (departure_speed_ratio * v_max) falls below v_min")
        return self

    @property
    def grid(self) -> GridConfig:
        return self.network or GridConfig()

    @property
    def trip_source(self) -> RandomTripsConfig | list[TripConfig]:
        if self.trips is not None:
            return self.trips
        return self.random_trips or RandomTripsConfig()

    def resolved(self) -> dict[str, Any]:
        """Every setting with defaults filled in, as written to resolved_config.json."""
        return self.model_dump(mode="json")

    def fingerprint(self) -> str:
        """SHA-256 over everything that defines the traffic, excluding mode and output location."""
        payload = self.model_dump(mode="json", exclude={"mode", "output_dir"})
        if self.network is None and self.network_file is None:
            payload["network"] = GridConfig().model_dump(mode="json")
        if self.trips is None and self.random_trips is None:
            payload["random_trips"] = RandomTripsConfig().model_dump(mode="json")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _line_of(root: yaml.Node | None, loc: tuple[int | str, ...]) -> int:
    """1-based line of the deepest YAML node reachable along a validation error location."""
    if root is None:
        return 1
    node = root
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((value for k, value in node.value if k.value == str(key)), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and 0 <= key < len(node.value):
            node = node.value[key]
        else:
            break
    return node.start_mark.line + 1


def load_scenario(config_path: str | Path) -> ScenarioConfig:
    """Load a scenario from a YAML or JSON file.

    Unknown keys and out-of-range values are rejected. Every problem is
    reported as ``<file>:<line>: <field>: <message>``.
    Raises ConfigError on invalid config.
    """
    path = Path(config_path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{config_path}: cannot read scenario file: {e.strerror}") from e

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else 1
        raise ConfigError(f"{config_path}:{line}: {e.problem}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{config_path}:1: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}:1: scenario must be a mapping")

    try:
        config = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            field = ".".join(str(part) for part in error["loc"]) or "<root>"
            problems.append(f"{config_path}:{_line_of(root, error['loc'])}: {field}: {error['msg']}")
        raise ConfigError("\n".join(problems)) from e

    logger.debug("Loaded scenario %s (fingerprint %s)", config_path, config.fingerprint()[:12])
    return config


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CAVSIM_")

    log: Literal["error", "info", "debug"] = "info"

    # Closed-form re-check of every ledger commit against all co-present entries
    verify_commits: bool = False

    @field_validator("log", mode="before")
    @classmethod
    def _lower(cls, value: Any) -> Any:
        return value.lower() if isinstance(value, str) else value

    @cached_property
    def log_level(self) -> int:
        return getattr(logging, self.log.upper())


settings = Settings()
