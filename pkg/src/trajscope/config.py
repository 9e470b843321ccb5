"""Pipeline configuration: INI files, env interpolation, full validation.

Config files are plain INI. String values may embed ``${VAR}`` references
resolved from the process environment, so secrets and machine-local paths
stay out of the file itself (the gateway credential is doubly indirect:
the config names the environment variable, never the key material).
Command-line ``--set section.key=value`` overrides are applied after the
file is read.

Validation never stops at the first problem: every violation found is
collected and reported together in one ConfigError.
"""

from __future__ import annotations

import configparser
import os
import re
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .context import CONTEXT_LAYERS

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

KNOWN_TASKS = ("tte", "ad", "mp", "tmi")


class ConfigError(Exception):
    """Invalid configuration; carries every violation found."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    trajectories: Optional[str] = None
    context: Optional[str] = None
    output_dir: str = "out"


class SegmentationSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w_speed: float = Field(1.0, ge=0.0)
    w_road: float = Field(1.0, ge=0.0)
    w_len: float = Field(1.0, ge=0.0)
    max_seg_points: Optional[int] = Field(256, ge=1)
    road_radius_m: float = Field(200.0, gt=0.0)


class ContextSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta_poi_m: float = Field(100.0, gt=0.0)
    theta_road_m: float = Field(100.0, gt=0.0)
    theta_light_m: float = Field(100.0, gt=0.0)


class RenderSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    target_px: int = Field(512, ge=64)
    layers: tuple[str, ...] = ("poi", "road")
    tiles: str = "synthetic"  # synthetic | directory:<path> | http:<url template>
    tile_cache: Optional[str] = None


class TaskSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "tte"
    prompt_file: Optional[str] = None
    seeds_file: Optional[str] = None
    seed: int = 7
    mp_truncate_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    grid_rows: int = Field(32, ge=1)
    grid_cols: int = Field(32, ge=1)


class AnomalySection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    inject_ratio: float = Field(0.05, gt=0.0, lt=1.0)
    min_pool: int = Field(40, ge=1)
    detour_alpha: float = Field(0.1, gt=0.0, le=1.0)
    detour_cells: float = Field(3.0, gt=0.0)
    grid_cell_m: float = Field(50.0, gt=0.0)
    switch_mu: float = Field(0.3, gt=0.0, lt=1.0)
    endpoint_tolerance_m: float = Field(1000.0, gt=0.0)


class OptimizeSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_rounds: int = Field(5, ge=1)
    target_score: Optional[float] = Field(None, ge=0.0, le=1.0)


class GatewaySection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    backend: str = "mock"  # mock | remote
    model: str = "sim-1"
    fixtures: Optional[str] = None
    fallback: str = "error"  # error | default
    default_text: str = ""
    endpoint: Optional[str] = None
    credential_env: str = "TRAJSCOPE_API_KEY"
    max_in_flight: int = Field(4, ge=1)
    max_attempts: int = Field(3, ge=1)
    backoff_base_s: float = Field(0.5, ge=0.0)
    tokens_per_minute: Optional[int] = Field(None, ge=1)
    timeout_s: float = Field(60.0, gt=0.0)
    price_input_per_mtok: Optional[float] = Field(None, ge=0.0)
    price_output_per_mtok: Optional[float] = Field(None, ge=0.0)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    data: DataSection = DataSection()
    segmentation: SegmentationSection = SegmentationSection()
    context: ContextSection = ContextSection()
    render: RenderSection = RenderSection()
    task: TaskSection = TaskSection()
    anomaly: AnomalySection = AnomalySection()
    optimize: OptimizeSection = OptimizeSection()
    gateway: GatewaySection = GatewaySection()
    # free-form facts bound into prompt knowledge placeholders
    knowledge: dict[str, str] = {}
    jobs: int = Field(1, ge=1)

    def require(self, *dotted: str) -> None:
        """Raise unless every named field is set (e.g. "data.trajectories")."""
        missing = []
        for name in dotted:
            section, key = name.split(".", 1)
            if getattr(getattr(self, section), key) in (None, ""):
                missing.append(f"{name} is required for this command")
        if missing:
            raise ConfigError(missing)


_INT_KEYS = {
    ("segmentation", "max_seg_points"),
    ("render", "target_px"),
    ("task", "seed"),
    ("task", "grid_rows"),
    ("task", "grid_cols"),
    ("anomaly", "min_pool"),
    ("optimize", "max_rounds"),
    ("gateway", "max_in_flight"),
    ("gateway", "max_attempts"),
    ("gateway", "tokens_per_minute"),
    ("root", "jobs"),
}
_FLOAT_KEYS = {
    ("segmentation", "w_speed"),
    ("segmentation", "w_road"),
    ("segmentation", "w_len"),
    ("segmentation", "road_radius_m"),
    ("context", "theta_poi_m"),
    ("context", "theta_road_m"),
    ("context", "theta_light_m"),
    ("task", "mp_truncate_fraction"),
    ("anomaly", "inject_ratio"),
    ("anomaly", "detour_alpha"),
    ("anomaly", "detour_cells"),
    ("anomaly", "grid_cell_m"),
    ("anomaly", "switch_mu"),
    ("anomaly", "endpoint_tolerance_m"),
    ("optimize", "target_score"),
    ("gateway", "backoff_base_s"),
    ("gateway", "timeout_s"),
    ("gateway", "price_input_per_mtok"),
    ("gateway", "price_output_per_mtok"),
}
_LIST_KEYS = {("render", "layers")}


def _expand_env(value: str, violations: list[str], where: str) -> str:
    def sub(m: re.Match) -> str:
        var = m.group(1)
        if var not in os.environ:
            violations.append(f"{where}: environment variable {var} is not set")
            return ""
        return os.environ[var]

    return _ENV_REF.sub(sub, value)


def _coerce(section: str, key: str, raw: str, violations: list[str]):
    where = f"{section}.{key}" if section != "root" else key
    if raw == "":
        return None
    if (section, key) in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            violations.append(f"{where}: expected an integer, got {raw!r}")
            return None
    if (section, key) in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            violations.append(f"{where}: expected a number, got {raw!r}")
            return None
    if (section, key) in _LIST_KEYS:
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw


def parse_overrides(pairs: Sequence[str]) -> dict[str, dict[str, str]]:
    """Parse --set pairs of the form section.key=value into nested dicts."""
    out: dict[str, dict[str, str]] = {}
    violations: list[str] = []
    for pair in pairs:
        if "=" not in pair:
            violations.append(f"override {pair!r} is not of the form section.key=value")
            continue
        name, value = pair.split("=", 1)
        if "." in name:
            section, key = name.split(".", 1)
        else:
            section, key = "root", name
        if not section or not key:
            violations.append(f"override {pair!r} is not of the form section.key=value")
            continue
        out.setdefault(section.strip(), {})[key.strip()] = value
    if violations:
        raise ConfigError(violations)
    return out


def _semantic_checks(cfg: PipelineConfig, base_dir: Path, violations: list[str]) -> None:
    if cfg.task.name not in KNOWN_TASKS:
        violations.append(f"task.name: unknown task {cfg.task.name!r} (expected one of {', '.join(KNOWN_TASKS)})")
    if cfg.gateway.backend not in ("mock", "remote"):
        violations.append(f"gateway.backend: expected mock or remote, got {cfg.gateway.backend!r}")
    if cfg.gateway.fallback not in ("error", "default"):
        violations.append(f"gateway.fallback: expected error or default, got {cfg.gateway.fallback!r}")
    if not cfg.render.layers:
        violations.append("render.layers: at least one context layer is required")
    for layer in cfg.render.layers:
        if layer not in CONTEXT_LAYERS:
            violations.append(f"render.layers: unknown layer {layer!r} (expected subset of {', '.join(CONTEXT_LAYERS)})")
    if cfg.segmentation.w_speed + cfg.segmentation.w_road + cfg.segmentation.w_len <= 0:
        violations.append("segmentation: cost weights must not all be zero")
    tiles = cfg.render.tiles
    if tiles != "synthetic" and not tiles.startswith(("directory:", "http:")):
        violations.append(f"render.tiles: expected synthetic, directory:<path>, or http:<url>, got {tiles!r}")
    if cfg.gateway.backend == "remote" and not cfg.gateway.endpoint:
        violations.append("gateway.endpoint is required when gateway.backend = remote")
    for name, value in (
        ("data.trajectories", cfg.data.trajectories),
        ("data.context", cfg.data.context),
        ("task.prompt_file", cfg.task.prompt_file),
        ("task.seeds_file", cfg.task.seeds_file),
        ("gateway.fixtures", cfg.gateway.fixtures),
    ):
        if value and not (base_dir / value).exists():
            violations.append(f"{name}: path {value!r} does not exist")
    if tiles.startswith("directory:") and not (base_dir / tiles.split(":", 1)[1]).is_dir():
        violations.append(f"render.tiles: directory {tiles.split(':', 1)[1]!r} does not exist")


def resolve_path(cfg_path: Optional[str], value: str) -> Path:
    """Resolve a config-relative path against the config file's directory."""
    base = Path(cfg_path).parent if cfg_path else Path.cwd()
    return (base / value).resolve()


def load_config(
    path: Optional[str] = None, overrides: Sequence[str] = ()
) -> PipelineConfig:
    """Load, override, and validate a pipeline configuration.

    With no path, defaults plus overrides apply. Raises ConfigError
    listing every violation: unreadable file, unset ${VAR} references,
    unparseable numbers, out-of-range values, missing paths.
    """
    violations: list[str] = []
    raw: dict[str, dict[str, object]] = {}

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config file: {exc}"]) from exc
        except configparser.Error as exc:
            raise ConfigError([f"malformed config file: {exc}"]) from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                expanded = _expand_env(value, violations, f"{section}.{key}")
                coerced = _coerce(section, key, expanded, violations)
                raw.setdefault(section, {})[key] = coerced

    for section, entries in parse_overrides(overrides).items():
        for key, value in entries.items():
            expanded = _expand_env(value, violations, f"{section}.{key}")
            coerced = _coerce(section, key, expanded, violations)
            raw.setdefault(section, {})[key] = coerced

    jobs = raw.pop("root", {}).get("jobs")
    payload: dict[str, object] = {
        s: {k: v for k, v in entries.items() if v is not None}
        for s, entries in raw.items()
    }
    if jobs is not None:
        payload["jobs"] = jobs

    known_sections = set(PipelineConfig.model_fields) - {"jobs"}
    for section in list(payload):
        if section != "jobs" and section not in known_sections:
            violations.append(f"unknown config section [{section}]")
            payload.pop(section)

    cfg: Optional[PipelineConfig] = None
    for _ in range(4):  # strip offenders and retry so later checks still run
        try:
            cfg = PipelineConfig.model_validate(payload)
            break
        except ValidationError as exc:
            for err in exc.errors():
                loc = err["loc"]
                message = f"{'.'.join(str(part) for part in loc)}: {err['msg']}"
                if message not in violations:
                    violations.append(message)
                target: object = payload
                for part in loc[:-1]:
                    target = target.get(part, {}) if isinstance(target, dict) else {}
                if isinstance(target, dict):
                    target.pop(loc[-1], None)

    if cfg is not None:
        base_dir = Path(path).parent if path else Path.cwd()
        _semantic_checks(cfg, base_dir, violations)

    if violations:
        raise ConfigError(violations)
    assert cfg is not None
    return cfg


def config_snapshot(cfg: PipelineConfig) -> dict:
    """JSON-safe dump of the effective configuration for run manifests."""
    return cfg.model_dump(mode="json")
