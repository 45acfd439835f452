# src/config.py

import copy
import dataclasses
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Default config path relative to project root
DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "config", "defaults.toml")

BACKEND_KINDS = ("replay", "synthetic-oracle", "external-process")

# Parameters accepted per backend kind; the first tuple lists the mandatory ones.
BACKEND_PARAMS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "replay": (("predictions",), ("predictions",)),
    "synthetic-oracle": ((), ("shift", "drop_rate", "score_low", "distractors", "seed")),
    "external-process": (("command",), ("command", "workers", "timeout")),
}


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_backend_param(kind: str, key: str, value: Any) -> None:
    """Type and range of one backend parameter."""
    if key in ("shift", "distractors") and not (_is_int(value) and value >= 0):
        raise ConfigError(f"{kind} {key} must be a non-negative integer, got {value!r}")
    if key == "workers" and not (_is_int(value) and value >= 1):
        raise ConfigError(f"{kind} workers must be a positive integer, got {value!r}")
    if key == "seed" and not _is_int(value):
        raise ConfigError(f"{kind} seed must be an integer, got {value!r}")
    if key == "drop_rate" and not (_is_number(value) and 0.0 <= value <= 1.0):
        raise ConfigError(f"{kind} drop_rate must be in [0, 1], got {value!r}")
    if key == "score_low" and not (_is_number(value) and 0.0 <= value < 1.0):
        raise ConfigError(f"{kind} score_low must be in [0, 1), got {value!r}")
    if key == "timeout" and not (_is_number(value) and value > 0):
        raise ConfigError(f"{kind} timeout must be a positive number of seconds, got {value!r}")
    if key == "predictions" and not (isinstance(value, str) and value.strip()):
        raise ConfigError(f"{kind} predictions must be a file path, got {value!r}")
    if key == "command" and not (isinstance(value, (str, list)) and value):
        raise ConfigError(f"{kind} command must be a non-empty string or list, got {value!r}")


# --- Config sections ---

@dataclass(frozen=True)
class DataConfig:
    gt: str | None = None
    scene_tags: str | None = None
    predictions: str | None = None
    image_root: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    confidence_threshold: float = 0.5
    max_candidates: int = 3
    relaxed_radii: tuple[int, ...] = (0, 1, 2, 3)
    match_threshold: float = 0.5
    jobs: int = 1
    box_expansion: float = 0.0
    on_error: str = "skip"

    def __post_init__(self):
        for name in ("confidence_threshold", "match_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"pipeline.{name} must be in [0, 1], got {value}")
        if self.max_candidates < 1:
            raise ConfigError(f"pipeline.max_candidates must be >= 1, got {self.max_candidates}")
        if self.jobs < 1:
            raise ConfigError(f"pipeline.jobs must be >= 1, got {self.jobs}")
        radii = self.relaxed_radii
        if not radii or radii[0] != 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError(f"pipeline.relaxed_radii must be strictly ascending from 0, got {list(radii)}")
        if self.box_expansion < 0:
            raise ConfigError(f"pipeline.box_expansion must be >= 0, got {self.box_expansion}")
        if self.on_error not in ("skip", "abort"):
            raise ConfigError(f"pipeline.on_error must be 'skip' or 'abort', got {self.on_error!r}")


@dataclass(frozen=True)
class ReportConfig:
    include_unmatched: bool = False
    exclude_synthesized: bool = True
    curve_step: float = 0.05
    relaxed_column_radius: int = 1
    map_start: float = 0.5
    map_stop: float = 0.95
    map_step: float = 0.05
    label: str = "YOLO+SAM2"
    supervision: str = "bbox only"

    def __post_init__(self):
        if not 0.0 < self.curve_step <= 1.0:
            raise ConfigError(f"report.curve_step must be in (0, 1], got {self.curve_step}")
        if not 0.0 <= self.map_start <= self.map_stop <= 1.0 or self.map_step <= 0:
            raise ConfigError("report.map_start/map_stop/map_step must describe a grid inside [0, 1]")


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        required, allowed = BACKEND_PARAMS[self.kind]
        missing = [k for k in required if k not in self.params]
        if missing:
            raise ConfigError(f"{self.kind} backend is missing parameter(s): {', '.join(missing)}")
        unknown = sorted(set(self.params) - set(allowed))
        if unknown:
            raise ConfigError(f"{self.kind} backend does not accept parameter(s): {', '.join(unknown)}")
        for key, value in self.params.items():
            _check_backend_param(self.kind, key, value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{k: self.params[k] for k in sorted(self.params)}}


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    output_dir: str = "out"
    run_id: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    detector: BackendDescriptor | None = None
    segmenter: BackendDescriptor | None = None

    def snapshot(self) -> dict:
        """Config as recorded in run.json. Worker count is left out: it must not change results."""
        pipeline = dataclasses.asdict(self.pipeline)
        pipeline.pop("jobs")
        pipeline["relaxed_radii"] = list(self.pipeline.relaxed_radii)
        return {
            "seed": self.seed,
            "run_id": self.run_id,
            "data": dataclasses.asdict(self.data),
            "pipeline": pipeline,
            "report": dataclasses.asdict(self.report),
            "detector": self.detector.to_dict() if self.detector else None,
            "segmenter": self.segmenter.to_dict() if self.segmenter else None,
        }


SECTIONS = {"data": DataConfig, "pipeline": PipelineConfig, "report": ReportConfig}
TOP_LEVEL = {"seed", "output_dir", "run_id"}
BACKEND_SECTIONS = ("detector", "segmenter")


# --- Loader ---

class ConfigLoader:
    """Layered run configuration: defaults < file < --set overrides < explicit flags.

    The file may be TOML or YAML (by suffix). Keys are validated against the
    section dataclasses when ``build`` runs, before any work starts.
    """

    def __init__(self):
        self._data: dict[str, Any] = {}
        self._config_path: str | None = None

    def load(self, config_path: str | None = None) -> None:
        """Load a config file. A missing explicit path is an error; a missing default is not."""
        explicit = config_path is not None
        self._config_path = config_path or DEFAULT_CONFIG_PATH

        if not os.path.exists(self._config_path):
            if explicit:
                raise ConfigError(f"config file not found: {self._config_path}")
            logger.warning(f"Default config not found at {self._config_path} - using built-in defaults")
            self._data = {}
            return

        try:
            if self._config_path.endswith((".yaml", ".yml")):
                with open(self._config_path, "r", encoding="utf-8") as f:
                    data = yaml.safe_load(f) or {}
            else:
                with open(self._config_path, "rb") as f:
                    data = tomllib.load(f)
        except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"{self._config_path}: cannot parse config: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"{self._config_path}: config must be a mapping at the top level")
        self._data = data
        logger.info(f"Loaded config from {self._config_path}")

    def apply_overrides(self, overrides: list[str]) -> None:
        """Apply ``key=value`` strings; dotted keys address sections, values are parsed as YAML scalars/lists."""
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = yaml.safe_load(raw) if raw.strip() else ""
            except yaml.YAMLError as e:
                raise ConfigError(f"--set {key}: cannot parse value {raw!r}: {e}")
            self.set(key.strip(), value)

    def set(self, key: str, value: Any) -> None:
        parts = key.split(".")
        node = self._data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot set {key}: {part} is not a section")
            node = child
        node[parts[-1]] = value

    def raw(self) -> dict:
        return copy.deepcopy(self._data)

    def build(self) -> RunConfig:
        data = self.raw()
        unknown = sorted(set(data) - TOP_LEVEL - set(SECTIONS) - set(BACKEND_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

        kwargs: dict[str, Any] = {}
        for key in TOP_LEVEL:
            if key in data:
                default = None if key == "seed" else getattr(RunConfig, key)
                kwargs[key] = _coerce(key, data[key], default if default is not None else 0)
        for name, cls in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a section")
            kwargs[name] = _build_section(name, cls, section)
        for name in BACKEND_SECTIONS:
            section = data.get(name)
            if section is None:
                continue
            if not isinstance(section, dict) or "kind" not in section:
                raise ConfigError(f"[{name}] must be a section with a 'kind'")
            params = {k: v for k, v in section.items() if k != "kind"}
            kwargs[name] = BackendDescriptor(section["kind"], params)
        return RunConfig(**kwargs)


def _build_section(name: str, cls, section: dict):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {k: _coerce(f"{name}.{k}", v, defaults[k]) for k, v in section.items()}
    return cls(**values)


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Coerce ``value`` to the type of ``default``; None defaults accept strings."""
    try:
        if default is None:
            return None if value is None else str(value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(f"expected true/false, got {value!r}")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError(f"expected an integer, got {value!r}")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError(f"expected a number, got {value!r}")
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}")
    return value
