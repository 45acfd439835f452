"""Tests for layered configuration: defaults, TOML/YAML files, --set overrides and flags."""

import logging

import pytest

from src.config import (
    BackendDescriptor, ConfigLoader, PipelineConfig, ReportConfig, RunConfig,
)
from src.errors import ConfigError
from src.main import build_parser, load_config


def write(tmp_path, name: str, text: str) -> str:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def loaded(path: str | None = None, overrides=()) -> RunConfig:
    loader = ConfigLoader()
    loader.load(path)
    loader.apply_overrides(list(overrides))
    return loader.build()


# --- Layers ---


class TestLayers:
    """defaults < file < --set < flags."""

    def test_shipped_defaults_match_dataclasses(self):
        """config/defaults.toml and the dataclass defaults agree."""
        assert loaded() == RunConfig()

    def test_missing_default_file_warns(self, monkeypatch, tmp_path, caplog):
        """No default file -> built-in defaults and a warning."""
        monkeypatch.setattr("src.config.DEFAULT_CONFIG_PATH", str(tmp_path / "absent.toml"))
        with caplog.at_level(logging.WARNING, logger="src.config"):
            assert loaded() == RunConfig()
        assert "Default config not found" in caplog.text

    def test_missing_explicit_file_is_an_error(self, tmp_path):
        """An explicit --config that does not exist fails."""
        with pytest.raises(ConfigError):
            loaded(str(tmp_path / "nope.toml"))

    def test_toml_file(self, tmp_path):
        """File values override defaults."""
        path = write(tmp_path, "run.toml", "seed = 7\n[pipeline]\nconfidence_threshold = 0.3\nrelaxed_radii = [0, 2]\n")
        config = loaded(path)
        assert config.seed == 7
        assert config.pipeline.confidence_threshold == 0.3
        assert config.pipeline.relaxed_radii == (0, 2)
        assert config.pipeline.max_candidates == 3

    def test_yaml_file(self, tmp_path):
        """A .yaml suffix selects the YAML reader."""
        path = write(tmp_path, "run.yaml", "run_id: yaml-run\nreport:\n  include_unmatched: true\n")
        config = loaded(path)
        assert config.run_id == "yaml-run"
        assert config.report.include_unmatched is True

    def test_unparseable_file(self, tmp_path):
        """Broken TOML -> ConfigError."""
        with pytest.raises(ConfigError):
            loaded(write(tmp_path, "bad.toml", "[pipeline\n"))

    def test_precedence(self, tmp_path):
        """A flag beats --set, which beats the file."""
        path = write(tmp_path, "run.toml", "[pipeline]\njobs = 2\nconfidence_threshold = 0.3\n")
        parser = build_parser()
        args = parser.parse_args(["eval", "--config", path, "--set", "pipeline.jobs=3"])
        assert load_config(args).pipeline.jobs == 3
        assert load_config(args).pipeline.confidence_threshold == 0.3
        args = parser.parse_args(["eval", "--config", path, "--set", "pipeline.jobs=3", "--jobs", "5"])
        assert load_config(args).pipeline.jobs == 5

    def test_unset_flags_do_not_override(self, tmp_path):
        """--include-unmatched absent leaves the file value alone."""
        path = write(tmp_path, "run.toml", "[report]\ninclude_unmatched = true\n")
        args = build_parser().parse_args(["eval", "--config", path])
        assert load_config(args).report.include_unmatched is True


# --- Overrides and validation ---


class TestValidation:
    """Unknown keys and bad values fail before any work starts."""

    def test_set_values_are_parsed(self):
        """Lists, booleans, numbers and strings."""
        config = loaded(overrides=[
            "pipeline.relaxed_radii=[0, 1, 4]", "report.include_unmatched=true",
            "pipeline.match_threshold=0.6", "report.label=Mask R-CNN", "seed=11",
        ])
        assert config.pipeline.relaxed_radii == (0, 1, 4)
        assert config.report.include_unmatched is True
        assert config.pipeline.match_threshold == 0.6
        assert config.report.label == "Mask R-CNN"
        assert config.seed == 11

    @pytest.mark.parametrize("override", [
        "colour=blue", "pipeline.speed=3", "report.width=1",
    ])
    def test_unknown_keys(self, override):
        """Unknown top-level or section keys are rejected."""
        with pytest.raises(ConfigError):
            loaded(overrides=[override])

    @pytest.mark.parametrize("override", [
        "pipeline.jobs=two", "pipeline.jobs=0", "pipeline.confidence_threshold=1.5",
        "pipeline.relaxed_radii=[1, 2]", "pipeline.on_error=retry", "report.include_unmatched=3",
        "report.curve_step=0",
    ])
    def test_bad_values(self, override):
        """Type and range checks."""
        with pytest.raises(ConfigError):
            loaded(overrides=[override])

    def test_set_needs_equals(self):
        """--set without '=' is a usage error."""
        with pytest.raises(ConfigError):
            ConfigLoader().apply_overrides(["pipeline.jobs"])

    def test_backend_sections(self):
        """[detector]/[segmenter] become descriptors with their parameters."""
        config = loaded(overrides=["detector.kind=synthetic-oracle", "detector.shift=2",
                                   "segmenter.kind=external-process", "segmenter.command=python -m src.worker"])
        assert config.detector == BackendDescriptor("synthetic-oracle", {"shift": 2})
        assert config.segmenter.params["command"] == "python -m src.worker"

    @pytest.mark.parametrize("kind, params", [
        ("magic", {}),
        ("replay", {}),
        ("replay", {"predictions": "p.json", "shift": 1}),
        ("external-process", {"workers": 2}),
        ("synthetic-oracle", {"shift": -1}),
        ("synthetic-oracle", {"shift": "two"}),
        ("synthetic-oracle", {"drop_rate": 2}),
        ("synthetic-oracle", {"distractors": -1}),
        ("synthetic-oracle", {"seed": 1.5}),
        ("synthetic-oracle", {"score_low": 1.0}),
        ("external-process", {"command": "w", "workers": 0}),
        ("external-process", {"command": "w", "timeout": 0}),
    ])
    def test_bad_backends(self, kind, params):
        """Unknown kinds, missing or foreign parameters, and out-of-range values."""
        with pytest.raises(ConfigError):
            BackendDescriptor(kind, params)

    def test_backend_section_needs_kind(self):
        """A backend section without 'kind' is rejected."""
        with pytest.raises(ConfigError):
            loaded(overrides=["detector.shift=2"])


# --- Snapshot ---


class TestSnapshot:
    """The config recorded into run.json."""

    def test_jobs_and_output_dir_left_out(self):
        """Worker count and output location do not change results."""
        a = RunConfig(output_dir="a", pipeline=PipelineConfig(jobs=1)).snapshot()
        b = RunConfig(output_dir="b", pipeline=PipelineConfig(jobs=8)).snapshot()
        assert a == b
        assert "jobs" not in a["pipeline"] and "output_dir" not in a

    def test_snapshot_is_json_shaped(self):
        """Radii become a list, backends a sorted dict."""
        snap = RunConfig(detector=BackendDescriptor("synthetic-oracle", {"shift": 1, "drop_rate": 0.1}),
                         report=ReportConfig(label="x")).snapshot()
        assert snap["pipeline"]["relaxed_radii"] == [0, 1, 2, 3]
        assert list(snap["detector"]) == ["kind", "drop_rate", "shift"]
        assert snap["segmenter"] is None
        assert snap["report"]["label"] == "x"
