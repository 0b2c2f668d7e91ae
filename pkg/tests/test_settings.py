"""Tests for run settings, the schedule and output-directory resolution."""

import json
from pathlib import Path

import pytest

from depthdial.config import HeadKind
from depthdial.errors import InvalidSpecError
from depthdial.losses import KDHyper
from depthdial.settings import OUT_ENV, SETTINGS_VERSION, RunSettings, Schedule, output_root


class TestSchedule:
    def test_defaults(self):
        schedule = Schedule()
        assert (schedule.steps, schedule.batch_size, schedule.image_size) == (2000, 8, 128)

    @pytest.mark.parametrize(
        "kwargs", [{"steps": -1}, {"batch_size": 0}, {"lr": 0.0}, {"clutter": 1.2}, {"eval_every": 0}]
    )
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidSpecError):
            Schedule(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(InvalidSpecError, match="epochs"):
            Schedule.from_dict({"epochs": 3})


class TestRunSettings:
    @pytest.mark.parametrize("head", list(HeadKind))
    def test_for_head(self, head):
        settings = RunSettings.for_head(head, steps=10)
        assert settings.arch.head_kind is head
        assert settings.hyper == KDHyper.for_head(head)
        assert settings.schedule.steps == 10

    def test_save_and_load(self, tmp_path):
        settings = RunSettings.for_head("dense", steps=5)
        loaded = RunSettings.load(settings.save(tmp_path / "nested" / "run.json"))
        assert loaded == settings
        assert loaded.config_hash() == settings.config_hash()

    def test_hash_tracks_content(self):
        a = RunSettings.for_head("set_prediction")
        b = a.with_hyper(KDHyper(alpha=0.5))
        assert a.config_hash() != b.config_hash()
        assert len(a.config_hash()) == 16

    def test_hyper_defaults_to_head(self):
        data = RunSettings.for_head("dense").to_dict()
        del data["hyper"]
        assert RunSettings.from_dict(data).hyper == KDHyper.for_head("dense")

    def test_version_mismatch(self):
        data = {**RunSettings.for_head("dense").to_dict(), "version": SETTINGS_VERSION + 1}
        with pytest.raises(InvalidSpecError, match="version"):
            RunSettings.from_dict(data)

    def test_needs_arch(self):
        with pytest.raises(InvalidSpecError, match="arch"):
            RunSettings.from_dict({"version": SETTINGS_VERSION})

    def test_unknown_section(self):
        with pytest.raises(InvalidSpecError, match="optimizer"):
            RunSettings.from_dict({**RunSettings.for_head("dense").to_dict(), "optimizer": {}})

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(InvalidSpecError, match="JSON"):
            RunSettings.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidSpecError, match="not found"):
            RunSettings.load(tmp_path / "none.json")

    def test_file_is_readable_json(self, tmp_path):
        path = RunSettings.for_head("dense").save(tmp_path / "run.json")
        assert json.loads(path.read_text())["version"] == SETTINGS_VERSION


class TestOutputRoot:
    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv(OUT_ENV, "/tmp/elsewhere")
        assert output_root("mine") == Path("mine")

    def test_environment(self, monkeypatch):
        monkeypatch.setenv(OUT_ENV, "/tmp/elsewhere")
        assert output_root() == Path("/tmp/elsewhere")

    def test_default(self, monkeypatch):
        monkeypatch.delenv(OUT_ENV, raising=False)
        assert output_root() == Path("runs")
