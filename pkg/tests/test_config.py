"""Tests for flat config files and run directory persistence."""
import tempfile
from pathlib import Path

import pytest

from src.pafa.config import (
    CACHE_ENV_VAR,
    dump_flat_config,
    load_flat_config,
    parse_bool,
    parse_flat_config,
    resolve_cache_dir,
    save_flat_config,
)
from src.pafa.errors import DataError, ManifestIOError, ParseError
from src.pafa.rundir import (
    EpochStats,
    RunRecord,
    append_metrics,
    latest_metrics,
    load_metrics,
    load_summary,
    read_epochs,
    write_epochs,
    write_summary,
)


def test_dump_is_sorted_and_typed():
    """Test that keys are sorted and values rendered on one line."""
    text = dump_flat_config({"lr": 0.001, "hidden": (256, 128), "tag": "x", "full": True})
    assert text == "full=true\nhidden=256,128\nlr=0.001\ntag=x\n"


def test_parse_skips_comments_and_reports_bad_lines():
    """Test comment handling and line numbers on malformed input."""
    assert parse_flat_config("# c\n\nepochs = 30\n") == {"epochs": "30"}
    with pytest.raises(ParseError) as excinfo:
        parse_flat_config("a=1\nnot a setting\n")
    assert excinfo.value.line == 2


def test_save_and_load_round_trip():
    """Test that saved settings load back as raw strings."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "nested" / "c.txt"
        save_flat_config(path, {"seed": 3, "lambda_pcsl": 50.0})
        assert load_flat_config(path) == {"lambda_pcsl": "50.0", "seed": "3"}
        with pytest.raises(ManifestIOError):
            load_flat_config(Path(tmpdir) / "absent.txt")


def test_parse_bool():
    """Test accepted boolean spellings."""
    assert parse_bool("Yes") is True
    assert parse_bool("0") is False
    with pytest.raises(ValueError):
        parse_bool("maybe")


def test_resolve_cache_dir_priority(monkeypatch):
    """Test explicit path, then the environment variable, then the workdir default."""
    with tempfile.TemporaryDirectory() as tmpdir:
        monkeypatch.setenv(CACHE_ENV_VAR, str(Path(tmpdir) / "env"))
        assert resolve_cache_dir(Path(tmpdir) / "explicit") == (Path(tmpdir) / "explicit").resolve()
        assert resolve_cache_dir() == (Path(tmpdir) / "env").resolve()
        monkeypatch.delenv(CACHE_ENV_VAR)
        assert resolve_cache_dir(workdir=tmpdir) == (Path(tmpdir) / ".pafa_cache").resolve()


def test_epochs_round_trip():
    """Test that epochs.csv reads back the written statistics."""
    with tempfile.TemporaryDirectory() as tmpdir:
        epochs = [EpochStats(1, 1.25, 0.5, 2.0, 26.251), EpochStats(2, 1.0, 0.25, 1.5, 13.50075)]
        path = write_epochs(tmpdir, epochs)
        assert path.read_text().splitlines()[0] == "epoch,ce,pcsl,gpal,total"
        assert read_epochs(tmpdir) == epochs


def test_metrics_lines_append_and_latest():
    """Test that metrics append and the latest record per task wins."""
    with tempfile.TemporaryDirectory() as tmpdir:
        append_metrics(tmpdir, {"task": "4class", "score": 60.0})
        append_metrics(tmpdir, {"task": "2class", "score": 70.0})
        append_metrics(tmpdir, {"task": "4class", "score": 61.0})
        assert len(load_metrics(tmpdir)) == 3
        assert latest_metrics(tmpdir, "4class")["score"] == 61.0
        assert latest_metrics(tmpdir, "other") is None

        Path(tmpdir, "metrics.json-lines").write_text("{not json\n")
        with pytest.raises(DataError):
            load_metrics(tmpdir)


def test_summary_round_trip():
    """Test run.json contents."""
    with tempfile.TemporaryDirectory() as tmpdir:
        record = RunRecord(config={"seed": 1}, epochs=[EpochStats(1, 1.0, 0.0, 0.0, 1.0)],
                           metrics={"4class": {"score": 50.0}})
        write_summary(tmpdir, record)
        summary = load_summary(tmpdir)
        assert summary["epochs"] == 1
        assert summary["final_epoch"]["total"] == 1.0
        with pytest.raises(DataError):
            load_summary(Path(tmpdir) / "absent")
