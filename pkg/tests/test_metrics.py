import pytest

from crackalign.config import Settings
from crackalign.metrics import StageTimer


def test_stage_timer_totals_and_summary():
    timer = StageTimer()
    timer.record("match", 2.0)
    timer.record("match", 4.0)
    with timer.stage("detect"):
        pass
    totals = timer.snapshot()
    assert list(totals) == ["detect", "match"]
    assert totals["match"] == 6.0
    summary = timer.summary()
    assert summary["match"]["count"] == 2.0
    assert summary["match"]["avg_ms"] == 3.0
    assert summary["match"]["p95_ms"] == pytest.approx(3.9)
    assert set(vars(timer)) == {"samples_ms", "_lock"}


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("CRACKALIGN_RANSAC_K", "6")
    settings = Settings(_env_file=None)
    assert settings.ransac_k == 6
    assert "project_name" not in Settings.model_fields
