import csv
import io
import json
import math

import numpy as np
import pytest

from drip import data, harness
from drip.calibration import CalibrationProfile, ClassThresholds
from drip.errors import RejectedInputError
from drip.harness import ExperimentConfig


def small_cfg(**kw):
    base = dict(dataset={"kind": "synthetic", "class_count": 3, "per_class": 20, "image_size": 8, "seed": 1},
                repetitions=2, epochs=2, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


def test_derive_seed_is_stable_and_distinct():
    assert harness.derive_seed(0, 1) == harness.derive_seed(0, 1)
    seeds = {harness.derive_seed(0, r) for r in range(100)}
    assert len(seeds) == 100 and all(0 <= s < 2 ** 63 for s in seeds)


def test_config_validation_and_round_trip(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.load(path).digest() == cfg.digest()
    with pytest.raises(RejectedInputError):
        ExperimentConfig.from_dict({"colour": "blue"})
    with pytest.raises(RejectedInputError):
        small_cfg(dpw_percent=0)
    with pytest.raises(RejectedInputError):
        small_cfg(repetitions=0)


@pytest.fixture(scope="module")
def report():
    return harness.run_single(small_cfg(), 123)


def test_report_accounting(report):
    assert report.storage_savings + report.retention_rate == 1.0
    assert report.random_train_size == report.drip_train_size
    assert report.retained_count == round(report.retention_rate * report.production_size)
    assert report.drip_train_size == 24 + report.retained_count  # 40% of 60 items trains the baseline
    for acc in (report.baseline_acc, report.all_data_acc, report.drip_acc, report.random_acc):
        assert 0.0 <= acc <= 1.0


def test_identical_seeds_give_identical_reports(report):
    again = harness.run_single(small_cfg(), 123)
    for name in ("baseline_acc", "all_data_acc", "drip_acc", "random_acc", "retained_count"):
        assert getattr(again, name) == getattr(report, name)
    table = harness.run_repeated(small_cfg(), seeds=[123, 123])
    for m in ("drip_acc", "baseline_acc", "storage_savings"):
        assert table.std[m] == 0.0


def test_single_repetition_has_zero_std():
    table = harness.run_repeated(small_cfg(repetitions=1))
    assert table.count == 1
    assert all(v == 0.0 for v in table.std.values())


def test_summary_matches_two_pass_recompute():
    table = harness.run_repeated(small_cfg(repetitions=3))
    rows = list(csv.DictReader(io.StringIO(harness.runs_csv(table.reports))))
    for m in ("baseline_acc", "drip_acc", "random_acc", "storage_savings"):
        values = [float(r[m]) for r in rows]
        mean = sum(values) / len(values)
        std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
        assert table.mean[m] == pytest.approx(mean, abs=1e-15)
        assert table.std[m] == pytest.approx(std, abs=1e-12)


def empty_windows(profile):
    return CalibrationProfile(profile.dpw_percent, {}, profile.n_classes, profile.model_fingerprint, "-")


def everything_window(profile):
    per = {c: ClassThresholds(c, 0.0, math.inf, 0, 1, 1) for c in range(profile.n_classes)}
    return CalibrationProfile(profile.dpw_percent, per, profile.n_classes, profile.model_fingerprint, "-")


def test_degenerate_arms():
    cfg = small_cfg()
    full = harness.run_single(cfg, 9, profile_hook=empty_windows)
    assert full.retention_rate == 1.0 and full.drip_acc == full.all_data_acc
    none = harness.run_single(cfg, 9, profile_hook=everything_window)
    assert none.retention_rate == 0.0 and none.drip_acc == none.baseline_acc


def test_noise_only_touches_production():
    cfg = small_cfg()
    clean = harness.prepare_splits(cfg, 4)
    noisy = harness.prepare_splits(cfg, 4, 50)
    for a, b in zip(clean[:2], noisy[:2]):
        assert a.labels.tobytes() == b.labels.tobytes()
    assert np.count_nonzero(clean[2].labels != noisy[2].labels) == len(clean[2]) // 2


def test_failed_repetitions_are_recorded(monkeypatch):
    real = harness.run_single

    def flaky(cfg, seed, *a, **k):
        if seed == 2:
            raise RuntimeError("boom")
        return real(cfg, seed, *a, **k)

    monkeypatch.setattr(harness, "run_single", flaky)
    table = harness.run_repeated(small_cfg(), seeds=[1, 2])
    assert table.count == 1 and table.failures == ((2, "RuntimeError: boom"),)


def test_sweeps_shape():
    cfg = small_cfg(repetitions=1)
    dpw = harness.sweep_dpw(cfg, [10, 80])
    assert list(dpw) == [10.0, 80.0]
    noise = harness.sweep_noise(cfg, [0, 50])
    assert math.isnan(noise[50.0].mean["random_acc"])
    text = harness.long_table_csv("noise_level", noise)
    assert text.splitlines()[0] == "noise_level,metric,mean,std,count"


def test_report_files(tmp_path):
    table = harness.run_repeated(small_cfg())
    out = harness.OutputWriter(tmp_path)
    harness.emit_report(table, out, "blobs")
    out.manifest("experiment", small_cfg(), ["blobs"])
    text = (tmp_path / "summary.txt").read_text()
    for _, title in harness.REPORT_COLUMNS:
        assert title in text
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    names = {o["name"]: o for o in manifest["outputs"]}
    assert set(names) == {"runs.csv", "summary.csv", "summary.txt", "timing.csv"}
    assert not names["timing.csv"]["deterministic"] and "sha256" in names["runs.csv"]
    assert manifest["config_digest"] == small_cfg().digest()
