import csv
import json

import numpy as np
import pytest

from certseg.metrics import Records, sweep
from certseg.report import (
    CURVE_FIELDS,
    export_curves,
    load_records,
    plot_curves,
    plot_training_log,
    plot_validation_study,
    save_records,
    summary_json,
    write_curve_csv,
)


@pytest.fixture
def records():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=500)
    accurate = scores + rng.normal(scale=0.8, size=500) < 0.3
    ids = rng.integers(0, 5, size=500)
    return Records(scores, accurate, ids)


class TestRecordIO:
    def test_round_trip(self, records, tmp_path):
        save_records(records, tmp_path / "rec")
        back = load_records(tmp_path / "rec")
        np.testing.assert_array_equal(back.scores, records.scores)
        np.testing.assert_array_equal(back.accurate, records.accurate)
        np.testing.assert_array_equal(back.image_ids, records.image_ids)

    def test_optional_ids(self, tmp_path):
        rec = Records(np.array([0.1, 0.2]), np.array([True, False]))
        save_records(rec, tmp_path / "rec")
        assert load_records(tmp_path / "rec").image_ids is None


class TestCurveCSV:
    def test_columns_and_full_precision(self, records, tmp_path):
        s = sweep(records)
        write_curve_csv(s, tmp_path / "curves.csv")
        with open(tmp_path / "curves.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == CURVE_FIELDS
        assert len(rows) == s.thresholds.size
        # repr round-trips float64 exactly
        i = len(rows) // 2
        assert float(rows[i]["precision"]) == s.precision[i]
        assert float(rows[i]["threshold"]) == s.thresholds[i]

    def test_counts_are_integers(self, records, tmp_path):
        write_curve_csv(sweep(records), tmp_path / "c.csv")
        with open(tmp_path / "c.csv") as fh:
            row = next(csv.DictReader(fh))
        for key in ("tp", "fp", "tn", "fn"):
            assert "." not in row[key]


class TestSummary:
    def test_summary_fields(self, records):
        s = sweep(records)
        out = summary_json(s)
        assert set(out) == {"auroc", "aupr", "max_f05", "max_f05_p_ac",
                            "max_amd", "max_amd_p_ac", "beta", "degenerate"}
        assert out["auroc"] == s.auroc and not out["degenerate"]

    def test_trained_row_included(self, records):
        out = summary_json(sweep(records), trained_row={"f_beta": 0.5})
        assert out["trained_threshold"] == {"f_beta": 0.5}


class TestExport:
    def test_export_writes_all_artifacts(self, records, tmp_path):
        export_curves(records, tmp_path, trained_gamma=0.5)
        assert (tmp_path / "curves.csv").exists()
        assert (tmp_path / "curves.png").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert "trained_threshold" in summary

    def test_no_figures(self, records, tmp_path):
        export_curves(records, tmp_path, figures=False)
        assert not (tmp_path / "curves.png").exists()

    def test_export_deterministic_bytes(self, records, tmp_path):
        export_curves(records, tmp_path / "a", figures=False)
        export_curves(records, tmp_path / "b", figures=False)
        for name in ("curves.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestFigures:
    def test_plot_curves(self, records, tmp_path):
        path = plot_curves(sweep(records), tmp_path)
        assert path.exists() and path.stat().st_size > 0

    def test_plot_training_log(self, tmp_path):
        rows = [
            {"step": 0, "l_c": 0.0, "l_u": 0.1, "l_p": -0.2, "l_s": 1.0,
             "gamma": "", "p_consistent": "", "dominant_fraction": ""},
            {"step": 1, "l_c": 0.5, "l_u": 0.1, "l_p": -0.2, "l_s": 0.9,
             "gamma": 0.8, "p_consistent": 0.4, "dominant_fraction": 0.5},
            {"step": 2, "l_c": 0.4, "l_u": 0.1, "l_p": -0.2, "l_s": 0.8,
             "gamma": 0.9, "p_consistent": 0.5, "dominant_fraction": ""},
        ]
        path = plot_training_log(rows, tmp_path)
        assert path.exists()

    def test_plot_validation_study(self, tmp_path):
        rep = {
            "validation_study": [
                {"size": 1, "a_md": {"values": [0.5, 0.6]}, "f_beta": {"values": [0.4, 0.5]}},
                {"size": 2, "a_md": {"values": [0.55, 0.6]}, "f_beta": {"values": [0.45, 0.5]}},
            ],
            "trained_threshold": {"a_md": 0.58, "f_beta": 0.47},
        }
        path = plot_validation_study(rep, tmp_path)
        assert path.exists()

    def test_plot_validation_study_empty(self, tmp_path):
        assert plot_validation_study({}, tmp_path) is None
