import json
import logging

import pytest

from export.report_exporter import (
    VARIANT_COLUMNS,
    export_variant_csv,
    normalize_column,
    read_variant_csv,
    rows_to_frame,
    write_report_json,
)

ROWS = [
    {"variant": "fixed", "frames": 4, "psnr": 20.0, "ssim": 0.8, "perceptual": 0.1, "temporal": 0.02},
    {"variant": "hard_switch", "frames": 4, "psnr": 19.0, "ssim": 0.7, "perceptual": 0.2, "temporal": 0.05},
]


class TestJson:
    def test_sorted_and_atomic(self, tmp_path):
        path = write_report_json(tmp_path / "r" / "report.json", {"b": 1, "a": [1.5]})
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [1.5], "b": 1}
        assert [p.name for p in path.parent.iterdir()] == ["report.json"]


class TestFrames:
    def test_known_columns_first(self):
        df = rows_to_frame([{"extra": 1, "psnr": 2.0, "variant": "x"}])
        assert list(df.columns) == ["variant", "psnr", "extra"]

    def test_empty(self):
        assert list(rows_to_frame([]).columns) == VARIANT_COLUMNS

    def test_normalize(self):
        df = normalize_column(rows_to_frame(ROWS), "temporal", "fixed")
        assert df["temporal_normalized"].tolist() == pytest.approx([1.0, 2.5])

    def test_missing_reference(self, caplog):
        df = rows_to_frame(ROWS)
        with caplog.at_level(logging.WARNING):
            out = normalize_column(df, "temporal", "absent")
        assert "temporal_normalized" not in out.columns
        assert "absent" in caplog.text


class TestCsv:
    def test_export_and_read(self, tmp_path):
        path = export_variant_csv(tmp_path / "variants.csv", ROWS, normalize_to="fixed")
        header = path.read_text().splitlines()[0].split(",")
        assert header == VARIANT_COLUMNS
        rows = read_variant_csv(path)
        assert [r["variant"] for r in rows] == ["fixed", "hard_switch"]
        assert rows[1]["temporal_normalized"] == pytest.approx(2.5)
        assert rows[0]["psnr"] == pytest.approx(20.0)

    def test_export_without_temporal(self, tmp_path):
        rows = [{k: v for k, v in r.items() if k != "temporal"} for r in ROWS]
        path = export_variant_csv(tmp_path / "q.csv", rows, normalize_to="fixed")
        assert path.read_text().splitlines()[0] == "variant,frames,psnr,ssim,perceptual"
