"""Benchmark plumbing tests. Parameter counts are the load-bearing part;
timing tests only check structure, never absolute speed."""

import numpy as np
import pytest

from lecaps.bench import BENCH_CSV_HEADER, BenchReport, benchmark, count_params, report_csv, report_text
from lecaps.models import baseline_config, lecaps_config


class TestParamCounts:
    def test_pure_function_of_config(self):
        config = lecaps_config(image_size=28, in_channels=1)
        assert count_params(config) == count_params(config)

    def test_baseline_28_matches_published_total(self):
        """8.2M within 2% for the 28x28 grayscale geometry."""
        count = count_params(baseline_config(image_size=28, in_channels=1))
        assert abs(count - 8_200_000) / 8_200_000 < 0.02

    def test_baseline_32_matches_published_total(self):
        """11.7M within 2% for the 32x32 RGB geometry."""
        count = count_params(baseline_config(image_size=32, in_channels=3))
        assert abs(count - 11_700_000) / 11_700_000 < 0.02

    def test_lightweight_budgets(self):
        assert count_params(lecaps_config(image_size=28, in_channels=1)) <= 3_800_000
        assert count_params(lecaps_config(image_size=32, in_channels=3)) <= 4_200_000

    def test_width_shrinks_count(self):
        full = count_params(lecaps_config(image_size=28, in_channels=1, width=1.0))
        half = count_params(lecaps_config(image_size=28, in_channels=1, width=0.5))
        assert half < full


class TestBenchmark:
    def test_argument_validation(self):
        config = lecaps_config(image_size=28, in_channels=1, width=0.25)
        with pytest.raises(ValueError, match="iters >= 1"):
            benchmark(config, iters=0)
        with pytest.raises(ValueError):
            benchmark(config, repeats=0)
        with pytest.raises(ValueError):
            benchmark(config, warmup=-1)

    def test_smoke_report_structure(self):
        """One tiny run produces the advertised sample counts and metadata."""
        config = lecaps_config(image_size=28, in_channels=1, width=0.25, routing_iters=1)
        report = benchmark(config, batch_size=4, warmup=0, iters=2, repeats=2)
        assert report.model == "lecaps"
        assert report.param_count == count_params(config)
        assert report.primary_caps == 108
        assert len(report.train_times) == 4
        assert len(report.infer_times) == 4
        assert all(t > 0 for t in report.train_times + report.infer_times)
        assert report.train_median == float(np.median(report.train_times))


class TestReports:
    def make_report(self):
        return BenchReport(
            model="lecaps",
            image_size=28,
            in_channels=1,
            param_count=1_255_193,
            primary_caps=108,
            batch_size=128,
            warmup=1,
            iters=3,
            repeats=2,
            train_times=(0.5, 0.4, 0.6, 0.5, 0.45, 0.55),
            infer_times=(0.1, 0.2, 0.15, 0.12, 0.11, 0.13),
        )

    def test_medians_and_means(self):
        r = self.make_report()
        assert r.train_median == 0.5
        assert r.infer_median == pytest.approx(0.125)
        assert r.train_mean == pytest.approx(np.mean(r.train_times))

    def test_text_has_key_value_lines(self):
        text = report_text(self.make_report())
        assert "model=lecaps" in text
        assert "param_count=1255193" in text
        assert "primary_caps=108" in text
        assert "median=0.5000" in text

    def test_csv_layout(self):
        text = report_csv([self.make_report()])
        lines = text.splitlines()
        assert lines[0] == BENCH_CSV_HEADER
        row = lines[1].split(",")
        assert len(row) == len(BENCH_CSV_HEADER.split(","))
        assert row[0] == "lecaps"
        assert row[3] == "1255193"
        assert float(row[10]) == 0.5  # train median column
