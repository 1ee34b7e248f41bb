"""Dataset construction: sinusoids, windows, covariates, scaling, CSV."""

import numpy as np
import pytest

from daf.data import (
    DatasetSplit,
    SeriesWindow,
    SyntheticSpec,
    descale_predictions,
    export_csv,
    generate_sinusoids,
    ingest_csv,
    make_windows,
    read_series_csv,
    scale_window,
    split_dataset,
    time_covariates,
    window_covariates,
)
from daf.errors import ConfigurationError, EmptyDatasetError, ParseError

rng = np.random.default_rng(99)


class TestGenerateSinusoids:
    def test_closed_form_when_noise_off(self):
        # A=1, c=0, omega=1/T, phi unconstrained -> check against the formula
        spec = SyntheticSpec(
            n_series=3, history=40, horizon=8, amp_min=1, amp_max=1,
            level_min=0, level_max=0, freq_min=1 / 40, freq_max=1 / 40,
            noise_std=0.0, seed=5,
        )
        series = generate_sinusoids(spec)
        t = np.arange(48)
        # recover each series' phase from its first two samples and compare
        for z in series:
            phi = np.arctan2(z[0], (z[1] - z[0] * np.cos(2 * np.pi / 40)) / np.sin(2 * np.pi / 40))
            assert np.allclose(z, np.sin(2 * np.pi * t / 40 + phi), atol=1e-9)

    def test_amplitude_plus_level_bound(self):
        spec = SyntheticSpec(n_series=20, history=30, horizon=6, noise_std=0.0, seed=1)
        series = generate_sinusoids(spec)
        assert series.max() <= 3.0 + 5.0 + 1e-9
        assert series.min() >= -3.0 - 5.0 - 1e-9

    def test_sample_mean_matches_level(self):
        # Monte-Carlo oracle: mean over many points of z - A sin(...) is c
        spec = SyntheticSpec(
            n_series=1, history=3000, horizon=1, amp_min=2, amp_max=2,
            level_min=1.5, level_max=1.5, freq_min=1 / 300, freq_max=1 / 300,
            noise_std=0.25, seed=3,
        )
        z = generate_sinusoids(spec)[0]
        n = z.size
        # average over whole periods kills the sinusoid term
        whole = z[: (n // 300) * 300]
        tol = 3 * 0.25 / np.sqrt(whole.size)
        assert abs(whole.mean() - 1.5) < tol + 0.02

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(n_series=4, history=30, horizon=5, seed=11)
        assert np.array_equal(generate_sinusoids(spec), generate_sinusoids(spec))

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ConfigurationError, match="amplitude"):
            SyntheticSpec(n_series=1, history=20, horizon=2, amp_min=3, amp_max=1)
        with pytest.raises(ConfigurationError, match="frequency"):
            SyntheticSpec(n_series=1, history=20, horizon=2, freq_min=0.0001, freq_max=0.5)


class TestMakeWindows:
    def test_exactly_one_window_at_boundary(self):
        wins = make_windows([np.arange(12.0)], history=8, horizon=4)
        assert len(wins) == 1

    def test_window_count_formula(self):
        # length T+tau+2 gives L-T-tau+1 = 3 windows at stride 1
        wins = make_windows([np.arange(14.0)], history=8, horizon=4)
        assert len(wins) == 3

    def test_window_contents_are_slices(self):
        z = np.arange(20.0)
        wins = make_windows([z], history=6, horizon=3)
        w = wins[2]
        assert np.array_equal(w.full_series(), z[2:11])
        assert np.array_equal(w.x, z[2:8])
        assert np.array_equal(w.y, z[8:11])

    def test_short_series_skipped_with_warning(self):
        with pytest.warns(UserWarning, match="skipped"):
            wins = make_windows([np.arange(5.0), np.arange(12.0)], history=8, horizon=4)
        assert len(wins) == 1

    def test_all_short_is_empty_dataset_error(self):
        with pytest.warns(UserWarning):
            with pytest.raises(EmptyDatasetError):
                make_windows([np.arange(5.0)], history=8, horizon=4)


class TestCovariates:
    def test_hourly_monday_midnight_endpoints(self):
        cov = time_covariates("hourly", np.array([0]))
        assert np.allclose(cov[:, 0], [-0.5, -0.5])

    def test_hour_23_is_upper_endpoint(self):
        cov = time_covariates("hourly", np.array([23]))
        assert np.isclose(cov[1, 0], 0.5)

    def test_daily_day_of_week_periodic(self):
        idx = np.arange(30)
        cov = time_covariates("daily", idx)
        assert np.allclose(cov[0, :23], cov[0, 7:30])

    def test_positional_in_range_with_zero_channel(self):
        cov = window_covariates("positional", 20)
        assert cov.shape == (2, 20)
        assert cov[0].min() >= -0.5 and cov[0].max() < 0.5
        assert np.all(cov[1] == 0)

    def test_none_gives_no_channels(self):
        assert window_covariates("none", 9).shape == (0, 9)


class TestScaling:
    def _window(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        return SeriesWindow(
            series_id=0, x=x, y=y,
            covariates=np.zeros((2, len(x) + len(y))),
        )

    def test_hand_example(self):
        w = scale_window(self._window([1.0, 3.0], [2.0]))
        assert w.scale == (2.0, 1.0)
        assert np.allclose(w.x, [-1.0, 1.0])

    def test_constant_history_clamped(self):
        w = scale_window(self._window([5.0, 5.0, 5.0], [5.0]))
        assert np.allclose(w.x, 0.0)
        assert w.scale[1] == 1e-6

    def test_descale_round_trip(self):
        y = rng.normal(size=7) * 11 + 3
        w = scale_window(self._window(rng.normal(size=13), y))
        assert np.allclose(descale_predictions(w.y, w.scale), y, atol=1e-12)

    def test_scaling_ignores_future(self):
        x = rng.normal(size=9)
        a = scale_window(self._window(x, [0.0]))
        b = scale_window(self._window(x, [1e6]))
        assert a.scale == b.scale
        assert np.array_equal(a.x, b.x)


class TestSplitDataset:
    def _windows(self, n):
        return make_windows([np.arange(float(n + 11))], history=8, horizon=4)[:n]

    def test_equal_thirds(self):
        split = split_dataset(self._windows(9), seed=0)
        assert (len(split.train), len(split.validation), len(split.test)) == (3, 3, 3)

    def test_deterministic(self):
        wins = self._windows(10)
        a = split_dataset(wins, seed=42)
        b = split_dataset(wins, seed=42)
        assert [w.x[0] for w in a.train] == [w.x[0] for w in b.train]

    def test_disjoint_and_complete(self):
        wins = self._windows(10)
        split = split_dataset(wins, seed=3)
        ids = [id(w) for w in split.all_windows()]
        assert len(ids) == 10 and len(set(ids)) == 10

    def test_bad_fractions_rejected(self):
        wins = self._windows(9)
        with pytest.raises(ConfigurationError, match="sum to 1"):
            split_dataset(wins, fractions=(0.3, 0.3, 0.3))
        with pytest.raises(ConfigurationError, match="empty"):
            split_dataset(wins[:2], fractions=(0.98, 0.01, 0.01))


class TestCsv:
    def test_round_trip_windows_exact(self, tmp_path):
        spec = SyntheticSpec(n_series=3, history=10, horizon=4, seed=8)
        series = generate_sinusoids(spec)
        path = tmp_path / "data.csv"
        export_csv(series, path)
        split = ingest_csv(path, history=10, horizon=4, fractions=(1/3, 1/3, 1/3), seed=1)
        direct = split_dataset(
            make_windows(list(series), 10, 4), fractions=(1/3, 1/3, 1/3), seed=1
        )
        for got, want in zip(split.all_windows(), direct.all_windows()):
            assert np.array_equal(got.x, want.x)
            assert np.array_equal(got.y, want.y)
            assert np.array_equal(got.covariates, want.covariates)
            assert got.series_id == want.series_id

    def test_missing_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n0,0,1.0\n")
        with pytest.raises(ParseError, match="line 1"):
            read_series_csv(p)

    def test_non_numeric_value_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("series_id,t,value\n0,0,1.0\n0,1,oops\n")
        with pytest.raises(ParseError, match="line 3"):
            read_series_csv(p)

    def test_gap_in_t_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("series_id,t,value\n0,0,1.0\n0,2,2.0\n")
        with pytest.raises(ParseError, match="line 3.*gap"):
            read_series_csv(p)

    def test_two_series_tagged_correctly(self, tmp_path):
        p = tmp_path / "two.csv"
        export_csv([np.arange(12.0), np.arange(12.0) + 100], p)
        split = ingest_csv(p, history=6, horizon=4, seed=0)
        by_id = {w.series_id for w in split.all_windows()}
        assert by_id == {0, 1}
        for w in split.all_windows():
            assert (w.x[0] >= 100) == (w.series_id == 1)
