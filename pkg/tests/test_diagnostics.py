import cmath
import csv
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from transda.diagnostics import (
    DynamicsTrace,
    change_series,
    dft,
    l1_change,
    toy_gaussian_experiment,
    toy_run,
    track,
    write_change_csv,
    write_spectrum_csv,
    write_toy_report,
)


def naive_dft(x):
    """O(T^2) reference on the same centered bins."""
    T = len(x)
    bins = np.arange(T) - T // 2
    return bins, np.array([abs(sum(x[t] * cmath.exp(-2j * cmath.pi * f * t / T) for t in range(T)))
                           for f in bins])


# -- traces -----------------------------------------------------------------------------

def test_first_snapshot_sets_shape_and_is_copied():
    tr = DynamicsTrace("c")
    p = np.zeros((2, 3, 4, 4))
    track(tr, 0, p)
    p[...] = 1
    assert tr.shape == (2, 3, 4, 4)
    assert tr.snapshots[0].max() == 0 and tr.snapshots[0].dtype == np.float32
    with pytest.raises(ValueError, match="shape"):
        track(tr, 1, np.zeros((2, 3, 4, 5)))


def test_iterations_must_increase():
    tr = DynamicsTrace("c")
    track(tr, 5, np.zeros((1, 2)))
    with pytest.raises(ValueError, match="not after"):
        track(tr, 5, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        track(tr, 3, np.zeros((1, 2)))


def test_capacity_keeps_newest_but_full_change_series(rng):
    tr = DynamicsTrace("c", capacity=3)
    snaps = [rng.random((2, 3)) for _ in range(6)]
    for i, s in enumerate(snaps):
        track(tr, i, s)
    assert len(tr.snapshots) == 3 and len(tr.changes) == 5 and len(tr) == 6
    np.testing.assert_array_equal(tr.snapshots[0], snaps[3].astype(np.float32))


def test_change_examples(rng):
    tr = DynamicsTrace("c")
    for i in range(4):
        track(tr, i, np.full((2, 3, 2, 2), 0.25))
    assert change_series(tr) == [0.0, 0.0, 0.0]
    one = DynamicsTrace("d")
    a = np.zeros((1, 2, 2, 2))
    b = a.copy()
    b[0, 1, 0, 1] = 0.5
    track(one, 0, a)
    track(one, 1, b)
    assert change_series(one) == [0.5]
    with pytest.raises(ValueError):
        change_series(DynamicsTrace("empty"))


def test_change_matches_nested_loops(rng):
    a, b = rng.random((3, 2, 4, 4)).astype(np.float32), rng.random((3, 2, 4, 4)).astype(np.float32)
    total = 0.0
    for n in range(3):
        for k in range(2):
            for i in range(4):
                for j in range(4):
                    total += abs(float(b[n, k, i, j]) - float(a[n, k, i, j]))
    assert l1_change(a, b) == pytest.approx(total / 3, abs=1e-6)


@given(st.integers(0, 10_000))
def test_changes_nonnegative_and_triangle(seed):
    rng = np.random.default_rng(seed)
    tr = DynamicsTrace("c")
    for i in range(5):
        track(tr, i, rng.random((2, 3)))
    ch = change_series(tr)
    assert all(c >= 0 for c in ch)
    s = list(tr.snapshots)
    for i in range(3):
        assert l1_change(s[i], s[i + 2]) <= ch[i] + ch[i + 1] + 1e-6


# -- DFT ---------------------------------------------------------------------------------------

def test_constant_series_is_dc_only():
    spec = dft(np.full(16, 0.3))
    dc = spec.frequencies == 0
    assert spec.amplitudes[dc][0] == pytest.approx(16 * 0.3, abs=1e-9)
    assert np.all(spec.amplitudes[~dc] <= 1e-9)


def test_alternating_series_is_nyquist_only():
    spec = dft(np.array([1.0, -1.0] * 8))
    ny = spec.frequencies == -8
    assert spec.amplitudes[ny][0] == pytest.approx(16, abs=1e-9)
    assert np.all(spec.amplitudes[~ny] <= 1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_dft_matches_naive_oracle(seed):
    x = np.random.default_rng(seed).standard_normal(20)
    bins, ref = naive_dft(x)
    spec = dft(x)
    np.testing.assert_array_equal(spec.frequencies, bins)
    np.testing.assert_allclose(spec.amplitudes, ref, rtol=0, atol=1e-9)


def test_dft_columns_and_odd_length(rng):
    x = rng.standard_normal((9, 3))
    spec = dft(x)
    assert spec.amplitudes.shape == (9, 3)
    for k in range(3):
        bins, ref = naive_dft(x[:, k])
        np.testing.assert_array_equal(spec.frequencies, bins)
        np.testing.assert_allclose(spec.amplitudes[:, k], ref, atol=1e-9)
    with pytest.raises(ValueError):
        dft([1.0])


@given(hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100)))
def test_parseval(x):
    amps = dft(x).amplitudes
    assert abs(np.sum(x ** 2) - np.sum(amps ** 2) / len(x)) <= 1e-9 * max(1.0, np.sum(x ** 2))


def test_band_mean():
    spec = dft(np.arange(8.0))
    sel = np.abs(spec.frequencies) >= 2
    assert spec.band_mean(2) == pytest.approx(spec.amplitudes[sel].mean())


# -- toy Gaussian process ---------------------------------------------------------------------

def test_zero_sigma_is_flat():
    r = toy_run(0.0, 0)
    assert np.all(r.change == 0)
    np.testing.assert_allclose(r.probs, 0.2)
    assert np.all(r.spectrum.amplitudes[r.spectrum.frequencies != 0] <= 1e-9)


def test_toy_runs_are_reproducible_and_shaped():
    a, b = toy_run(1.0, 3, K=4, T=12), toy_run(1.0, 3, K=4, T=12)
    np.testing.assert_array_equal(a.probs, b.probs)
    assert a.probs.shape == (12, 4) and a.change.shape == (11,)
    np.testing.assert_allclose(a.probs.sum(axis=1), 1.0)


def test_toy_ordering_over_twenty_seeds():
    start = time.perf_counter()
    report = toy_gaussian_experiment()
    assert time.perf_counter() - start < 10
    assert report.band_cutoff == 5
    assert report.ordered_fraction("change") >= 0.95
    assert report.ordered_fraction("high_band") >= 0.95
    means = [report.mean_change(s) for s in (0.5, 1.0, 10.0)]
    assert means == sorted(means)


def test_toy_rejects_empty_seeds():
    with pytest.raises(ValueError):
        toy_gaussian_experiment(seeds=())


# -- files ---------------------------------------------------------------------------------

def test_change_and_spectrum_csv(tmp_path, rng):
    tr = DynamicsTrace("c")
    for i in (0, 2, 4):
        track(tr, i, rng.random((1, 3)))
    rows = list(csv.reader(write_change_csv(tr, tmp_path / "c.csv").open()))
    assert rows[0] == ["iter", "change"] and [r[0] for r in rows[1:]] == ["2", "4"]
    rows = list(csv.reader(write_spectrum_csv(dft(rng.random((4, 2))), tmp_path / "s.csv").open()))
    assert rows[0] == ["freq", "category", "amplitude"] and len(rows) == 1 + 4 * 2


def test_toy_report_files(tmp_path):
    report = toy_gaussian_experiment(seeds=range(3))
    paths = write_toy_report(report, tmp_path)
    names = {p.name for p in paths}
    assert "toy_summary.csv" in names
    for s in ("0.5", "1", "10"):
        for suffix in ("change.csv", "spectrum.csv", "predictions.svg", "change.svg", "dft.svg"):
            assert f"toy_sigma_{s}_{suffix}" in names
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)
    assert (tmp_path / "toy_sigma_10_dft.svg").read_text().startswith("<svg")
