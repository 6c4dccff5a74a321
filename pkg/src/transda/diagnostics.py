"""Learning-dynamics instrumentation: prediction traces, L1 change series, spectra."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import svg


@dataclass
class DynamicsTrace:
    """Per-iteration prediction snapshots on a fixed probe set.

    With ``capacity`` set, only the newest snapshots are retained; the change
    series is still complete because each change is taken at insertion time.
    """

    tag: str
    probe_seed: int = 0
    capacity: Optional[int] = None
    meta: dict = field(default_factory=dict)
    iterations: list[int] = field(default_factory=list)
    changes: list[float] = field(default_factory=list)
    snapshots: deque = field(init=False)
    _shape: Optional[tuple[int, ...]] = field(default=None, init=False)
    _last: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.snapshots = deque(maxlen=self.capacity)

    @property
    def shape(self):
        return self._shape

    def __len__(self) -> int:
        return len(self.iterations)


def track(trace: DynamicsTrace, iteration: int, predictions) -> None:
    data = getattr(predictions, "data", predictions)
    snap = np.array(data, dtype=np.float32, copy=True)
    if trace._shape is None:
        trace._shape = snap.shape
    elif snap.shape != trace._shape:
        raise ValueError(f"trace {trace.tag!r}: snapshot shape {snap.shape} != {trace._shape}")
    if trace.iterations and iteration <= trace.iterations[-1]:
        raise ValueError(f"trace {trace.tag!r}: iteration {iteration} not after {trace.iterations[-1]}")
    if trace._last is not None:
        trace.changes.append(l1_change(trace._last, snap))
    trace.iterations.append(int(iteration))
    trace.snapshots.append(snap)
    trace._last = snap


def l1_change(prev: np.ndarray, cur: np.ndarray) -> float:
    """Sum of |cur - prev| over everything but the leading image axis, averaged over images."""
    n = prev.shape[0]
    return float(np.abs(cur.astype(np.float64) - prev.astype(np.float64)).sum() / n)


def change_series(trace: DynamicsTrace) -> list[float]:
    if len(trace.iterations) < 2:
        raise ValueError(f"trace {trace.tag!r} needs at least 2 snapshots")
    return list(trace.changes)


@dataclass
class Spectrum:
    frequencies: np.ndarray  # centered integer bins
    amplitudes: np.ndarray  # (n_freq,) or (n_freq, n_categories)

    def band_mean(self, min_abs_freq: float) -> float:
        sel = np.abs(self.frequencies) >= min_abs_freq
        return float(self.amplitudes[sel].mean())


def dft(series) -> Spectrum:
    """Unnormalized DFT magnitudes on centered bins.

    A 2-D input is treated as one series per column (time along axis 0).
    """
    x = np.asarray(series, dtype=np.float64)
    T = x.shape[0]
    if T < 2:
        raise ValueError("dft needs a series of length >= 2")
    X = np.fft.fft(x, axis=0)
    freqs = np.fft.fftshift(np.fft.fftfreq(T, d=1.0 / T)).round().astype(int)
    return Spectrum(freqs, np.abs(np.fft.fftshift(X, axes=0)))


# -- toy experiment ----------------------------------------------------------------------

@dataclass
class ToyResult:
    sigma: float
    seed: int
    probs: np.ndarray  # (T, K)
    change: np.ndarray  # (T-1,)
    spectrum: Spectrum

    @property
    def mean_change(self) -> float:
        return float(self.change.mean())

    def high_band(self, cutoff: float) -> float:
        return self.spectrum.band_mean(cutoff)


@dataclass
class ToyReport:
    sigmas: list[float]
    seeds: list[int]
    K: int
    T: int
    band_cutoff: float
    results: dict[float, list[ToyResult]]

    def mean_change(self, sigma: float) -> float:
        return float(np.mean([r.mean_change for r in self.results[sigma]]))

    def mean_high_band(self, sigma: float) -> float:
        return float(np.mean([r.high_band(self.band_cutoff) for r in self.results[sigma]]))

    def ordered_fraction(self, metric: str) -> float:
        """Share of seeds where the metric strictly increases with sigma."""
        order = sorted(self.sigmas)
        ok = 0
        for i in range(len(self.seeds)):
            if metric == "change":
                vals = [self.results[s][i].mean_change for s in order]
            else:
                vals = [self.results[s][i].high_band(self.band_cutoff) for s in order]
            ok += all(a < b for a, b in zip(vals, vals[1:]))
        return ok / len(self.seeds)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def toy_run(sigma: float, seed: int, K: int = 5, T: int = 20) -> ToyResult:
    """i.i.d. N(0, sigma^2) logits per iteration, softmaxed into a (T, K) prediction path."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round(sigma * 1e6))]))
    probs = _softmax(rng.standard_normal((T, K)) * sigma)
    change = np.abs(np.diff(probs, axis=0)).sum(axis=1)
    return ToyResult(sigma, seed, probs, change, dft(probs))


def toy_gaussian_experiment(sigmas: Sequence[float] = (0.5, 1.0, 10.0), K: int = 5, T: int = 20,
                            seeds: Sequence[int] = tuple(range(20)),
                            band_cutoff: Optional[float] = None) -> ToyReport:
    if not seeds:
        raise ValueError("seeds must be non-empty")
    cutoff = T / 4 if band_cutoff is None else band_cutoff
    results = {float(s): [toy_run(float(s), int(sd), K, T) for sd in seeds] for s in sigmas}
    return ToyReport([float(s) for s in sigmas], [int(s) for s in seeds], K, T, cutoff, results)


# -- file emission --------------------------------------------------------------------------

def write_change_csv(trace: DynamicsTrace, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "change"])
        for it, c in zip(trace.iterations[1:], trace.changes):
            w.writerow([it, f"{c:.9g}"])
    return path


def write_spectrum_csv(spec: Spectrum, path) -> Path:
    path = Path(path)
    amps = spec.amplitudes if spec.amplitudes.ndim == 2 else spec.amplitudes[:, None]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq", "category", "amplitude"])
        for i, f in enumerate(spec.frequencies):
            for k in range(amps.shape[1]):
                w.writerow([int(f), k, f"{amps[i, k]:.9g}"])
    return path


def write_toy_report(report: ToyReport, out_dir) -> list[Path]:
    """Summary CSV plus, per sigma, change CSV, spectrum CSV and three SVG panels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary = out / "toy_summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "mean_change", "mean_high_band", "ordered_change", "ordered_high_band"])
        oc = report.ordered_fraction("change")
        oh = report.ordered_fraction("high_band")
        for s in report.sigmas:
            w.writerow([s, f"{report.mean_change(s):.9g}", f"{report.mean_high_band(s):.9g}",
                        f"{oc:.4f}", f"{oh:.4f}"])
    written.append(summary)
    for s in report.sigmas:
        first = report.results[s][0]
        tag = f"sigma_{s:g}"
        p = out / f"toy_{tag}_change.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "change"])
            for i, c in enumerate(first.change, start=1):
                w.writerow([i, f"{c:.9g}"])
        written.append(p)
        written.append(write_spectrum_csv(first.spectrum, out / f"toy_{tag}_spectrum.csv"))
        t = list(range(report.T))
        written.append(svg.line_chart(
            out / f"toy_{tag}_predictions.svg",
            {f"class {k}": (t, first.probs[:, k].tolist()) for k in range(report.K)},
            title=f"predictions over time, sigma={s:g}", xlabel="iteration", ylabel="probability"))
        written.append(svg.line_chart(
            out / f"toy_{tag}_change.svg",
            {"L1 change": (t[1:], first.change.tolist())},
            title=f"change of predictions, sigma={s:g}", xlabel="iteration", ylabel="L1"))
        f = first.spectrum.frequencies.tolist()
        written.append(svg.line_chart(
            out / f"toy_{tag}_dft.svg",
            {f"class {k}": (f, first.spectrum.amplitudes[:, k].tolist()) for k in range(report.K)},
            title=f"DFT amplitude, sigma={s:g}", xlabel="frequency bin", ylabel="|X(f)|"))
    return written
