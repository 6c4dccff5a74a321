"""Batch command-line runner: single runs, ablation matrix, momentum grid, toy report, eval, data export."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, diagnostics, svg
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, from_dict, load_config, save_config, with_changes
from .diagnostics import dft, write_change_csv, write_spectrum_csv
from .metrics import miou, write_iou_csv
from .momentum import MOMENTUM_GRID
from .synthdata import export_dataset, generate
from .trainer import (
    STREAM_SOURCE,
    STREAM_TARGET,
    STREAM_TEST,
    Trainer,
    TrainingAborted,
    derive_seed,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("transda")

OUTPUT_ROOT_ENV = "TRANSDA_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4
SUMMARY_COLUMNS = ("discriminator", "dynamic", "mo_pl", "mo_fa", "backbone", "seed",
                   "target_miou", "mean_change_classifier", "mean_change_discriminator")
METRIC_KEYS = ("target_miou", "mean_change_classifier", "mean_change_discriminator")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def version_string() -> str:
    """Package version, with ``git describe`` appended when run from a checkout."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- manifest ------------------------------------------------------------------------------

@dataclass
class RunManifest:
    path: Path
    config_hash: str
    seed: int
    version: str = field(default_factory=version_string)
    status: str = "running"
    wall_clock_s: Optional[float] = None
    outputs: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    error: Optional[dict] = None

    def add(self, p: Path) -> Path:
        rel = str(Path(p).relative_to(self.path.parent))
        if rel not in self.outputs:
            self.outputs.append(rel)
        return p

    def write(self) -> None:
        doc = {k: getattr(self, k) for k in ("config_hash", "seed", "version", "status",
                                             "wall_clock_s", "outputs", "metrics", "error")}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    @staticmethod
    def read(path: Path) -> Optional[dict]:
        try:
            return json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError):
            return None


# -- single experiment -------------------------------------------------------------------------

def _mean_change(trainer: Trainer, tag: str) -> Optional[float]:
    trace = trainer.traces.get(tag)
    if trace is None or len(trace.changes) == 0:
        return None
    window = trainer.cfg.tracking.summary_window
    vals = trace.changes[-window:] if window else trace.changes
    return float(np.mean(vals))


def _write_metrics_csv(metrics: dict, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(metrics):
            v = metrics[k]
            w.writerow([k, "" if v is None else f"{v:.9g}"])
    return path


def _plot_losses(trainer: Trainer, path: Path) -> Path:
    series = {}
    it = [r["iter"] for r in trainer.loss_log]
    for col in ("ce_source", "ce_target", "adv", "sim"):
        pts = [(i, r[col]) for i, r in zip(it, trainer.loss_log) if r[col] is not None]
        if pts:
            series[col] = ([p[0] for p in pts], [p[1] for p in pts])
    return svg.line_chart(path, series, title="training losses", xlabel="iteration", ylabel="loss")


def run_experiment(cfg: ExperimentConfig, out_dir, checkpoint_every: int = 0) -> dict:
    """Train and evaluate one configuration; returns the final metrics. Raises on failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json", cfg.config_hash(), cfg.seed)
    manifest.write()
    t0 = time.perf_counter()
    try:
        manifest.add(save_config(cfg, out / "config.json"))
        trainer = Trainer(cfg)
        ck_path = out / "checkpoint.tdac"
        if checkpoint_every > 0:
            while trainer.state.iteration < trainer.total_iters:
                trainer.run(until=trainer.state.iteration + checkpoint_every)
                save_checkpoint(trainer.state, ck_path)
        else:
            trainer.run()
        manifest.add(save_checkpoint(trainer.state, ck_path))
        manifest.add(trainer.write_loss_csv(out / "losses.csv"))
        manifest.add(_plot_losses(trainer, out / "losses.svg"))
        cm_t, cm_s = trainer.evaluate("target"), trainer.evaluate("source")
        names = trainer.spec.class_names()
        manifest.add(write_iou_csv(cm_t, out / "iou_target.csv", names))
        manifest.add(write_iou_csv(cm_s, out / "iou_source.csv", names))
        common = range(trainer.spec.num_common)
        metrics = {
            "target_miou": miou(cm_t, common),
            "source_miou": miou(cm_s, common),
            "mean_change_classifier": _mean_change(trainer, "classifier_target"),
            "mean_change_discriminator": _mean_change(trainer, "discriminator_target"),
        }
        for tag, trace in trainer.traces.items():
            if len(trace.changes) < 2:
                continue
            manifest.add(write_change_csv(trace, out / f"change_{tag}.csv"))
            spec = dft(trace.changes)
            manifest.add(write_spectrum_csv(spec, out / f"spectrum_{tag}.csv"))
            manifest.add(svg.line_chart(out / f"change_{tag}.svg",
                                        {tag: (trace.iterations[1:], trace.changes)},
                                        title=f"change of predictions: {tag}", xlabel="iteration",
                                        ylabel="L1 change"))
        manifest.add(_write_metrics_csv(metrics, out / "metrics.csv"))
        manifest.metrics = metrics
        manifest.status = "ok"
        return metrics
    except TrainingAborted as exc:
        manifest.status = "numeric_abort"
        manifest.error = {"type": "numeric_abort", **exc.diagnostics}
        raise
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = {"type": type(exc).__name__, "message": str(exc)}
        raise
    finally:
        manifest.wall_clock_s = round(time.perf_counter() - t0, 3)
        manifest.write()


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, default=str) + "\n")
    return code


def _default_dir(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / f"{cfg.variant_name()}-{cfg.config_hash()[:8]}-s{cfg.seed}"


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        if args.output:
            out = Path(args.output)
            out.mkdir(parents=True, exist_ok=True)
            stub = RunManifest(out / "manifest.json", "", -1, status="config_error",
                               error={"type": "config", "message": str(exc)})
            stub.write()
        return _fail(EXIT_CONFIG, "config", str(exc))
    out = Path(args.output) if args.output else _default_dir(cfg)
    try:
        metrics = run_experiment(cfg, out, args.checkpoint_every)
    except TrainingAborted as exc:
        return _fail(EXIT_NUMERIC, "numeric_abort", str(exc), diagnostics=exc.diagnostics)
    print(json.dumps({"output": str(out), **metrics}, sort_keys=True))
    return EXIT_OK


# -- matrices ---------------------------------------------------------------------------------

def ablation_variants(base: ExperimentConfig, backbones: Sequence[str]):
    """Yield (config, None) for legal variants and (None, reason) for rejected ones."""
    for kind in backbones:
        for mode in ("none", "binary", "class"):
            for dyn in (False, True):
                for pl in (False, True):
                    for fa in (False, True):
                        changes = {"extractor.kind": kind, "discriminator_mode": mode, "dynamic_weights": dyn,
                                   "smoothing.mo_pl": pl, "smoothing.mo_fa": fa}
                        try:
                            yield with_changes(base, **changes), None
                        except ConfigError as exc:
                            yield None, f"{kind}/{mode}/dyn={dyn}/mo_pl={pl}/mo_fa={fa}: {exc}"


def _row(cfg: ExperimentConfig, metrics: Optional[dict]) -> dict:
    sm = cfg.smoothing
    row = {"discriminator": cfg.discriminator_mode, "dynamic": int(cfg.dynamic_weights),
           "mo_pl": int(sm.mo_pl), "mo_fa": int(sm.mo_fa), "backbone": cfg.extractor.kind,
           "seed": cfg.seed, "m": sm.m}
    for k in METRIC_KEYS:
        row[k] = None if metrics is None else metrics.get(k)
    return row


def _run_job(job) -> tuple[Optional[dict], Optional[str]]:
    cfg_dict, out = job
    cfg = from_dict(cfg_dict)
    done = RunManifest.read(Path(out) / "manifest.json")
    if done and done.get("status") == "ok" and done.get("config_hash") == cfg.config_hash():
        return done["metrics"], None
    try:
        return run_experiment(cfg, out), None
    except Exception as exc:  # recorded per row; the matrix keeps going
        return None, f"{type(exc).__name__}: {exc}"


def _run_all(jobs: list[tuple[ExperimentConfig, Path]], workers: int):
    payload = [(c.to_dict(), str(o)) for c, o in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, payload))
    return [_run_job(p) for p in payload]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def aggregate(values: Sequence[Optional[float]]) -> Optional[tuple[float, float]]:
    """Mean and sample standard deviation (0 for a single run) over the non-missing values."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), std


def _agg_cell(values) -> str:
    agg = aggregate(values)
    return "" if agg is None else f"{agg[0]:.6f}±{agg[1]:.6f}"


def write_summary(rows: list[dict], path: Path, key_cols: Sequence[str], lead: Sequence[str] = ()) -> Path:
    cols = list(lead) + list(SUMMARY_COLUMNS) + ["status"]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[c] for c in key_cols), []).append(r)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c not in METRIC_KEYS else _fmt(r[c]) for c in cols[:-1]] + [r["status"]])
        for key, members in groups.items():
            first = members[0]
            cells = []
            for c in cols[:-1]:
                if c in METRIC_KEYS:
                    cells.append(_agg_cell([m[c] for m in members]))
                elif c == "seed":
                    cells.append("mean±std")
                else:
                    cells.append(first[c])
            cells.append(f"{sum(m['status'] == 'ok' for m in members)}/{len(members)} ok")
            w.writerow(cells)
    return path


def _matrix_dir(args, name: str) -> Path:
    return Path(args.output) if args.output else output_root() / name


def cmd_ablate(args) -> int:
    try:
        base = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    out = _matrix_dir(args, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    backbones = args.backbones or [base.extractor.kind]
    jobs, skipped = [], []
    for cfg, reason in ablation_variants(base, backbones):
        if cfg is None:
            log.warning("skipping illegal variant %s", reason)
            skipped.append(reason)
            continue
        for seed in args.seeds:
            c = with_changes(cfg, seed=seed)
            jobs.append((c, out / c.variant_name() / f"seed{seed}"))
    results = _run_all(jobs, args.jobs)
    rows = []
    for (cfg, _), (metrics, err) in zip(jobs, results):
        row = _row(cfg, metrics)
        row["status"] = "ok" if err is None else f"failed: {err}"
        rows.append(row)
    path = write_summary(rows, out / "summary.csv",
                         ("backbone", "discriminator", "dynamic", "mo_pl", "mo_fa"))
    (out / "skipped.txt").write_text("".join(s + "\n" for s in skipped))
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"summary": str(path), "runs": len(rows), "failed": failed, "skipped": len(skipped)}))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_mgrid(args) -> int:
    try:
        base = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    if not base.smoothing.active:
        return _fail(EXIT_CONFIG, "config", "momentum grid needs smoothing.mo_pl or smoothing.mo_fa enabled")
    out = _matrix_dir(args, "momentum_grid")
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for m in sorted(args.m_values):
        for seed in args.seeds:
            c = with_changes(base, **{"smoothing.m": m, "seed": seed})
            jobs.append((c, out / f"m{m:g}" / f"seed{seed}"))
    results = _run_all(jobs, args.jobs)
    rows = []
    for (cfg, _), (metrics, err) in zip(jobs, results):
        row = _row(cfg, metrics)
        row["status"] = "ok" if err is None else f"failed: {err}"
        rows.append(row)
    path = write_summary(rows, out / "summary.csv", ("m",), lead=("m",))
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"summary": str(path), "runs": len(rows), "failed": failed}))
    return EXIT_PARTIAL if failed else EXIT_OK


# -- diagnostics / eval / data ------------------------------------------------------------------

def cmd_toy(args) -> int:
    out = Path(args.output) if args.output else output_root() / "toy"
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    report = diagnostics.toy_gaussian_experiment(args.sigmas, args.K, args.T, seeds, args.band_cutoff)
    manifest = RunManifest(out / "manifest.json", "", -1)
    for p in diagnostics.write_toy_report(report, out):
        manifest.add(p)
    oc, oh = report.ordered_fraction("change"), report.ordered_fraction("high_band")
    manifest.metrics = {"ordered_change": oc, "ordered_high_band": oh,
                        **{f"mean_change_sigma_{s:g}": report.mean_change(s) for s in report.sigmas},
                        **{f"mean_high_band_sigma_{s:g}": report.mean_high_band(s) for s in report.sigmas}}
    ok = oc >= args.min_fraction and oh >= args.min_fraction
    manifest.status = "ok" if ok or not args.assert_ordering else "ordering_failed"
    manifest.write()
    print(json.dumps(manifest.metrics, sort_keys=True))
    if args.assert_ordering and not ok:
        return _fail(EXIT_FAIL, "ordering", f"sigma ordering held in {oc:.0%} (change) / {oh:.0%} (high band) "
                                            f"of seeds; required {args.min_fraction:.0%}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    try:
        state = load_checkpoint(args.checkpoint, cfg.smoothing.m)
    except CheckpointError as exc:
        return _fail(EXIT_FAIL, "checkpoint", str(exc))
    trainer = Trainer(cfg, state)
    cm = trainer.evaluate(args.domain)
    result = {"checkpoint": str(args.checkpoint), "domain": args.domain,
              "miou": miou(cm, range(trainer.spec.num_common))}
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        write_iou_csv(cm, out / f"iou_{args.domain}.csv", trainer.spec.class_names())
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_export_data(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    out = Path(args.output) if args.output else output_root() / "data"
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.data.domain_spec(cfg.extractor.image_size)
    d = cfg.data
    # same seed streams as the trainer's data pool
    splits = {"source_train": ("source", d.n_source, STREAM_SOURCE),
              "target_train": ("target", d.n_target, STREAM_TARGET),
              "target_test": ("target", d.n_test, STREAM_TEST)}
    manifest = RunManifest(out / "manifest.json", cfg.config_hash(), cfg.seed)
    for name, (domain, n, tag) in splits.items():
        samples = generate(spec, domain, n, derive_seed(cfg.seed, tag))
        manifest.add(export_dataset(samples, out / f"{name}.tdad", spec.num_total))
    manifest.status = "ok"
    manifest.write()
    print(json.dumps({"output": str(out), "files": manifest.outputs}))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="experiment JSON file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. smoothing.m=0.99 (repeatable)")
        sp.add_argument("--output", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")

    sp = sub.add_parser("run", help="train and evaluate one configuration")
    with_config(sp)
    sp.add_argument("--checkpoint-every", type=int, default=0, metavar="N")
    sp.set_defaults(func=cmd_run)

    for name, func, help_ in (("ablate", cmd_ablate, "discriminator x dynamic x MoPL x MoFA matrix"),
                              ("mgrid", cmd_mgrid, "sweep the momentum coefficient")):
        sp = sub.add_parser(name, help=help_)
        with_config(sp)
        sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "ablate":
            sp.add_argument("--backbones", nargs="+", choices=("local_vit", "cnn"))
        else:
            sp.add_argument("--m-values", type=float, nargs="+", default=list(MOMENTUM_GRID))
        sp.set_defaults(func=func)

    sp = sub.add_parser("toy", help="Gaussian-process toy spectra")
    sp.add_argument("--output")
    sp.add_argument("--seeds", type=int, default=20, help="number of seeds (0..N-1)")
    sp.add_argument("--sigmas", type=float, nargs="+", default=[0.5, 1.0, 10.0])
    sp.add_argument("--K", type=int, default=5)
    sp.add_argument("--T", type=int, default=20)
    sp.add_argument("--band-cutoff", type=float, default=None)
    sp.add_argument("--assert-ordering", action="store_true")
    sp.add_argument("--min-fraction", type=float, default=0.95)
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--domain", choices=("target", "source"), default="target")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-data", help="write the synthetic splits as dataset files")
    with_config(sp)
    sp.set_defaults(func=cmd_export_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
