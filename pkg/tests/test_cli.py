import csv
import json

import numpy as np
import pytest

from conftest import tiny_config
from transda import cli
from transda.config import load_config, save_config
from transda.synthdata import import_dataset


@pytest.fixture
def cfg_path(tmp_path):
    return save_config(tiny_config(**{"schedule.rounds": 1}), tmp_path / "exp.json")


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_manifest_and_outputs(cfg_path, tmp_path, capsys):
    out = tmp_path / "r"
    assert run_cli("run", "--config", cfg_path, "--set", "seed=3", "--output", out) == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 3
    assert load_config(out / "config.json").seed == 3
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert on_disk == set(manifest["outputs"])  # nothing orphaned
    for name in ("losses.csv", "metrics.csv", "iou_target.csv", "checkpoint.tdac", "losses.svg",
                 "change_classifier_target.csv", "spectrum_classifier_target.csv"):
        assert name in on_disk
    printed = json.loads(capsys.readouterr().out)
    assert 0.0 <= printed["target_miou"] <= 1.0


def test_run_is_deterministic(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert run_cli("run", "--config", cfg_path, "--output", tmp_path / name) == 0
    for f in ("metrics.csv", "losses.csv", "iou_target.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_checkpoint_every_gives_same_result(cfg_path, tmp_path):
    run_cli("run", "--config", cfg_path, "--output", tmp_path / "a")
    run_cli("run", "--config", cfg_path, "--output", tmp_path / "b", "--checkpoint-every", "2")
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_missing_config_leaves_only_a_stub(tmp_path, capsys):
    out = tmp_path / "r"
    assert run_cli("run", "--config", tmp_path / "nope.json", "--output", out) == cli.EXIT_CONFIG
    assert [p.name for p in out.iterdir()] == ["manifest.json"]
    assert json.loads((out / "manifest.json").read_text())["status"] == "config_error"
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "not found" in err["message"]


def test_bad_key_lists_valid_keys(cfg_path, tmp_path, capsys):
    assert run_cli("run", "--config", cfg_path, "--set", "smoothing.mx=1") == cli.EXIT_CONFIG
    assert "mo_pl, mo_fa, m" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_has_its_own_exit_code(cfg_path, tmp_path, capsys):
    code = run_cli("run", "--config", cfg_path, "--set", "optim.lr_fc=1e30", "--set", "optim.lr_ds=1e30",
                   "--output", tmp_path / "r")
    assert code == cli.EXIT_NUMERIC
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "numeric_abort" and "grad_norms" in err["diagnostics"]
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["status"] == "numeric_abort"


def test_output_root_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert run_cli("run", "--config", cfg_path) == 0
    (run_dir,) = (tmp_path / "root").iterdir()
    assert run_dir.name.startswith("local_vit-binary-dyn1-pl1-fa1-m0.999-")


# -- matrices ----------------------------------------------------------------------------------

def test_ablation_variants_count():
    cfgs = [c for c, _ in cli.ablation_variants(tiny_config(), ["local_vit"])]
    legal = [c for c in cfgs if c is not None]
    assert len(legal) == 18 and len(cfgs) == 24
    none_mode = [c for c in legal if c.discriminator_mode == "none"]
    assert [(c.smoothing.mo_pl) for c in none_mode] == [False, True]
    assert len([c for c, _ in cli.ablation_variants(tiny_config(), ["local_vit", "cnn"]) if c]) == 36


def test_ablate_summary_and_resume(tmp_path, monkeypatch, capsys):
    path = save_config(tiny_config(**{"schedule.warmup_iters": 1, "schedule.iters_per_round": 1,
                                      "schedule.rounds": 1}), tmp_path / "exp.json")
    out = tmp_path / "abl"
    assert run_cli("ablate", "--config", path, "--seeds", "0", "1", "--output", out) == 0
    rows = read_rows(out / "summary.csv")
    assert list(rows[0])[:9] == list(cli.SUMMARY_COLUMNS)
    per_run = [r for r in rows if r["seed"] != "mean±std"]
    agg = [r for r in rows if r["seed"] == "mean±std"]
    assert len(per_run) == 36 and len(agg) == 18
    assert all(r["status"] == "ok" for r in per_run)
    skipped = (out / "skipped.txt").read_text().splitlines()
    assert len(skipped) == 6 and all("none" in s for s in skipped)

    calls = []
    monkeypatch.setattr(cli, "run_experiment", lambda *a, **k: calls.append(a))
    assert run_cli("ablate", "--config", path, "--seeds", "0", "1", "--output", out) == 0
    assert calls == []  # every row already complete
    assert read_rows(out / "summary.csv") == rows


def test_summary_statistics_recompute(tmp_path):
    rows = []
    for seed, v in enumerate((0.2, 0.5, 0.6)):
        rows.append({"discriminator": "binary", "dynamic": 1, "mo_pl": 1, "mo_fa": 1, "backbone": "cnn",
                     "seed": seed, "m": 0.9, "target_miou": v, "mean_change_classifier": 2 * v,
                     "mean_change_discriminator": None, "status": "ok"})
    out = cli.write_summary(rows, tmp_path / "s.csv", ("m",), lead=("m",))
    agg = read_rows(out)[-1]
    mean, std = (float(x) for x in agg["target_miou"].split("±"))
    vals = [0.2, 0.5, 0.6]
    ref_mean = sum(vals) / 3
    ref_std = (sum((v - ref_mean) ** 2 for v in vals) / 2) ** 0.5
    assert mean == pytest.approx(ref_mean, abs=1e-6) and std == pytest.approx(ref_std, abs=1e-6)
    assert agg["mean_change_discriminator"] == "" and agg["status"] == "3/3 ok"
    assert cli.aggregate([0.4]) == (0.4, 0.0) and cli.aggregate([None]) is None


def test_failed_rows_are_recorded_and_matrix_continues(tmp_path, monkeypatch):
    path = save_config(tiny_config(), tmp_path / "exp.json")

    def flaky(cfg, out, checkpoint_every=0):
        if cfg.smoothing.m == 0.9:
            raise RuntimeError("boom")
        return {"target_miou": cfg.smoothing.m}

    monkeypatch.setattr(cli, "run_experiment", flaky)
    code = run_cli("mgrid", "--config", path, "--seeds", "0", "--m-values", "0.9", "0", "0.99",
                   "--output", tmp_path / "g")
    assert code == cli.EXIT_PARTIAL
    rows = read_rows(tmp_path / "g" / "summary.csv")
    assert [r["m"] for r in rows[:3]] == ["0.0", "0.9", "0.99"]  # sorted ascending
    assert rows[1]["status"].startswith("failed: RuntimeError")
    assert rows[2]["target_miou"] == "0.990000"


def test_mgrid_counts(tmp_path, monkeypatch):
    path = save_config(tiny_config(), tmp_path / "exp.json")
    monkeypatch.setattr(cli, "run_experiment", lambda cfg, out, checkpoint_every=0: {"target_miou": 0.5})
    assert run_cli("mgrid", "--config", path, "--seeds", "0", "1", "2", "--output", tmp_path / "g") == 0
    rows = read_rows(tmp_path / "g" / "summary.csv")
    assert len(rows) == 15 + 5
    ms = [float(r["m"]) for r in rows[:15]]
    assert ms == sorted(ms)


def test_mgrid_zero_row_matches_no_smoothing(tmp_path):
    path = save_config(tiny_config(**{"schedule.warmup_iters": 6, "schedule.rounds": 1,
                                      "schedule.iters_per_round": 1}), tmp_path / "exp.json")
    run_cli("mgrid", "--config", path, "--seeds", "0", "--m-values", "0", "--output", tmp_path / "g")
    run_cli("run", "--config", path, "--set", "smoothing.mo_pl=false", "--set", "smoothing.mo_fa=false",
            "--set", "schedule.warmup_iters=6", "--output", tmp_path / "r")
    grid = read_rows(tmp_path / "g" / "m0" / "seed0" / "losses.csv")
    plain = read_rows(tmp_path / "r" / "losses.csv")
    for a, b in zip(grid[:6], plain[:6]):  # warm-up iterations
        assert float(a["ce_source"]) == pytest.approx(float(b["ce_source"]), abs=1e-6)


def test_mgrid_rejects_unsmoothed_base(tmp_path):
    path = save_config(tiny_config(**{"smoothing.mo_pl": False, "smoothing.mo_fa": False}), tmp_path / "e.json")
    assert run_cli("mgrid", "--config", path, "--output", tmp_path / "g") == cli.EXIT_CONFIG


# -- toy / eval / export ------------------------------------------------------------------------

def test_toy_report(tmp_path, capsys):
    assert run_cli("toy", "--output", tmp_path / "a", "--assert-ordering") == 0
    first = json.loads(capsys.readouterr().out)
    assert first["ordered_change"] >= 0.95
    spectra = sorted(p.name for p in (tmp_path / "a").glob("*spectrum.csv"))
    assert spectra == ["toy_sigma_0.5_spectrum.csv", "toy_sigma_10_spectrum.csv", "toy_sigma_1_spectrum.csv"]
    run_cli("toy", "--output", tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        if p.name != "manifest.json":
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_toy_ordering_flag_fails_when_sigmas_tie(tmp_path, capsys):
    code = run_cli("toy", "--output", tmp_path, "--sigmas", "1", "1", "1", "--assert-ordering")
    assert code == cli.EXIT_FAIL
    assert json.loads(capsys.readouterr().err.splitlines()[-1])["error"] == "ordering"


def test_eval_checkpoint(cfg_path, tmp_path, capsys):
    run_cli("run", "--config", cfg_path, "--output", tmp_path / "r")
    run_out = json.loads(capsys.readouterr().out)
    assert run_cli("eval", "--config", cfg_path, "--checkpoint", tmp_path / "r" / "checkpoint.tdac",
                   "--output", tmp_path / "e") == 0
    assert json.loads(capsys.readouterr().out)["miou"] == pytest.approx(run_out["target_miou"])
    assert (tmp_path / "e" / "iou_target.csv").exists()
    (tmp_path / "bad.tdac").write_bytes(b"junk")
    assert run_cli("eval", "--config", cfg_path, "--checkpoint", tmp_path / "bad.tdac") == cli.EXIT_FAIL
    assert "bad.tdac" in capsys.readouterr().err


def test_export_data_matches_trainer_pool(cfg_path, tmp_path):
    from transda.trainer import DataPool

    assert run_cli("export-data", "--config", cfg_path, "--output", tmp_path / "d") == 0
    samples, k = import_dataset(tmp_path / "d" / "target_test.tdad", "target")
    pool = DataPool(load_config(cfg_path))
    assert k == 5 and len(samples) == 4
    np.testing.assert_array_equal(np.stack([s.image for s in samples]), pool.test_images)
