import json
import math

import numpy as np
import pytest

from fgn import forecast as ff
from fgn import io as fio
from fgn import synthdata as sd
from fgn import training as tr
from fgn.cli import main

SMALL_MODEL = ["--d-latent", "8", "--n-layers", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A small dataset, climatology and two trained seeds shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data" / "ds.fgn"), "--K", "8", "--n-frames", "700",
                 "--climatology-frames", "3000"]) == 0
    assert main(["train", str(root / "data" / "ds.fgn"), "--out", str(root / "models"), "--seeds", "2",
                 "--single-steps", "40", "--no-ar", *SMALL_MODEL]) == 0
    return root


def files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and not p.name.startswith("timing-")}


# --- gen-data ---------------------------------------------------------------


def test_gen_data_is_loadable_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out, _ = run(capsys, "gen-data", "--out", a / "ds.fgn", "--K", "8", "--n-frames", "300",
                       "--climatology-frames", "500")
    assert code == 0 and "std=" in out
    assert run(capsys, "gen-data", "--out", b / "ds.fgn", "--K", "8", "--n-frames", "300",
               "--climatology-frames", "500")[0] == 0
    assert files(a) == files(b)
    assert sd.load(a / "ds.fgn").K == 8
    manifest = json.loads((a / "manifest-gen-data.json").read_text())
    assert set(manifest["outputs"]) == {"ds.fgn", "ds.climatology.fgn"}
    assert sd.read_header(a / "ds.fgn")["run_id"] == manifest["run_id"]
    assert "wall_time_s" in json.loads((a / "timing-gen-data.json").read_text())


def test_gen_data_seed_changes_output(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path / "a.fgn", "--K", "8", "--n-frames", "300",
        "--climatology-frames", "0")
    run(capsys, "gen-data", "--out", tmp_path / "b.fgn", "--K", "8", "--n-frames", "300",
        "--climatology-frames", "0", "--seed", "5")
    assert (tmp_path / "a.fgn").read_bytes() != (tmp_path / "b.fgn").read_bytes()
    assert not (tmp_path / "a.climatology.fgn").exists()


def test_gen_data_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"system": {"K": 6, "F": 7.5}, "n_frames": 250}))
    assert run(capsys, "gen-data", "--config", cfg, "--F", "8.5", "--out", tmp_path / "d.fgn",
               "--climatology-frames", "0")[0] == 0
    header = sd.read_header(tmp_path / "d.fgn")
    assert header["K"] == 6 and header["T"] == 250 and header["system"]["F"] == 8.5


@pytest.mark.parametrize("argv,needle", [
    (["--split-fractions", "0.5,0.5,0.5"], "split_fractions"),
    (["--noise-std", "-1"], "noise_std"),
    (["--burn-in", "10"], "burn_in"),
])
def test_gen_data_invalid_config_exits_2(tmp_path, capsys, argv, needle):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "x.fgn", "--n-frames", "300", *argv)
    assert code == 2 and needle in err


def test_bad_config_files_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert run(capsys, "gen-data", "--config", tmp_path / "bad.json", "--out", tmp_path / "x.fgn")[0] == 2
    assert run(capsys, "gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "x.fgn")[0] == 2


# --- train ------------------------------------------------------------------


def test_train_outputs(work):
    models = work / "models"
    for s in (0, 1):
        assert (models / f"seed{s}.ckpt").exists() and (models / f"seed{s}.single.ckpt").exists()
    manifest = json.loads((models / "manifest-train.json").read_text())
    assert "seed1.ckpt" in manifest["outputs"] and list(manifest["inputs"]) == ["ds.fgn"]
    assert manifest["config"]["train"]["model"]["K"] == 8


def test_train_smoke_run_loss_decreases(tmp_path, work, capsys):
    # pilot (K=8, d_latent=8, one layer, 200 steps): loss roughly halves
    code, _, _ = run(capsys, "train", work / "data" / "ds.fgn", "--out", tmp_path, "--seeds", "1",
                     "--single-steps", "200", "--no-ar", *SMALL_MODEL)
    assert code == 0
    recs = [json.loads(line) for line in (tmp_path / "seed0.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [50, 100, 150, 200]
    assert recs[-1]["loss"] < recs[0]["loss"]


def test_train_resume_reproduces_uninterrupted_run(tmp_path, work, capsys):
    ds_path = work / "data" / "ds.fgn"
    args = ["--seeds", "1", "--single-steps", "60", "--no-ar", *SMALL_MODEL]
    assert run(capsys, "train", ds_path, "--out", tmp_path / "full", *args)[0] == 0

    # interrupted copy: same config, stopped after 25 steps by the library
    full_cfg = tr.load_run(tmp_path / "full" / "seed0.run")[1]
    part = tmp_path / "part"
    part.mkdir()
    ds = sd.load(ds_path)
    state = tr.init_run(ds, full_cfg, 0)
    cfg = tr.TrainConfig.from_dict({**full_cfg.to_dict(), "checkpoint_every": 20})
    tr.run_stages(state, ds, cfg, part / "seed0.log.jsonl", part / "seed0.run", stop_after=25)
    # the run file must carry the CLI's config; rewrite it with the 20-step state
    tr.save_run(part / "seed0.run", tr.load_run(part / "seed0.run")[0], full_cfg)
    assert run(capsys, "train", ds_path, "--out", part, "--resume", *args)[0] == 0
    for name in ("seed0.ckpt", "seed0.log.jsonl", "seed0.single.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (part / name).read_bytes(), name


def test_train_errors(tmp_path, work, capsys):
    assert run(capsys, "train", tmp_path / "nope.fgn", "--out", tmp_path)[0] == 2
    code, _, err = run(capsys, "train", work / "data" / "ds.fgn", "--out", tmp_path, "--seeds", "2",
                       "--seed-ids", "0,1,2")
    assert code == 2 and "--seed-ids" in err
    (tmp_path / "k.json").write_text(json.dumps({"model": {"K": 40}}))
    code, _, err = run(capsys, "train", work / "data" / "ds.fgn", "--config", tmp_path / "k.json",
                       "--out", tmp_path)
    assert code == 2 and "K=40" in err


def test_train_divergence_exits_3_and_reports_each_seed(tmp_path, work, capsys, monkeypatch):
    real = tr.loss_and_grads

    def poisoned(params, *rest):
        v, g = real(params, *rest)
        return (math.nan, g) if params.seed_id == 0 else (v, g)

    monkeypatch.setattr(tr, "loss_and_grads", poisoned)
    code, out, _ = run(capsys, "train", work / "data" / "ds.fgn", "--out", tmp_path, "--seeds", "2",
                       "--single-steps", "10", "--no-ar", *SMALL_MODEL)
    assert code == 3 and "seed 0: diverged" in out
    report = json.loads((tmp_path / "failures.json").read_text())
    assert list(report) == ["0"] and report["0"]["step"] == 1
    assert (tmp_path / "seed1.ckpt").exists()


def test_corrupt_dataset_exits_4(tmp_path, work, capsys):
    raw = bytearray((work / "data" / "ds.fgn").read_bytes())
    raw[-10] ^= 0x40
    (tmp_path / "bad.fgn").write_bytes(bytes(raw))
    assert run(capsys, "train", tmp_path / "bad.fgn", "--out", tmp_path / "m")[0] == 4
    (tmp_path / "junk.fgn").write_bytes(b"hello")
    assert run(capsys, "forecast", work / "models" / "seed0.ckpt", "--dataset", tmp_path / "junk.fgn",
               "--out", tmp_path / "f")[0] == 4


# --- forecast ---------------------------------------------------------------


def _forecast(capsys, work, out, *extra):
    return run(capsys, "forecast", work / "models" / "seed0.ckpt", work / "models" / "seed1.ckpt",
               "--dataset", work / "data" / "ds.fgn", "--members", "4", "--lead", "5", "--n-inits", "6",
               "--out", out, *extra)


def test_forecast_files_and_determinism(tmp_path, work, capsys):
    assert _forecast(capsys, work, tmp_path / "a")[0] == 0
    assert _forecast(capsys, work, tmp_path / "b")[0] == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    fcs = sorted((tmp_path / "a").glob("*.fcst"))
    assert len(fcs) == 6
    fc = ff.load(fcs[0])
    assert fc.values.shape == (4, 5, 8) and list(fc.member_seed) == [0, 1, 0, 1]
    lo, hi = sd.load(work / "data" / "ds.fgn").splits["test"]
    assert all(lo < ff.load(p).init_index <= hi - 1 - 5 for p in fcs)
    assert _forecast(capsys, work, tmp_path / "c", "--seed", "1")[0] == 0
    assert files(tmp_path / "a") != files(tmp_path / "c")


def test_forecast_explicit_inits(tmp_path, work, capsys):
    assert _forecast(capsys, work, tmp_path, "--inits", "600,610")[0] == 0
    assert sorted(p.name for p in tmp_path.glob("*.fcst")) == ["init000600.fcst", "init000610.fcst"]
    assert _forecast(capsys, work, tmp_path / "x", "--inits", "0")[0] == 2
    assert _forecast(capsys, work, tmp_path / "x", "--inits", "a,b")[0] == 2


def test_forecast_member_allocation_rule_exits_2(tmp_path, work, capsys):
    code, _, err = run(capsys, "forecast", work / "models" / "seed0.ckpt", work / "models" / "seed1.ckpt",
                       "--dataset", work / "data" / "ds.fgn", "--members", "5", "--out", tmp_path)
    assert code == 2 and "equal number of members" in err


# --- verify -----------------------------------------------------------------


@pytest.fixture(scope="module")
def forecasts(work):
    out = work / "fc"
    assert main(["forecast", str(work / "models" / "seed0.ckpt"), str(work / "models" / "seed1.ckpt"),
                 "--dataset", str(work / "data" / "ds.fgn"), "--members", "4", "--lead", "5",
                 "--n-inits", "6", "--out", str(out)]) == 0
    return out


def _verify(capsys, work, fc_dir, out, *extra):
    return run(capsys, "verify", fc_dir, "--dataset", work / "data" / "ds.fgn",
               "--climatology", work / "data" / "ds.climatology.fgn", "--pool-widths", "1,2,4",
               "--out", out, *extra)


def test_verify_outputs_and_reproducibility(tmp_path, work, forecasts, capsys):
    code, out, _ = _verify(capsys, work, forecasts, tmp_path / "a")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 5 and lines[0].startswith("lead 1: crps=")
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"metrics.json", "metrics.csv", "rev.csv", "spectrum.csv", "skill.png", "pooled_crps.png",
            "spectrum.png", "rev.png", "manifest-verify.json"} <= names
    assert _verify(capsys, work, forecasts, tmp_path / "b")[0] == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    report = json.loads((tmp_path / "a" / "metrics.json").read_text())
    manifest = json.loads((tmp_path / "a" / "manifest-verify.json").read_text())
    assert report["provenance"]["run_id"] == manifest["run_id"]
    assert all(len(e["per_init"]) == 6 for e in report["metrics"].values())


def test_verify_forecast_against_its_own_truth_scores_zero(tmp_path, work, capsys):
    frames = sd.load(work / "data" / "ds.fgn").frames
    cfg = ff.EnsembleConfig(4, ("truth",), lead_steps=5)
    for i in (600, 620, 640):
        perfect = np.repeat(frames[None, i + 1:i + 6], 4, axis=0)
        ff.save(ff.EnsembleForecast(perfect, np.zeros(4, int), [0], i, cfg), tmp_path / f"i{i}.fcst")
    code, _, _ = run(capsys, "verify", tmp_path, "--dataset", work / "data" / "ds.fgn", "--no-rev",
                     "--pool-widths", "1,2", "--no-figures", "--out", tmp_path / "v")
    assert code == 0
    report = json.loads((tmp_path / "v" / "metrics.json").read_text())
    assert report["metrics"]["crps"]["value"] == [0.0] * 5
    assert report["metrics"]["rmse"]["value"] == [0.0] * 5


def test_verify_baseline_identical_sets_have_zero_differences(tmp_path, work, forecasts, capsys):
    code, _, _ = _verify(capsys, work, forecasts, tmp_path, "--baseline", forecasts, "--no-figures")
    assert code == 0
    comp = json.loads((tmp_path / "metrics.json").read_text())["comparison"]
    for metric, e in comp.items():
        assert e["mean_diff"] == [0.0] * 5 and e["ci_low"] == [0.0] * 5 and e["ci_high"] == [0.0] * 5, metric
    assert (tmp_path / "comparison.csv").exists()


def test_verify_without_climatology(tmp_path, work, forecasts, capsys):
    code, _, err = run(capsys, "verify", forecasts, "--dataset", work / "data" / "ds.fgn", "--out", tmp_path)
    assert code == 2 and "climatology" in err
    code, _, _ = run(capsys, "verify", forecasts, "--dataset", work / "data" / "ds.fgn", "--no-rev",
                     "--pool-widths", "1,2", "--no-figures", "--out", tmp_path)
    assert code == 0 and "rev" not in json.loads((tmp_path / "metrics.json").read_text())


def test_verify_shape_mismatch_exits_2(tmp_path, work, forecasts, capsys):
    assert run(capsys, "gen-data", "--out", tmp_path / "k6.fgn", "--K", "6", "--n-frames", "700",
               "--climatology-frames", "0")[0] == 0
    code, _, err = run(capsys, "verify", forecasts, "--dataset", tmp_path / "k6.fgn", "--no-rev",
                       "--out", tmp_path / "v")
    assert code == 2 and "K=" in err
    code, _, _ = _verify(capsys, work, forecasts, tmp_path / "w", "--pool-widths", "16")
    assert code == 2
    assert run(capsys, "verify", tmp_path / "none", "--dataset", work / "data" / "ds.fgn")[0] == 2


def test_usage_errors_from_argparse(capsys):
    with pytest.raises(SystemExit) as info:
        main(["forecast"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_output_root_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FGN_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run(capsys, "gen-data", "--K", "8", "--n-frames", "300", "--climatology-frames", "0")[0] == 0
    assert (tmp_path / "root" / "data" / "dataset.fgn").exists()


# --- ablate -----------------------------------------------------------------


def test_ablate_end_to_end_schema(tmp_path, work, capsys):
    cfg = {"stages": [{"name": "single", "rollout_len": 1, "steps": 30, "peak_lr": 1e-3, "warmup": 3},
                      {"name": "ar1", "rollout_len": 1, "steps": 5, "peak_lr": 1e-4, "warmup": 1},
                      {"name": "ar2", "rollout_len": 2, "steps": 5, "peak_lr": 1e-4, "warmup": 1}],
           "model": {"d_latent": 8, "n_layers": 1}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    args = ["ablate", work / "data" / "ds.fgn", "--config", tmp_path / "cfg.json", "--control",
            "--climatology", work / "data" / "ds.climatology.fgn", "--members", "4", "--lead", "6",
            "--n-inits", "5", "--pool-widths", "1,4"]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0
    summary = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert set(summary["configs"]) == {"single", "ar", "ensemble_ar", "control"}
    for c in summary["configs"].values():
        assert len(c["metrics"]["crps"]["per_init"]) == 5
    assert summary["configs"]["ensemble_ar"]["checkpoints"] == [f"fgn/seed{i}.ckpt" for i in range(4)]
    pair = summary["comparisons"]["single-ensemble_ar"]["crps"]
    assert all(lo <= d <= hi for d, lo, hi in zip(pair["mean_diff"], pair["ci_low"], pair["ci_high"]))
    assert set(summary["comparisons"]) == {"single-ar", "ar-ensemble_ar", "single-ensemble_ar", "control-single"}
    assert (tmp_path / "a" / "ablation_single-ensemble_ar.png").exists()
    assert "single-ensemble_ar crps lead 5" in out
    ctrl = tr.load_run(tmp_path / "a" / "control" / "seed0.run")[1]
    assert ctrl.model.noise_mode == "per_site" and [s.name for s in ctrl.stages] == ["single"]

    # rerun from scratch elsewhere: byte-identical artifacts
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    # resume over finished runs retrains nothing and changes nothing
    assert run(capsys, *args, "--out", tmp_path / "a", "--resume")[0] == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_ablate_needs_ar_stages(tmp_path, work, capsys):
    code, _, err = run(capsys, "ablate", work / "data" / "ds.fgn", "--no-ar", "--out", tmp_path)
    assert code == 2 and "autoregressive" in err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip()


def test_artifact_headers_carry_run_id(tmp_path, work, forecasts):
    manifest = json.loads((forecasts / "manifest-forecast.json").read_text())
    header = fio.read_header(next(forecasts.glob("*.fcst")), ff.FORECAST_MAGIC)
    assert header["run_id"] == manifest["run_id"]
    assert sorted(manifest["inputs"]) == ["ds.fgn", "seed0.ckpt", "seed1.ckpt"]
