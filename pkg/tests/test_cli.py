import json

import numpy as np
import pytest

from eegalign.cli import main
from eegalign.data import TrialSet, read_eegt, write_eegt
from eegalign.models import load_checkpoint, predict_subjects
from eegalign.training import combine_four_to_three, read_predictions_csv, uar

MICRO = {"model": dict(temporal_filters_per_branch=2, spatial_depth_multiplier=2, branch_dilations=[1, 2],
                       kernel_size=3, block2_kernel=3, stage_kernel=3, pool1_kernel=2, pool2_kernel=2,
                       final_pool=4, stage_channels=[4, 2]),
         "train": dict(batches_per_epoch=2)}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = dict(n_subjects=4, trials_per_class=4, n_classes=4, n_channels=3, n_samples=32, fs=64.0,
                band_hz=[2.0, 12.0], snr=3.0)
    (d / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(d / "spec.json"), "--seed", "0", "--out", str(d / "all.eegt")]) == 0
    data = read_eegt(d / "all.eegt")
    write_eegt(data.of_subjects([0, 1]), d / "src.eegt")
    write_eegt(data.of_subjects([2]), d / "cal.eegt")
    write_eegt(data.of_subjects([3]), d / "test.eegt")
    (d / "micro.json").write_text(json.dumps(MICRO))
    return d


def train_args(d, out, *extra):
    return ["train", "--task", "mi", "--source", d / "src.eegt", "--calib", d / "cal.eegt", "--test",
            d / "test.eegt", "--config", d / "micro.json", "--epochs", 1, "--seed", 3, "--out", out, *extra]


# -- synth -----------------------------------------------------------------------

def test_synth_deterministic_with_manifest(tmp_path, files, capsys):
    out = tmp_path / "again.eegt"
    code, _, _ = run(capsys, "synth", "--spec", files / "spec.json", "--seed", 0, "--out", out)
    assert code == 0
    assert out.read_bytes() == (files / "all.eegt").read_bytes()
    manifest = json.loads((tmp_path / "again.eegt.manifest.json").read_text())
    assert manifest["seeds"] == {"seed": 0} and str(files / "spec.json") in manifest["inputs"]


def test_synth_header_trial_count(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps(dict(n_subjects=6, n_classes=4, trials_per_class=40,
                                                     n_samples=16, n_channels=2, band_hz=[4, 20])))
    run(capsys, "synth", "--spec", tmp_path / "s.json", "--out", tmp_path / "s.eegt")
    n = int.from_bytes((tmp_path / "s.eegt").read_bytes()[8:12], "little")
    assert n == 960


def test_synth_errors(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--spec", tmp_path / "missing.json", "--out", tmp_path / "x")
    assert code == 2 and err.startswith("error:") and len(err.strip().splitlines()) == 1
    (tmp_path / "bad.json").write_text('{"n_subjects": 0}')
    code, _, err = run(capsys, "synth", "--spec", tmp_path / "bad.json", "--out", tmp_path / "x")
    assert code == 2 and err.startswith("error:")


def test_usage_errors_exit_2(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and err.startswith("error:")
    code, _, err = run(capsys, "train", "--task", "mi")
    assert code == 2 and err.startswith("error:")


# -- preprocess ------------------------------------------------------------------

def test_preprocess_defaults_full_chain(tmp_path, files, capsys):
    out = tmp_path / "pp.eegt"
    code, stdout, _ = run(capsys, "preprocess", "--in", files / "all.eegt", "--out", out)
    assert code == 0
    assert stdout.strip() == ("chain: resample(160 Hz) -> butter_highpass(order=4, 2 Hz) -> notch(50 Hz, Q=30) "
                              "-> notch(60 Hz, Q=30) -> common_average_reference")
    pp = read_eegt(out)
    assert pp.fs_hz == 160.0 and pp.n_samples == 80
    manifest = json.loads((tmp_path / "pp.eegt.manifest.json").read_text())
    assert manifest["config"]["chain"][0] == "resample(160 Hz)"


def test_preprocess_car_alone_on_referenced_data(tmp_path, rng, capsys):
    x = rng.standard_normal((3, 4, 20))
    x -= x.mean(axis=1, keepdims=True)
    x = x.astype(np.float32).astype(np.float64)
    write_eegt(TrialSet(x, [0, 1, 0], [0, 0, 0]), tmp_path / "z.eegt")
    code, stdout, _ = run(capsys, "preprocess", "--in", tmp_path / "z.eegt", "--out", tmp_path / "o.eegt", "--car")
    assert code == 0 and stdout.strip() == "chain: common_average_reference"
    np.testing.assert_allclose(read_eegt(tmp_path / "o.eegt").data, x, atol=1e-6)


def test_preprocess_unknown_channel(tmp_path, files, capsys):
    code, _, err = run(capsys, "preprocess", "--in", files / "all.eegt", "--out", tmp_path / "o.eegt",
                       "--channels", "Ch01,Oz")
    assert code == 2 and "Oz" in err


# -- train -----------------------------------------------------------------------

def test_sleep_defaults_echo(tmp_path, files, capsys):
    code, out, _ = run(capsys, "train", "--task", "sleep", "--calib", files / "all.eegt", "--out", tmp_path,
                       "--dry-run")
    assert code == 0
    assert "epochs=15 lr=0.001 wd=0.001 dropout=0.25" in out
    assert "folds=loso2(8)" in out


def test_mi_defaults_echo(tmp_path, files, capsys):
    code, out, _ = run(capsys, "train", "--task", "mi", "--calib", files / "all.eegt", "--out", tmp_path,
                       "--dry-run")
    assert code == 0 and "epochs=200 lr=0.0005" in out and "folds=unstratified10(10)" in out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["model"]["alignment"] == "input" and manifest["config"]["model"]["deepset"]


def test_ablation_flags_give_baseline(tmp_path, files, capsys):
    run(capsys, "train", "--task", "mi", "--calib", files / "all.eegt", "--out", tmp_path, "--dry-run",
        "--no-align", "--no-deepset")
    model = json.loads((tmp_path / "manifest.json").read_text())["config"]["model"]
    assert model["alignment"] == "none" and model["deepset"] is False


def test_loso_with_one_subject_exits_2(tmp_path, files, capsys):
    code, _, err = run(capsys, "train", "--task", "sleep", "--calib", files / "cal.eegt", "--out", tmp_path)
    assert code == 2 and "loso2" in err


def test_manifest_written_and_hashes_inputs(tmp_path, files, capsys):
    run(capsys, *train_args(files, tmp_path, "--dry-run"))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    import hashlib
    assert manifest["inputs"][str(files / "cal.eegt")] == hashlib.sha256((files / "cal.eegt").read_bytes()).hexdigest()
    assert manifest["config"]["train"]["epochs"] == 1 and manifest["config"]["model"]["kernel_size"] == 3
    assert manifest["tool_version"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, files):
    out = tmp_path_factory.mktemp("run")
    assert main([str(a) for a in train_args(files, out)]) == 0
    return out


def test_train_outputs(trained):
    assert sorted(p.name for p in trained.glob("*.naln")) == [f"fold_{i:02d}.naln" for i in range(10)]
    results = json.loads((trained / "fold_results.json").read_text())
    assert len(results["folds"]) == 10
    assert len((trained / "ensemble_predictions.csv").read_text().splitlines()) == 17


# -- predict / eval ----------------------------------------------------------------

def test_predict_single_checkpoint_equals_model(tmp_path, files, trained, capsys):
    (tmp_path / "one").mkdir()
    (tmp_path / "one" / "m.naln").write_bytes((trained / "fold_04.naln").read_bytes())
    code, _, _ = run(capsys, "predict", "--models", tmp_path / "one", "--data", files / "test.eegt",
                     "--out", tmp_path / "p.csv")
    assert code == 0
    test = read_eegt(files / "test.eegt")
    ref = predict_subjects(load_checkpoint(trained / "fold_04.naln"), test.data, test.subject_ids, 0)
    _, logits, _ = read_predictions_csv(tmp_path / "p.csv")
    assert np.array_equal(logits, ref)
    assert len((tmp_path / "p.csv").read_text().splitlines()) == len(test) + 1


def test_predict_ensemble_matches_training_csv(tmp_path, files, trained, capsys):
    run(capsys, "predict", "--models", trained, "--data", files / "test.eegt", "--out", tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_bytes() == (trained / "ensemble_predictions.csv").read_bytes()


def test_predict_three_class(tmp_path, files, trained, capsys):
    run(capsys, "predict", "--models", trained, "--data", files / "test.eegt", "--out", tmp_path / "p3.csv",
        "--three-class")
    _, l3, _ = read_predictions_csv(tmp_path / "p3.csv")
    _, l4, _ = read_predictions_csv(trained / "ensemble_predictions.csv")
    assert l3.shape[1] == 3
    np.testing.assert_allclose(l3, combine_four_to_three(l4), atol=1e-15)


def test_predict_dim_mismatch(tmp_path, trained, rng, capsys):
    write_eegt(TrialSet(rng.standard_normal((2, 3, 40)).astype(np.float32), [0, 1], [0, 0]), tmp_path / "w.eegt")
    code, _, err = run(capsys, "predict", "--models", trained, "--data", tmp_path / "w.eegt", "--out", tmp_path / "p")
    assert code == 2 and "(3, 40)" in err and "(3, 32)" in err
    code, _, err = run(capsys, "predict", "--models", tmp_path, "--data", tmp_path / "w.eegt", "--out", tmp_path / "p")
    assert code == 2 and "no checkpoints" in err


def _write_preds(path, preds, n_classes=4):
    logits = np.eye(n_classes)[preds]
    from eegalign.training import predictions_csv
    path.write_text(predictions_csv(logits))


def test_eval_perfect_and_constant(tmp_path, files, capsys):
    data = read_eegt(files / "all.eegt")
    _write_preds(tmp_path / "p.csv", data.labels)
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "p.csv", "--data", files / "all.eegt")
    assert code == 0 and json.loads(out) == {"uar": 1.0, "per_class_recall": [1.0] * 4}
    _write_preds(tmp_path / "c.csv", np.zeros(len(data), int))
    _, out, _ = run(capsys, "eval", "--pred", tmp_path / "c.csv", "--data", files / "all.eegt")
    assert json.loads(out)["uar"] == 0.25


def test_eval_matches_training_uar(files, trained, capsys):
    test = read_eegt(files / "test.eegt")
    _, logits, pred = read_predictions_csv(trained / "ensemble_predictions.csv")
    _, out, _ = run(capsys, "eval", "--pred", trained / "ensemble_predictions.csv", "--data", files / "test.eegt")
    assert json.loads(out)["uar"] == pytest.approx(uar(pred, test.labels, 4), abs=1e-12)


def test_eval_row_mismatch(tmp_path, files, capsys):
    _write_preds(tmp_path / "p.csv", np.zeros(3, int))
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "p.csv", "--data", files / "all.eegt")
    assert code == 2 and err.startswith("error:")
