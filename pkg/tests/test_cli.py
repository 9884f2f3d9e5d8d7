import hashlib
import json

import jsonschema
import numpy as np
import pytest

from medpatchnet.cli import main
from medpatchnet.data import load_manifest

SMALL = ["--image-side", "16", "--marker-side", "4", "--blob-radius", "2,3", "--ridge-length", "4,6", "--texture-side", "3,4"]


def tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate", "--out", str(data), "--n-train", "24", "--n-valid", "12", "--n-test", "12", "--seed", "7", *SMALL]) == 0
    ckpt = root / "model.ckpt"
    args = ["train", "--manifest", str(data / "manifest.csv"), "--out", str(ckpt), "--patches-per-side", "4",
            "--stage-channels", "4,6", "--epochs", "2", "--batch-images", "8", "--peak-lr", "3e-3"]
    assert main(args) == 0
    return root, data, ckpt, args


def test_generate_is_byte_identical(tmp_path, workspace):
    _, data, _, _ = workspace
    out = tmp_path / "again"
    assert main(["generate", "--out", str(out), "--n-train", "24", "--n-valid", "12", "--n-test", "12", "--seed", "7", *SMALL]) == 0
    assert tree_digest(out) == tree_digest(data)


def test_generate_prints_prevalence(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["generate", "--out", str(out), "--n-train", "30", "--n-valid", "0", "--n-test", "0", *SMALL]) == 0
    printed = capsys.readouterr().out
    ds = load_manifest(out / "manifest.csv")
    labels = np.stack([s.labels for s in ds.samples])
    for c, name in enumerate(ds.class_names):
        assert f"{name}: prevalence {labels[:, c].mean():.4f}" in printed


def test_generate_invalid_key_leaves_no_output(tmp_path, capsys):
    cfg = tmp_path / "spec.txt"
    cfg.write_text("image_side = 16\nbogus_key = 3\n")
    out = tmp_path / "d"
    assert main(["generate", "--out", str(out), "--config", str(cfg)]) == 1
    assert not out.exists()
    assert "bogus_key" in capsys.readouterr().err
    assert main(["generate", "--out", str(out), "--image-side", "sixteen"]) == 1
    assert not out.exists()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "spec.txt"
    cfg.write_text("image_side = 32\nn_train = 3\nn_valid = 0\nn_test = 0\n")
    out = tmp_path / "d"
    assert main(["generate", "--out", str(out), "--config", str(cfg), *SMALL]) == 0
    assert load_manifest(out / "manifest.csv").samples[0].image.shape == (16, 16)
    effective = (out / "config.txt").read_text()
    assert "image_side = 16" in effective and "n_train = 3" in effective


def test_refuses_to_overwrite_without_force(workspace, capsys):
    _, data, _, _ = workspace
    assert main(["generate", "--out", str(data), *SMALL]) == 1
    assert "--force" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--manifest", "x"]) == 1


def test_train_outputs(workspace):
    root, _, ckpt, _ = workspace
    lines = [json.loads(x) for x in (root / "model.ckpt.log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in lines if e["split"] == "train"] == [1, 2]
    assert all({"epoch", "split", "loss", "auroc"} <= set(e) for e in lines)
    assert "peak_lr = 0.003" in (root / "model.ckpt.config.txt").read_text()
    assert ckpt.read_bytes()[:8] == b"MPNCKPT1"


def test_train_rerun_same_checkpoint(tmp_path, workspace):
    _, _, ckpt, args = workspace
    other = tmp_path / "again.ckpt"
    assert main([*args[:4], str(other), *args[5:], "--threads", "2"]) == 0
    assert other.read_bytes() == ckpt.read_bytes()


def test_train_full_image_baseline(tmp_path, workspace):
    _, data, _, _ = workspace
    out = tmp_path / "p1.ckpt"
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(out), "--patches-per-side", "1",
                 "--stage-channels", "4,6", "--epochs", "1"]) == 0
    from medpatchnet.backbone import load_checkpoint

    model, block = load_checkpoint(out)
    assert model.config.input_side == 16 and block["patch_grid"]["patches_per_side"] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exit_code(tmp_path, workspace):
    _, data, _, _ = workspace
    out = tmp_path / "nan.ckpt"
    code = main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(out), "--patches-per-side", "4",
                 "--stage-channels", "4,6", "--epochs", "2", "--peak-lr", "1e300", "--weight-decay", "0"])
    assert code == 3


def test_data_errors(tmp_path, workspace):
    _, data, ckpt, _ = workspace
    assert main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:50])
    assert main(["eval", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(bad), "--out", str(tmp_path / "r")]) == 2


@pytest.fixture(scope="module")
def reports(workspace):
    root, data, ckpt, _ = workspace
    out = {}
    for method, n in (("patch_raw", "50"), ("patch_scaled", "50"), ("patch_raw", "0")):
        d = root / f"eval_{method}_{n}"
        assert main(["eval", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(ckpt), "--out", str(d),
                     "--method", method, "--shift", "2", "--bootstrap-n", n]) == 0
        out[(method, n)] = d
    return out


def test_eval_report_files(reports):
    d = reports[("patch_raw", "50")]
    report = json.loads((d / "report.json").read_text())
    jsonschema.validate(report, json.loads((d / "report.schema.json").read_text()))
    rows = [ln.split()[0] for ln in (d / "report.txt").read_text().splitlines()[1:] if ln and not set(ln) <= {"-"}]
    assert rows == ["Class", "blob", "ridge", "texture", "marker", "Mean"]
    assert "method = patch_raw" in (d / "config.txt").read_text()


def test_eval_methods_share_classification(reports):
    a = json.loads((reports[("patch_raw", "50")] / "report.json").read_text())
    b = json.loads((reports[("patch_scaled", "50")] / "report.json").read_text())
    for ca, cb in zip(a["classes"], b["classes"]):
        for m in ("auroc", "sensitivity", "specificity", "accuracy"):
            assert ca[m] == cb[m]


def test_eval_without_bootstrap_has_no_ci(reports):
    report = json.loads((reports[("patch_raw", "0")] / "report.json").read_text())
    for row in report["classes"] + [report["mean"]]:
        for key, value in row.items():
            if isinstance(value, dict):
                assert "ci_lo" not in value and "ci_hi" not in value


def test_eval_rejects_bad_shift(tmp_path, workspace):
    _, data, ckpt, _ = workspace
    assert main(["eval", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(ckpt), "--out", str(tmp_path / "r"), "--shift", "3"]) == 1


def test_explain_outputs(tmp_path, workspace):
    _, data, ckpt, _ = workspace
    out = tmp_path / "x"
    img = data / "images" / "test_00000.pgm"
    assert main(["explain", "--image", str(img), "--checkpoint", str(ckpt), "--class", "marker", "--out", str(out), "--shift", "1"]) == 0
    info = json.loads((out / "explain.json").read_text())
    z = np.array(info["patch_logits"])
    assert z.shape == (4, 4, 4)
    assert np.abs(z.reshape(-1, 4).mean(axis=0) - np.array(info["Z"])).max() <= 1e-12
    assert info["class_names"] == ["blob", "ridge", "texture", "marker"]
    assert (out / "overlay.ppm").read_bytes()[:2] == b"P6"
    assert (out / "map.pgm").read_bytes()[:2] == b"P5" and (out / "map.json").exists()
    again = tmp_path / "y"
    assert main(["explain", "--image", str(img), "--checkpoint", str(ckpt), "--class", "marker", "--out", str(again), "--shift", "1"]) == 0
    assert tree_digest(out) == tree_digest(again)


def test_explain_unknown_class(tmp_path, workspace, capsys):
    _, data, ckpt, _ = workspace
    code = main(["explain", "--image", str(data / "images" / "test_00000.pgm"), "--checkpoint", str(ckpt), "--class", "tumour",
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "valid classes: blob, ridge, texture, marker" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()
