import json
import math
import time
from pathlib import Path

import cv2
import numpy as np
import pytest

from drf.cli import RunConfig, load_config, main
from drf.tensor_io import load_tensor, save_tensor

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = str(CONFIGS / "smoke.json")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    line = (out if code == 0 else err).strip().splitlines()[-1]
    return code, json.loads(line)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    assert main(["simulate", "--config", SMOKE, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "run"
    t0 = time.perf_counter()
    assert main(["train", str(dataset), "--config", SMOKE, "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def test_simulate_writes_manifested_dataset(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    caps = [e for e in manifest["entries"] if e["kind"] == "capture"]
    assert len(caps) == 45 and manifest["channels"] == ["G"]
    listed = {f for e in manifest["entries"] for f in e["files"]}
    on_disk = {str(p.relative_to(dataset)) for p in dataset.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk
    assert load_tensor(dataset / "G" / "p0_a0.image").shape == (72, 72)


def test_seed_changes_noise_not_shapes(dataset, tmp_path, capsys):
    code, _ = run(capsys, "simulate", "--config", SMOKE, "--seed", 1, "--out", tmp_path / "d1")
    assert code == 0
    a = load_tensor(dataset / "G" / "p3_a1.image")
    b = load_tensor(tmp_path / "d1" / "G" / "p3_a1.image")
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_refuses_to_overwrite(tmp_path, capsys):
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "x").write_text("keep")
    code, err = run(capsys, "simulate", "--config", SMOKE, "--out", tmp_path / "busy")
    assert code == 1 and err["status"] == "error"
    assert (tmp_path / "busy" / "x").read_text() == "keep"


def test_smoke_training(trained):
    out, seconds = trained
    assert seconds < 60
    info = json.loads((out / "train.json").read_text())
    assert info["n_train_captures"] == 32
    for kind in ("ours", "vanilla"):
        assert (out / "G" / f"{kind}.theta.bin").is_file()
        rows = (out / "G" / f"{kind}.loss.csv").read_bytes().split(b"\r\n")
        assert rows[0] == b"epoch,loss" and len([r for r in rows if r]) == 11
        assert info["losses"]["G"][kind]["last"] < info["losses"]["G"][kind]["first"]


def test_training_is_reproducible(dataset, trained, tmp_path):
    out, _ = trained
    assert main(["train", str(dataset), "--config", SMOKE, "--out", str(tmp_path / "again")]) == 0
    for rel in ("train.json", "G/ours.theta.bin", "G/vanilla.theta.bin", "G/ours.loss.csv"):
        assert (out / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_eval_report(dataset, trained, tmp_path, capsys):
    out, _ = trained
    code, status = run(capsys, "eval", out, dataset, "--out", tmp_path / "report.json")
    assert code == 0 and set(status["summary"]) == {"ours", "vanilla"}
    report = json.loads((tmp_path / "report.json").read_text())
    for kind in ("ours", "vanilla"):
        rep = report["channels"]["G"][kind]
        assert rep["count"] == 13 and set(rep["mean"]) == {"psnr", "ssim", "msssim"}
        assert all(math.isfinite(r["psnr"]) for r in rep["rows"])
    assert "inference_seconds" not in json.dumps(report)
    assert (tmp_path / "report.timings.json").is_file()
    assert (tmp_path / "report.csv").read_bytes().startswith(b"model,channel,capture,")


def test_missing_channel_is_named(dataset, tmp_path, capsys):
    code, err = run(capsys, "train", dataset, "--config", SMOKE, "--channel", "B", "--out", tmp_path / "r")
    assert code == 1 and "B" in err["reason"]


def test_config_mismatch_is_rejected(dataset, tmp_path, capsys):
    cfg = json.loads(Path(SMOKE).read_text())
    cfg["tiling"]["win_h"] = 10
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, err = run(capsys, "train", dataset, "--config", tmp_path / "c.json", "--out", tmp_path / "r")
    assert code == 1 and "mismatch" in err["reason"] and "tiling" in err["reason"]


def test_render_and_profile_from_run(trained, tmp_path, capsys):
    out, _ = trained
    code, status = run(capsys, "render", out, "--config", SMOKE, "--camera", 0, 0, 30,
                       "--size", 10, 32, "--out", tmp_path / "view.png")
    assert code == 0 and 0 < status["coverage"] <= 1
    img = cv2.imread(str(tmp_path / "view.png"), cv2.IMREAD_UNCHANGED)
    assert img.shape == (10, 32) and img.dtype == np.uint16
    code, _ = run(capsys, "profile", out, "--config", SMOKE, "--out", tmp_path / "p.csv")
    assert code == 0
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "radius_deg,mean_intensity,count"


@pytest.mark.parametrize("k", [0.0, 4.0])
def test_profile_of_ground_truth(k, tmp_path, capsys):
    cfg = json.loads(Path(SMOKE).read_text())
    cfg["emission"].update(falloff_exponent=k, anisotropy=[1.0, 1.0])
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    code, _ = run(capsys, "profile", tmp_path / "d", "--bins", 6, "--out", tmp_path / "gt.csv")
    assert code == 0
    rows = [line.split(",") for line in (tmp_path / "gt.csv").read_text().splitlines()[1:]]
    radii = np.array([float(r) for r, _, c in rows if int(c)])
    means = np.array([float(m) for _, m, c in rows if int(c)])
    if k == 0:
        np.testing.assert_allclose(means, 1.0)
    else:
        # bin means of cos^4 stay within the bin-width spread of cos^4 at the bin center
        ref = np.cos(np.radians(radii)) ** 4
        np.testing.assert_allclose(means / means[0], ref / ref[0], atol=0.05)
        assert np.all(np.diff(means) < 0)


@pytest.mark.parametrize("name", ["full", "desk", "smoke"])
def test_shipped_configs_validate(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    if name == "full":
        assert cfg == RunConfig()


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    cfg = json.loads(Path(SMOKE).read_text())
    for section, body in cfg.items():
        keys = body if isinstance(body, dict) else {section: None}
        for key in keys:
            name = f"{section}.{key}" if isinstance(body, dict) else key
            assert name in text, name


def test_unknown_config_key_exits_1(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"optimizer": {"learning_rate": 1.0}}))
    code, err = run(capsys, "simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 1 and err["kind"] == "config" and "learning_rate" in err["reason"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_2(dataset, tmp_path, capsys):
    cfg = json.loads(Path(SMOKE).read_text())
    cfg["optimizer"]["lr"] = 1e300
    cfg["optimizer"]["clip_norm"] = 1e300
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, err = run(capsys, "train", dataset, "--config", tmp_path / "c.json", "--out", tmp_path / "r")
    assert code == 2 and err["kind"] == "numeric" and "epoch" in err["reason"]


def test_bad_thread_count_and_usage(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("DRF_THREADS", "many")
    code, err = run(capsys, "simulate", "--out", tmp_path / "o")
    assert code == 1 and "DRF_THREADS" in err["reason"]
    monkeypatch.delenv("DRF_THREADS")
    code, err = run(capsys, "simulate")
    assert code == 1 and err["kind"] == "usage"


def test_solve_scene_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    scene = rng.random((10, 10)).astype(np.float32)
    k = np.zeros((3, 3), np.float32)
    k[1, 1] = 1.0
    save_tensor(scene, tmp_path / "y")
    save_tensor(k, tmp_path / "h")
    code, status = run(capsys, "solve-scene", tmp_path / "y", tmp_path / "h", "--out", tmp_path / "x")
    assert code == 0 and status["shape"] == [10, 10]
    assert np.abs(load_tensor(tmp_path / "x") - scene).max() <= 1e-3


def test_solve_lf_command(dataset, tmp_path, capsys):
    code, status = run(capsys, "solve-lf", dataset / "G" / "p0_a0", dataset / "psf" / "p0_a0",
                       "--config", SMOKE, "--out", tmp_path / "lf")
    assert code == 0 and status["views"] == [9, 9, 8, 8]
