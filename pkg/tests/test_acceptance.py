"""End-to-end acceptance checks, one test per criterion.

Each test records its measured values; ``conftest.py`` prints one
``criterion N: PASS/FAIL`` line per criterion at the end of the run.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from drf.autodiff import Var
from drf.cli import main
from drf.fftconv import ForwardModel, conv2d_linear, forward_measure, forward_measure_lf
from drf.lightfield import assemble_subapertures
from drf.metrics import monotone_within_one_bin, psnr
from drf.nn import CoordinateFrame, PositionalEncoder, make_model, positional_encode
from drf.optics import (NINE_POSITIONS, AngularDomain, ApertureGeometry, DisplayEmissionModel,
                        PsfStack, capture_domain, coverage_bounds, incident_angle_range,
                        simulate_capture, synth_psf_stack, total_coverage)
from drf.solvers import inr_objective, range_penalty, solve_lightfield, solve_scene, total_loss
from drf.tensor_io import RngStream
from oracles import direct_conv2d, finite_difference

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PROFILE_POSITIONS = (0, 2, 4, 6, 8)


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"drf {argv[0]} exited {code}"


@pytest.mark.criterion(1)
def test_convolution_oracle(measured):
    rng = np.random.default_rng(20240501)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(200):
        h, w = rng.integers(1, 33, 2)
        ph, pw = rng.integers(1, 17, 2)
        x, k = rng.random((h, w)), rng.random((ph, pw))
        worst = max(worst, float(np.abs(conv2d_linear(x, k) - direct_conv2d(x, k)).max()))
    seconds = time.perf_counter() - t0
    measured.update(max_abs_err=f"{worst:.2e}", seconds=f"{seconds:.2f}")
    assert worst <= 1e-5
    assert seconds < 10


@pytest.mark.criterion(2)
def test_gradient_oracle(measured):
    g = ApertureGeometry(sensor_pixel=2.0)
    pos, a = NINE_POSITIONS[1], 1
    dom = capture_domain(g, a, pos, 3, 3)
    psfs = synth_psf_stack(g, dom, 8, 8, RngStream(0, 1))
    cap = simulate_capture(g, dom, psfs, DisplayEmissionModel(), pos, a, 0.01, RngStream(0, 2),
                           tile_shape=(8, 8))
    frame = CoordinateFrame.build(coverage_bounds(g), (8, 8))
    model = make_model("ours", frame, RngStream(0, 3), dtype="float64")
    t0 = time.perf_counter()
    theta = Var(model.theta.copy())
    inr_objective(model, theta, cap, psfs, geometry=g).backward()
    idx = np.random.default_rng(7).choice(model.n_params, 100, replace=False)

    def f(sub):
        full = model.theta.copy()
        full[idx] = sub
        return float(inr_objective(model, Var(full), cap, psfs, geometry=g).value)

    fd = finite_difference(f, model.theta[idx], h=1e-6)
    ad = theta.grad[idx]
    rel = np.abs(ad - fd) / np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
    seconds = time.perf_counter() - t0
    measured.update(max_rel_err=f"{rel.max():.2e}", seconds=f"{seconds:.2f}")
    assert rel.max() <= 1e-3
    assert seconds < 30


@pytest.mark.criterion(3)
def test_loss_exactness(measured):
    assert range_penalty([1.5]) == 0.5
    assert range_penalty([-0.2]) == 0.2
    got = total_loss(np.array([0.0]), np.array([1.5]))
    measured.update(total_loss=repr(got))
    assert got == 1.0 * 1.5 + 1e-7 * 0.5
    assert total_loss(np.zeros((3, 4)), np.ones((3, 4))) == 12.0


@pytest.mark.criterion(4)
def test_geometry(measured):
    g = ApertureGeometry()
    h, v = total_coverage(g)
    measured.update(coverage=f"{h:.3f}x{v:.3f} deg")
    assert abs(h - 46.6) <= 0.5 and abs(v - 37.6) <= 0.5
    worst = 0.0
    for a, (cx, cy) in enumerate(g.aperture_centers):
        for pos in NINE_POSITIONS:
            px, py = g.pixel_offset(pos)
            got = incident_angle_range(g, a, (px, py))
            hw, hh = g.aperture_width / 2, g.aperture_height / 2
            want = [math.degrees(math.atan((c - px) / g.standoff)) for c in (cx - hw, cx + hw)] + \
                   [math.degrees(math.atan((c - py) / g.standoff)) for c in (cy - hh, cy + hh)]
            worst = max(worst, max(abs(x - y) for x, y in zip(got, want)))
    measured.update(max_angle_err=f"{worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(5)
def test_encoder(measured):
    enc = PositionalEncoder()
    assert (enc.display_levels, enc.angular_levels, enc.spatial_levels) == (1, 5, 10)
    g0 = positional_encode(0, 0, 0, 0, 0, 0)
    measured.update(width=g0.shape[0])
    assert g0.shape == (64,)
    assert np.array_equal(g0.reshape(-1, 2), np.tile([0.0, 1.0], (32, 1)))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = CONFIGS / "desk.json"
    t0 = time.perf_counter()
    cli("simulate", "--config", cfg, "--out", root / "data")
    cli("train", root / "data", "--config", cfg, "--out", root / "run")
    cli("eval", root / "run", root / "data", "--out", root / "report.json")
    return root, time.perf_counter() - t0


@pytest.mark.criterion(6)
def test_end_to_end_recovery(desk_run, measured):
    root, seconds = desk_run
    cfg = json.loads((CONFIGS / "desk.json").read_text())
    assert cfg["optimizer"]["epochs"] <= 100 and cfg["emission"]["falloff_exponent"] == 4
    assert cfg["simulation"]["noise_sigma"] == 0.01
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert sum(e["kind"] == "capture" for e in manifest["entries"]) == 45 * len(manifest["channels"])
    summary = json.loads((root / "report.json").read_text())["summary"]
    ours, vanilla = summary["ours"]["psnr"], summary["vanilla"]["psnr"]
    measured.update(ours=f"{ours:.2f} dB", vanilla=f"{vanilla:.2f} dB", seconds=f"{seconds:.0f}")
    assert ours - vanilla >= 3.0
    assert seconds <= 15 * 60


@pytest.mark.criterion(7)
def test_angular_fidelity(desk_run, measured):
    root, _ = desk_run
    rhos = []
    for k in PROFILE_POSITIONS:
        x, y = NINE_POSITIONS[k]
        common = ("--config", CONFIGS / "desk.json", "--position", x, y)
        cli("profile", root / "run", *common, "--out", root / f"model_{k}.csv")
        cli("profile", root / "data", *common, "--out", root / f"gt_{k}.csv")
        model = np.genfromtxt(root / f"model_{k}.csv", delimiter=",", skip_header=1)
        gt = np.genfromtxt(root / f"gt_{k}.csv", delimiter=",", skip_header=1)
        keep = (model[:, 2] > 0) & (gt[:, 2] > 0)
        rho = spearmanr(model[keep, 1], gt[keep, 1]).statistic
        rhos.append(rho)
        assert rho >= 0.9, f"position {k}: spearman {rho:.3f}"
        assert monotone_within_one_bin(model[keep, 1]), f"position {k}: not monotone"
    measured.update(min_spearman=f"{min(rhos):.3f}", positions=len(rhos))


@pytest.mark.criterion(8)
def test_determinism(tmp_path, measured):
    cfg = CONFIGS / "smoke.json"
    for run in ("a", "b"):
        root = tmp_path / run
        cli("simulate", "--config", cfg, "--out", root / "data")
        cli("train", root / "data", "--config", cfg, "--out", root / "run")
        cli("eval", root / "run", root / "data", "--out", root / "report.json")
        cli("profile", root / "run", "--config", cfg, "--out", root / "profile.csv")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    compared = 0
    for rel in files:
        if rel.name.endswith("timings.json"):
            continue  # wall-clock sidecars
        a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        if rel.name == "manifest.json":
            a, b = (json.loads(x) for x in (a, b))
            a.pop("metadata"), b.pop("metadata")
        assert a == b, f"{rel} differs"
        compared += 1
    measured.update(files=compared)
    assert any(str(f).endswith(".theta.bin") for f in files)
    assert any(str(f).endswith(".csv") for f in files)


def _well_conditioned_psf(rng, shape):
    """A random non-negative kernel with 70% of its mass on the center tap."""
    k = rng.random(shape)
    k = 0.3 * k / k.sum(axis=(-2, -1), keepdims=True)
    k[..., (shape[-2] - 1) // 2, (shape[-1] - 1) // 2] += 0.7
    return k.astype(np.float32)


@pytest.mark.criterion(9)
def test_inverse_solvers(measured):
    rng = np.random.default_rng(9)
    scene = rng.random((32, 32)).astype(np.float32)
    model = ForwardModel(_well_conditioned_psf(rng, (7, 7)), 32, 32)
    scene_psnr = psnr(scene, solve_scene(model, forward_measure(model, scene), iters=500))

    dom = AngularDomain(-3.0, 3.0, -3.0, 3.0, 3, 3)
    views = rng.random((3, 3, 16, 16)).astype(np.float32)
    psfs = PsfStack(_well_conditioned_psf(rng, (3, 3, 7, 7)), dom)
    capture = assemble_subapertures(forward_measure_lf(psfs, views))
    lf_psnr = psnr(views, solve_lightfield(psfs, capture, iters=500).views)
    measured.update(scene=f"{scene_psnr:.1f} dB", lightfield=f"{lf_psnr:.1f} dB")
    assert scene_psnr >= 30.0
    assert lf_psnr >= 30.0
