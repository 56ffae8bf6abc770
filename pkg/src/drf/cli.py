"""Simulate, train and evaluate display radiance fields from lensless captures.

``drf simulate|solve-scene|solve-lf|train|render|profile|eval``

Every command reads one JSON configuration (``--config``; defaults
reproduce the reference settings), is deterministic in ``(config, inputs,
seed)`` and exits with 0 on success, 1 on usage or input errors and 2 on
numeric failure. Failures print a single JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from threadpoolctl import threadpool_limits

from . import __version__
from .fftconv import ForwardModel
from .lightfield import Capture, DisplayPanel, render_view
from .metrics import angular_profile
from .nn import CoordinateFrame, DivergenceError, MlpModel, PositionalEncoder, load_checkpoint, make_model
from .optics import (NINE_POSITIONS, AngularDomain, ApertureGeometry, DisplayEmissionModel, PsfStack,
                     capture_domain, coverage_bounds, observed_angles_mask, simulate_capture,
                     synth_psf_stack)
from .solvers import (STREAM_CAPTURE_NOISE, STREAM_INIT, STREAM_PSF, LossConfig, TrainRun,
                      evaluate_model, solve_lightfield, solve_scene, stream_id, train_inr)
from .tensor_io import ContainerError, RngStream, export_csv, export_image, load_tensor, save_tensor

MODEL_KINDS = ("ours", "vanilla")


# -- configuration -------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometryConfig(_Section):
    aperture_width: float = Field(2.5, gt=0, description="aperture width (mm)")
    aperture_height: float = Field(3.0, gt=0, description="aperture height (mm)")
    standoff: float = Field(30.0, gt=0, description="display-to-aperture distance (mm)")
    sensor_gap: float = Field(10.0, gt=0, description="diffuser-to-sensor distance (mm)")
    aperture_centers: list[tuple[float, float]] | None = Field(
        None, description="aperture centers (mm); null selects the fitted five-aperture diagonal")
    panel_width: float = Field(16.0, gt=0, description="sampled display region width (mm)")
    panel_height: float = Field(5.0, gt=0, description="sampled display region height (mm)")
    sensor_pixel: float = Field(0.2, gt=0, description="sensor pixel pitch (mm)")

    def build(self) -> ApertureGeometry:
        kw = self.model_dump(exclude={"aperture_centers"})
        if self.aperture_centers is not None:
            kw["aperture_centers"] = tuple(tuple(c) for c in self.aperture_centers)
        return ApertureGeometry(**kw)


class TilingConfig(_Section):
    n_u: int = Field(9, ge=1, description="angular bins along u per capture")
    n_v: int = Field(9, ge=1, description="angular bins along v per capture")
    win_h: int = Field(54, ge=8, description="sub-aperture tile height (px)")
    win_w: int = Field(70, ge=8, description="sub-aperture tile width (px)")


class EmissionConfig(_Section):
    falloff_exponent: float = Field(4.0, ge=0, description="cosine falloff exponent k")
    anisotropy: tuple[float, float] = Field((1.0, 1.25), description="horizontal/vertical angle scale")
    spatial_spread_sigma: float = Field(1.0, gt=0, description="spatial spread of a lit pixel (px)")
    peak_intensity: float = Field(1.0, ge=0, description="on-axis radiance")

    def build(self) -> DisplayEmissionModel:
        return DisplayEmissionModel(**self.model_dump())


class SimulationConfig(_Section):
    noise_sigma: float = Field(0.01, ge=0, description="additive Gaussian sensor noise")
    channels: list[str] = Field(["R", "G", "B"], min_length=1,
                                description="color channels, simulated and trained independently")


class EncoderConfig(_Section):
    display_levels: int = Field(1, ge=0, description="frequency levels for (x, y)")
    angular_levels: int = Field(5, ge=0, description="frequency levels for (u, v)")
    spatial_levels: int = Field(10, ge=0, description="frequency levels for (s, t)")


class ModelConfig(_Section):
    hidden_width: int = Field(32, ge=1, description="hidden layer width")
    depth: int = Field(3, ge=1, description="number of hidden layers")
    activation: Literal["sine"] = Field("sine", description="activation of the encoded model")
    omega0: float = Field(30.0, gt=0, description="first-layer sine frequency")
    omega_hidden: float = Field(1.0, gt=0, description="hidden-layer sine frequency")


class OptimizerConfig(_Section):
    lr: float = Field(1e-3, gt=0, description="Adam base learning rate (linear decay to 0)")
    epochs: int = Field(800, ge=1, description="training epochs")
    clip_norm: float = Field(1.0, gt=0, description="global gradient-norm clip")
    noise_stds: tuple[float, float, float] = Field(
        (5e-3, 1e-2, 1e-3), description="coordinate noise stds for (x,y), (u,v), (s,t)")


class LossSection(_Section):
    lambda0: float = Field(1.0, gt=0, description="L1 data-term weight")
    lambda1: float = Field(1e-7, ge=0, description="range-penalty weight")


class SolverConfig(_Section):
    iters: int = Field(500, ge=1, description="Adam iterations for solve-scene / solve-lf")
    lr: float = Field(0.01, gt=0, description="learning rate for solve-scene / solve-lf")


class EvaluationConfig(_Section):
    held_out_position: int = Field(4, ge=0, lt=9, description="display position index kept out of training")
    held_out_aperture: int = Field(2, ge=0, description="aperture index kept out of training")
    profile_bins: int = Field(8, ge=2, description="radius bins of angular profiles")
    profile_grid: int = Field(61, ge=2, description="angular samples per axis for profiles")


class RunConfig(_Section):
    geometry: GeometryConfig = GeometryConfig()
    tiling: TilingConfig = TilingConfig()
    emission: EmissionConfig = EmissionConfig()
    simulation: SimulationConfig = SimulationConfig()
    encoder: EncoderConfig = EncoderConfig()
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    loss: LossSection = LossSection()
    solver: SolverConfig = SolverConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seed: int = Field(0, ge=0, description="master random seed")

    @model_validator(mode="after")
    def _check(self):
        n = len(self.geometry.aperture_centers or ApertureGeometry().aperture_centers)
        if self.evaluation.held_out_aperture >= n:
            raise ValueError(f"held_out_aperture must be < {n}")
        return self

    @property
    def tile_shape(self) -> tuple[int, int]:
        return (self.tiling.win_h, self.tiling.win_w)

    def frame(self, geometry: ApertureGeometry) -> CoordinateFrame:
        return CoordinateFrame.build(coverage_bounds(geometry), self.tile_shape)


def config_help() -> str:
    """One line per configuration key with its default."""
    lines = ["configuration keys (JSON; defaults are the reference settings):"]

    def walk(model_cls, prefix):
        for name, f in model_cls.model_fields.items():
            ann = f.annotation
            if isinstance(ann, type) and issubclass(ann, BaseModel):
                walk(ann, f"{prefix}{name}.")
                continue
            default = json.dumps(f.default if not isinstance(f.default, tuple) else list(f.default))
            lines.append(f"  {prefix}{name} = {default}  {f.description or ''}".rstrip())

    walk(RunConfig, "")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.model_validate(data)


# -- errors and output helpers -------------------------------------------------

class UsageError(Exception):
    """Bad arguments or inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise UsageError(f"output {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise UsageError(f"output {path} exists (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"missing file: {path}") from None


def _channels(cfg: RunConfig, requested: str | None) -> list[str]:
    return [requested] if requested else list(cfg.simulation.channels)


# -- dataset -------------------------------------------------------------------

def _capture_stem(channel: str, pi: int, a: int) -> str:
    return f"{channel}/p{pi}_a{a}"


def _psf_stem(pi: int, a: int) -> str:
    return f"psf/p{pi}_a{a}"


def cmd_simulate(cfg: RunConfig, out: Path, force: bool, channel: str | None) -> dict:
    g = cfg.geometry.build()
    em = cfg.emission.build()
    t = cfg.tiling
    channels = _channels(cfg, channel)
    out = _prepare_dir(out, force)
    entries = []

    def files(stem, *parts):
        return sorted(f"{stem}{p}" for p in parts)

    psfs = {}
    for pi, pos in enumerate(NINE_POSITIONS):
        for a in range(g.n_apertures):
            dom = capture_domain(g, a, pos, t.n_u, t.n_v)
            texture = RngStream(cfg.seed, stream_id(STREAM_PSF, index=a))
            ps = synth_psf_stack(g, dom, t.win_h, t.win_w, texture)
            stem = _psf_stem(pi, a)
            (out / stem).parent.mkdir(parents=True, exist_ok=True)
            ps.save(out / stem)
            psfs[pi, a] = ps
            entries.append({"kind": "psf", "stem": stem, "position_index": pi, "display_pos": list(pos),
                            "aperture": a, "channel": None,
                            "files": files(stem, ".json", ".patches.json", ".patches.bin")})
    for ch in channels:
        (out / ch).mkdir(exist_ok=True)
        for pi, pos in enumerate(NINE_POSITIONS):
            for a in range(g.n_apertures):
                k = pi * g.n_apertures + a
                noise = RngStream(cfg.seed, stream_id(STREAM_CAPTURE_NOISE, ch, k))
                ps = psfs[pi, a]
                cap = simulate_capture(g, ps.domain, ps, em, pos, a, cfg.simulation.noise_sigma,
                                       noise, channel=ch, tile_shape=cfg.tile_shape)
                stem = _capture_stem(ch, pi, a)
                cap.save(out / stem)
                entries.append({"kind": "capture", "stem": stem, "position_index": pi,
                                "display_pos": list(pos), "aperture": a, "channel": ch,
                                "psf": _psf_stem(pi, a),
                                "files": files(stem, ".json", ".image.json", ".image.bin")})
    _write_json({"emission": cfg.emission.model_dump(mode="json"),
                 "noise_sigma": cfg.simulation.noise_sigma}, out / "emission.json")
    entries.append({"kind": "emission", "stem": "emission", "position_index": None, "display_pos": None,
                    "aperture": None, "channel": None, "files": ["emission.json"]})
    manifest = {
        "format": "drf-dataset",
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "channels": channels,
        "n_positions": len(NINE_POSITIONS),
        "n_apertures": g.n_apertures,
        "entries": entries,
        "metadata": {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                     "drf_version": __version__},
    }
    _write_json(manifest, out / "manifest.json")
    n_caps = sum(e["kind"] == "capture" for e in entries)
    return {"captures": n_caps, "channels": channels, "out": str(out)}


class Dataset:
    """Read access to a directory written by ``drf simulate``."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "manifest.json").is_file():
            raise UsageError(f"no dataset manifest in {self.root}")
        self.manifest = _read_json(self.root / "manifest.json")
        try:
            self.config = RunConfig.model_validate(self.manifest["config"])
        except (KeyError, ValidationError) as exc:
            raise UsageError(f"invalid dataset manifest in {self.root}: {exc}") from None
        self.channels = list(self.manifest.get("channels", []))

    def check_compatible(self, cfg: RunConfig) -> None:
        for section in ("geometry", "tiling"):
            if getattr(cfg, section) != getattr(self.config, section):
                raise UsageError(f"manifest/config mismatch: {section}")

    def captures(self, channel: str):
        """``[(position_index, aperture, Capture, PsfStack)]`` for one channel."""
        entries = [e for e in self.manifest["entries"] if e["kind"] == "capture" and e["channel"] == channel]
        missing = channel not in self.channels or not entries
        if not missing:
            missing = any(not (self.root / f).is_file() for e in entries for f in e["files"])
        if missing:
            raise UsageError(f"missing channel files: {channel}")
        out = []
        for e in entries:
            out.append((e["position_index"], e["aperture"], Capture.load(self.root / e["stem"]),
                        PsfStack.load(self.root / e["psf"])))
        return out

    def emission(self) -> DisplayEmissionModel:
        rec = _read_json(self.root / "emission.json")
        return EmissionConfig.model_validate(rec["emission"]).build()


def split(cfg: RunConfig, items):
    """Train on positions and apertures other than the held-out ones."""
    hp, ha = cfg.evaluation.held_out_position, cfg.evaluation.held_out_aperture
    train = [it for it in items if it[0] != hp and it[1] != ha]
    test = [it for it in items if it[0] == hp or it[1] == ha]
    return train, test


# -- training and evaluation ---------------------------------------------------

def build_model(cfg: RunConfig, kind: str, frame: CoordinateFrame, channel: str) -> MlpModel:
    rng = RngStream(cfg.seed, stream_id(STREAM_INIT, channel, MODEL_KINDS.index(kind)))
    enc = PositionalEncoder(**cfg.encoder.model_dump())
    return make_model(kind, frame, rng, encoder=enc, hidden=cfg.model.hidden_width, depth=cfg.model.depth,
                      omega0=cfg.model.omega0, omega_hidden=cfg.model.omega_hidden)


def cmd_train(cfg: RunConfig, dataset: Path, out: Path, force: bool, channel: str | None) -> dict:
    ds = Dataset(dataset)
    ds.check_compatible(cfg)
    channels = _channels(cfg, channel)
    data = {ch: ds.captures(ch) for ch in channels}
    g = cfg.geometry.build()
    frame = cfg.frame(g)
    out = _prepare_dir(out, force)
    losses, timings = {}, {}
    for ch in channels:
        train, _ = split(cfg, data[ch])
        (out / ch).mkdir(exist_ok=True)
        losses[ch], timings[ch] = {}, {}
        for kind in MODEL_KINDS:
            run = TrainRun(
                captures=[c for _, _, c, _ in train], psfs=[p for _, _, _, p in train],
                epochs=cfg.optimizer.epochs, seed=cfg.seed, channel=ch, checkpoint=out / ch / kind,
                loss=LossConfig(cfg.loss.lambda0, cfg.loss.lambda1), base_lr=cfg.optimizer.lr,
                clip_norm=cfg.optimizer.clip_norm, noise_stds=cfg.optimizer.noise_stds, geometry=g,
            )
            result = train_inr(run, build_model(cfg, kind, frame, ch))
            losses[ch][kind] = {"first": result.epoch_losses[0], "last": result.epoch_losses[-1]}
            timings[ch][kind] = {"train_seconds": result.seconds}
    _write_json({"config": cfg.model_dump(mode="json"), "channels": channels, "models": list(MODEL_KINDS),
                 "n_train_captures": len(split(cfg, data[channels[0]])[0]), "losses": losses},
                out / "train.json")
    _write_json(timings, out / "timings.json")
    return {"channels": channels, "out": str(out), "losses": losses}


def _run_info(run_dir: Path) -> dict:
    info = _read_json(run_dir / "train.json")
    return info


def cmd_eval(cfg: RunConfig, run_dir: Path, dataset: Path, out: Path, force: bool,
             channel: str | None) -> dict:
    info = _run_info(run_dir)
    run_cfg = RunConfig.model_validate(info["config"])
    ds = Dataset(dataset)
    ds.check_compatible(run_cfg)
    channels = [channel] if channel else info["channels"]
    out = _prepare_file(out, force)
    g = run_cfg.geometry.build()
    train_times = _read_json(run_dir / "timings.json") if (run_dir / "timings.json").is_file() else {}
    report = {"channels": {}, "split": run_cfg.evaluation.model_dump(mode="json")}
    timings, csv_rows = {}, []
    for ch in channels:
        _, test = split(run_cfg, ds.captures(ch))
        ids = [_capture_stem(ch, pi, a) for pi, a, _, _ in test]
        report["channels"][ch], timings[ch] = {}, {}
        for kind in MODEL_KINDS:
            ckpt = run_dir / ch / kind
            if not (ckpt.parent / (ckpt.name + ".json")).is_file():
                raise UsageError(f"missing checkpoint: {ckpt}")
            model = load_checkpoint(ckpt)
            rep = evaluate_model(model, [c for _, _, c, _ in test], [p for _, _, _, p in test],
                                 geometry=g, ids=ids)
            timings[ch][kind] = {"inference_seconds": rep.pop("inference_seconds"),
                                 **train_times.get(ch, {}).get(kind, {})}
            rep["n_params"] = model.n_params
            report["channels"][ch][kind] = rep
            for r in rep["rows"]:
                csv_rows.append((kind, ch, r["id"], float(r["display_pos"][0]), float(r["display_pos"][1]),
                                 r["aperture_index"], r["psnr"], r["ssim"], r["msssim"]))
    report["summary"] = {
        kind: {m: float(np.mean([report["channels"][ch][kind]["mean"][m] for ch in channels]))
               for m in ("psnr", "ssim", "msssim")}
        for kind in MODEL_KINDS
    }
    _write_json(report, out)
    export_csv(csv_rows, out.with_suffix(".csv"),
               header=("model", "channel", "capture", "display_x", "display_y", "aperture",
                       "psnr", "ssim", "msssim"))
    _write_json(timings, out.with_suffix(".timings.json"))
    return {"out": str(out), "summary": report["summary"]}


# -- rendering and profiles ----------------------------------------------------

def _is_checkpoint(path: Path) -> bool:
    meta = path.parent / (path.name + ".json")
    if not meta.is_file():
        return False
    with open(meta) as fh:
        return "widths" in json.load(fh)


def _resolve_models(source: Path, channel: str | None, kind: str = "ours") -> dict:
    """Map channel name to model for a checkpoint stem or a training run directory."""
    if _is_checkpoint(source):
        return {channel or "": load_checkpoint(source)}
    if source.is_dir() and (source / "train.json").is_file():
        info = _run_info(source)
        channels = [channel] if channel else info["channels"]
        models = {}
        for ch in channels:
            stem = source / ch / kind
            if not _is_checkpoint(stem):
                raise UsageError(f"missing checkpoint: {stem}")
            models[ch] = load_checkpoint(stem)
        return models
    raise UsageError(f"not a checkpoint or training run: {source}")


def cmd_render(cfg: RunConfig, source: Path, camera, out: Path, force: bool, channel: str | None,
               size=None, kind: str = "ours") -> dict:
    models = _resolve_models(source, channel, kind)
    g = cfg.geometry.build()
    panel = DisplayPanel(g.panel_width, g.panel_height)
    if size is None:
        h = 64
        size = (h, max(1, int(round(h * g.panel_width / g.panel_height))))
    out = _prepare_file(out, force)
    planes, masks = [], []
    for m in models.values():
        img, mask = render_view(m, camera, panel, size[0], size[1])
        planes.append(img)
        masks.append(mask)
    mask = np.logical_and.reduce(masks)
    if sorted(models) == ["B", "G", "R"]:
        image = np.stack([planes[list(models).index(c)] for c in "RGB"], axis=-1)
    else:
        image = planes[0]
    export_image(np.clip(image, 0.0, 1.0), out, normalize=False)
    mask_path = out.with_name(out.stem + ".mask.png")
    export_image(mask.astype(np.float64), mask_path, normalize=False)
    return {"out": str(out), "mask": str(mask_path), "coverage": float(mask.mean())}


def cmd_profile(cfg: RunConfig, source: Path, out: Path, force: bool, channel: str | None,
                position=(0.5, 0.5), bins: int | None = None) -> dict:
    bins = bins or cfg.evaluation.profile_bins
    n = cfg.evaluation.profile_grid
    if (source / "manifest.json").is_file():
        ds = Dataset(source)
        g = ds.config.geometry.build()
        f = ds.emission()
    else:
        g = cfg.geometry.build()
        models = _resolve_models(source, channel)
        f = next(iter(models.values()))
    u0, u1, v0, v1 = coverage_bounds(g)
    dom = AngularDomain(u0, u1, v0, v1, n, n)
    mask = observed_angles_mask(g, dom, position)
    prof = angular_profile(f, tuple(position), bins, domain=dom, mask=mask)
    out = _prepare_file(out, force)
    export_csv(prof.rows(), out, header=("radius_deg", "mean_intensity", "count"))
    return {"out": str(out), "bins": len(prof.radii)}


# -- direct solvers ------------------------------------------------------------

def cmd_solve_scene(cfg: RunConfig, measurement: Path, psf: Path, out: Path, force: bool,
                    scene_shape=None) -> dict:
    Y = load_tensor(measurement)
    h = load_tensor(psf)
    if Y.ndim != 2 or h.ndim != 2:
        raise UsageError("solve-scene expects 2D measurement and PSF tensors")
    scene_shape = tuple(scene_shape) if scene_shape else Y.shape
    model = ForwardModel(h, Y.shape[0], Y.shape[1], scene_shape=scene_shape)
    X = solve_scene(model, Y, iters=cfg.solver.iters, lr=cfg.solver.lr,
                    cfg=LossConfig(cfg.loss.lambda0, cfg.loss.lambda1))
    out = _prepare_file(out.with_suffix(".json") if out.suffix == "" else out, force)
    save_tensor(X, out)
    return {"out": str(out), "shape": list(X.shape)}


def cmd_solve_lf(cfg: RunConfig, capture: Path, psf: Path, out: Path, force: bool) -> dict:
    cap = Capture.load(capture)
    psfs = PsfStack.load(psf)
    lf = solve_lightfield(psfs, cap, iters=cfg.solver.iters, lr=cfg.solver.lr,
                          cfg=LossConfig(cfg.loss.lambda0, cfg.loss.lambda1))
    _prepare_file(out.parent / (out.name + ".json"), force)
    lf.save(out)
    return {"out": str(out), "views": list(lf.views.shape)}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = config_help() + "\n\nenvironment: DRF_THREADS caps BLAS/FFT threads (default 1)."
    fmt = argparse.RawDescriptionHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (default: built-in defaults)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, required=True, help="output path")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--channel", help="restrict to one color channel")

    p = _Parser(prog="drf", description=__doc__.split("\n\n")[0], epilog=epilog, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"drf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_,
                              epilog=epilog, formatter_class=fmt)

    add("simulate", "simulate the 9-position x 5-aperture capture dataset into --out (a directory)")

    s = add("solve-scene", "recover a scene from a measurement tensor and a PSF tensor")
    s.add_argument("measurement", type=Path, help="measurement tensor container")
    s.add_argument("psf", type=Path, help="PSF tensor container")
    s.add_argument("--scene-shape", type=int, nargs=2, metavar=("H", "W"), help="scene size")

    s = add("solve-lf", "recover a light field from one capture and its PSF stack")
    s.add_argument("capture", type=Path, help="capture stem, e.g. DATA/G/p0_a0")
    s.add_argument("psf", type=Path, help="PSF stack stem, e.g. DATA/psf/p0_a0")

    s = add("train", "train the encoded model and the ReLU baseline per channel into --out")
    s.add_argument("dataset", type=Path, help="dataset directory from 'drf simulate'")

    s = add("render", "render the panel seen from a camera position to a PNG plus coverage mask")
    s.add_argument("checkpoint", type=Path, help="checkpoint stem or training run directory")
    s.add_argument("--camera", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"),
                   help="camera position (mm) relative to the panel center")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="output size in pixels")
    s.add_argument("--model", choices=MODEL_KINDS, default="ours", help="variant to load from a run")

    s = add("profile", "angular intensity profile of a model or a dataset's ground truth to CSV")
    s.add_argument("source", type=Path, help="checkpoint stem, training run or dataset directory")
    s.add_argument("--position", type=float, nargs=2, default=(0.5, 0.5), metavar=("X", "Y"),
                   help="display position in [0, 1]^2")
    s.add_argument("--bins", type=int, help="radius bins (default: evaluation.profile_bins)")

    s = add("eval", "held-out PSNR/SSIM/MS-SSIM report for both model variants (JSON + CSV)")
    s.add_argument("run", type=Path, help="training run directory from 'drf train'")
    s.add_argument("dataset", type=Path, help="dataset directory from 'drf simulate'")
    return p


def _dispatch(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    if args.channel is not None and not args.channel:
        raise UsageError("--channel must not be empty")
    c = args.command
    if c == "simulate":
        return cmd_simulate(cfg, args.out, args.force, args.channel)
    if c == "solve-scene":
        return cmd_solve_scene(cfg, args.measurement, args.psf, args.out, args.force, args.scene_shape)
    if c == "solve-lf":
        return cmd_solve_lf(cfg, args.capture, args.psf, args.out, args.force)
    if c == "train":
        return cmd_train(cfg, args.dataset, args.out, args.force, args.channel)
    if c == "render":
        return cmd_render(cfg, args.checkpoint, args.camera, args.out, args.force, args.channel,
                          args.size, args.model)
    if c == "profile":
        return cmd_profile(cfg, args.source, args.out, args.force, args.channel, args.position, args.bins)
    if c == "eval":
        return cmd_eval(cfg, args.run, args.dataset, args.out, args.force, args.channel)
    raise UsageError(f"unknown command {c}")


def _fail(code: int, kind: str, exc) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"status": "error", "code": code, "kind": kind, "reason": reason}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    threads = os.environ.get("DRF_THREADS", "1")
    try:
        n_threads = max(1, int(threads))
    except ValueError:
        return _fail(1, "usage", f"DRF_THREADS must be an integer, got {threads!r}")
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=n_threads):
            result = _dispatch(args)
    except (DivergenceError, FloatingPointError) as exc:
        return _fail(2, "numeric", exc)
    except ValidationError as exc:
        err = exc.errors()[0]
        return _fail(1, "config", f"{'.'.join(map(str, err['loc']))}: {err['msg']}")
    except (UsageError, ContainerError, ValueError, IndexError, KeyError, OSError) as exc:
        return _fail(1, "input", exc)
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        return _fail(1, "internal", f"{type(exc).__name__}: {exc}")
    result["seconds"] = round(time.perf_counter() - t0, 3)
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
