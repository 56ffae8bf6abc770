"""Losses, direct scene/light-field recovery and INR training.

The data term is the unnormalized L1 norm ``sum |I_gt - I_pred|``; the
range penalty charges predicted values outside ``[0, 1]``. Every solver
minimizes ``lambda0 * L1 + lambda1 * penalty`` with Adam.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var, custom
from .fftconv import ForwardModel, forward_measure, forward_measure_adjoint
from .fftconv import forward_measure_lf, forward_measure_lf_adjoint
from .lightfield import Capture, LightField, assemble_subapertures, sample_coordinates
from .metrics import max_msssim_scales, msssim, psnr, ssim
from .nn import (DEFAULT_NOISE_STDS, AdamState, DivergenceError, MlpModel, adam_step,
                 inject_coordinate_noise, save_checkpoint)
from .optics import ApertureGeometry, PsfStack, aperture_window_mask
from .tensor_io import RngStream, export_csv

log = logging.getLogger(__name__)

# Stream-id layout: bits 0-31 channel key, bits 32-39 namespace, bits 40+ index.
STREAM_INIT = 1 << 32
STREAM_SHUFFLE = 2 << 32
STREAM_COORD_NOISE = 3 << 32
STREAM_PSF = 4 << 32
STREAM_CAPTURE_NOISE = 5 << 32


def channel_key(channel: str) -> int:
    return zlib.crc32(channel.encode())


def stream_id(namespace: int, channel: str = "", index: int = 0) -> int:
    """Compose a stream id from a namespace, a channel name and an index."""
    if not 0 <= index < 1 << 24:
        raise ValueError(f"stream index out of range: {index}")
    return (index << 40) | namespace | (channel_key(channel) if channel else 0)


@dataclass(frozen=True)
class LossConfig:
    lambda0: float = 1.0
    lambda1: float = 1e-7

    def __post_init__(self):
        if not self.lambda0 > 0 or self.lambda1 < 0:
            raise ValueError("need lambda0 > 0 and lambda1 >= 0")


def range_penalty(pred) -> float:
    p = np.asarray(pred, dtype=np.float64)
    return float(np.sum(np.maximum(p - 1.0, 0.0)) + np.sum(np.maximum(-p, 0.0)))


def total_loss(gt, pred, cfg: LossConfig = LossConfig()) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    return cfg.lambda0 * float(np.sum(np.abs(gt - pred))) + cfg.lambda1 * range_penalty(pred)


def total_loss_var(gt, pred: Var, cfg: LossConfig = LossConfig()) -> Var:
    """Differentiable version of :func:`total_loss`."""
    if np.shape(gt) != pred.shape:
        raise ValueError(f"shape mismatch: {np.shape(gt)} vs {pred.shape}")
    gt = np.asarray(gt, dtype=pred.value.dtype)
    data = (pred - gt).abs().sum() * cfg.lambda0
    if cfg.lambda1 == 0:
        return data
    penalty = (pred - 1.0).relu().sum() + (-pred).relu().sum()
    return data + penalty * cfg.lambda1


def measure_lf_var(views: Var, psfs: PsfStack) -> Var:
    return custom(forward_measure_lf(psfs, views.value), views,
                  lambda g: forward_measure_lf_adjoint(psfs, g))


def measure_var(model: ForwardModel, scene: Var) -> Var:
    shape = scene.shape
    return custom(forward_measure(model, scene.value), scene,
                  lambda g: forward_measure_adjoint(model, g, shape))


def _check_loss(value, where):
    if not math.isfinite(value):
        raise DivergenceError(f"diverged: non-finite loss ({where})")


def _adam_descent(x0, loss_and_grad, iters, lr):
    """Adam from ``x0`` with linear lr decay and no clipping.

    ``loss_and_grad`` returns a loss array whose shape is a prefix of
    ``x``'s; each entry is an independent sub-problem that keeps its own
    lowest-loss iterate. A scalar loss tracks the whole of ``x``.
    """
    state = AdamState(base_lr=lr, total_epochs=iters, clip_norm=math.inf)
    x = x0.copy()
    best_x = x.copy()
    best = None
    for it in range(iters + 1):
        loss, grad = loss_and_grad(x)
        loss = np.asarray(loss, dtype=np.float64)
        _check_loss(float(np.sum(loss)), f"iteration {it}")
        if best is None:
            best = loss
        else:
            improved = loss < best
            best = np.where(improved, loss, best)
            best_x[improved] = x[improved]
        if it < iters:
            x = adam_step(state, x, grad, it)
    return best_x


def solve_scene(model: ForwardModel, Y_gt, iters: int = 500, lr: float = 0.01,
                cfg: LossConfig = LossConfig(), scene_shape=None) -> np.ndarray:
    """Recover the scene behind one lensless measurement, starting from zero."""
    Y_gt = np.asarray(Y_gt, dtype=np.float32)
    if Y_gt.shape != (model.out_height, model.out_width):
        raise ValueError(f"measurement {Y_gt.shape} != model output "
                         f"{(model.out_height, model.out_width)}")
    shape = tuple(scene_shape or model.scene_shape or Y_gt.shape)

    def loss_and_grad(x):
        xv = Var(x)
        loss = total_loss_var(Y_gt, measure_var(model, xv), cfg)
        loss.backward()
        return float(loss.value), xv.grad

    return _adam_descent(np.zeros(shape, np.float32), loss_and_grad, iters, lr)


def solve_lightfield(psfs: PsfStack, capture, iters: int = 500, lr: float = 0.01,
                     cfg: LossConfig = LossConfig()) -> LightField:
    """Recover the light field of one capture, one angular window at a time.

    The windows are independent sub-problems; they are optimized together
    (Adam is elementwise and no clipping couples them) and each keeps its
    own best iterate.
    """
    cap = capture if isinstance(capture, Capture) else None
    dom = psfs.domain
    img = cap.image if cap is not None else np.asarray(capture, dtype=np.float32)
    n_u, n_v = dom.n_u, dom.n_v
    if img.shape[0] % n_u or img.shape[1] % n_v:
        raise ValueError(f"capture {img.shape} does not tile into {n_u}x{n_v} windows")
    gt = np.asarray(img, np.float32).reshape(n_u, img.shape[0] // n_u, n_v, img.shape[1] // n_v)
    gt = gt.transpose(0, 2, 1, 3)

    def loss_and_grad(x):
        xv = Var(x)
        pred = measure_lf_var(xv, psfs)
        loss = total_loss_var(gt, pred, cfg)
        loss.backward()
        r = pred.value.astype(np.float64)
        per = cfg.lambda0 * np.abs(gt - r).sum(axis=(2, 3)) + cfg.lambda1 * (
            np.maximum(r - 1, 0).sum(axis=(2, 3)) + np.maximum(-r, 0).sum(axis=(2, 3)))
        return per, xv.grad

    views = _adam_descent(np.zeros(gt.shape, np.float32), loss_and_grad, iters, lr)
    pos = cap.display_pos if cap is not None else (0.5, 0.5)
    return LightField(views, dom, pos)


# -- INR training ----------------------------------------------------------------

@dataclass
class TrainRun:
    captures: list
    psfs: list
    epochs: int = 800
    seed: int = 0
    channel: str = "G"
    checkpoint: str | Path | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    base_lr: float = 1e-3
    clip_norm: float = 1.0
    lr_decay_epochs: int | None = None
    noise_stds: tuple = DEFAULT_NOISE_STDS
    geometry: ApertureGeometry | None = None

    def __post_init__(self):
        if not self.captures:
            raise ValueError("a training run needs at least one capture")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.psfs) != len(self.captures):
            raise ValueError("need one PSF stack per capture")
        chans = {c.channel for c in self.captures}
        if chans != {self.channel}:
            raise ValueError(f"captures carry channels {sorted(chans)}, run is for {self.channel!r}")


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list
    seconds: float


class _Sample:
    """Precomputed per-capture tensors for training and evaluation."""

    def __init__(self, model: MlpModel, capture: Capture, psfs: PsfStack,
                 geometry: ApertureGeometry | None):
        dom = capture.domain
        if psfs.patches.shape[:2] != (dom.n_u, dom.n_v):
            raise ValueError("PSF stack and capture use different angular grids")
        self.tiles = capture.tiles()
        self.tile_shape = self.tiles.shape[-2:]
        self.psfs = psfs
        self.coords = model.frame.normalize(sample_coordinates(capture.display_pos, dom, self.tile_shape))
        mask = None
        if geometry is not None:
            m = aperture_window_mask(geometry, dom, capture.aperture_index, capture.display_pos)
            if not m.all():
                mask = m[:, :, None, None].astype(model.dtype)
        self.mask = mask

    def predict(self, model: MlpModel, theta: Var, coords) -> Var:
        n_u, n_v = self.tiles.shape[:2]
        views = model.network(theta, model.features(coords)).reshape(n_u, n_v, *self.tile_shape)
        if self.mask is not None:
            views = views * self.mask
        return measure_lf_var(views, self.psfs)


def inr_objective(model: MlpModel, theta: Var, capture: Capture, psfs: PsfStack,
                  cfg: LossConfig = LossConfig(), geometry=None, noise=None) -> Var:
    """Full training objective for one capture as a differentiable graph."""
    s = _Sample(model, capture, psfs, geometry)
    coords = inject_coordinate_noise(s.coords, noise) if noise is not None else s.coords
    return total_loss_var(s.tiles.astype(model.dtype), s.predict(model, theta, coords), cfg)


def train_inr(run: TrainRun, model: MlpModel) -> TrainResult:
    """Fit ``model`` to a channel's captures, one capture per Adam step.

    Each epoch visits the captures in a seeded shuffled order. The loss
    recorded for an epoch is the sum of per-capture losses evaluated just
    before each capture's update.
    """
    t0 = time.perf_counter()
    key = channel_key(run.channel)
    shuffle = RngStream(run.seed, STREAM_SHUFFLE | key).generator()
    noise = RngStream(run.seed, STREAM_COORD_NOISE | key).generator()
    samples = [_Sample(model, c, p, run.geometry) for c, p in zip(run.captures, run.psfs)]
    gts = [s.tiles.astype(model.dtype) for s in samples]
    state = AdamState(base_lr=run.base_lr, clip_norm=run.clip_norm,
                      total_epochs=run.lr_decay_epochs or run.epochs)
    epoch_losses = []
    for epoch in range(run.epochs):
        total = 0.0
        for ci in shuffle.permutation(len(samples)):
            s = samples[ci]
            coords = inject_coordinate_noise(s.coords, noise, run.noise_stds)
            theta = Var(model.theta)
            loss = total_loss_var(gts[ci], s.predict(model, theta, coords), run.loss)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"diverged: non-finite loss at epoch {epoch + 1}, capture {ci}")
            loss.backward()
            try:
                model.theta = adam_step(state, model.theta, theta.grad, epoch)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch + 1}, capture {ci}") from None
            total += value
        epoch_losses.append(total)
        log.debug("epoch %d loss %.6f", epoch + 1, total)
    seconds = time.perf_counter() - t0
    if run.checkpoint is not None:
        save_checkpoint(model, run.checkpoint, extra={"channel": run.channel, "epochs": run.epochs,
                                                      "seed": run.seed})
        export_csv([(str(i + 1), l) for i, l in enumerate(epoch_losses)],
                   Path(str(run.checkpoint) + ".loss.csv"), header=("epoch", "loss"))
    return TrainResult(model, epoch_losses, seconds)


def predict_capture(model: MlpModel, capture: Capture, psfs: PsfStack, geometry=None) -> np.ndarray:
    """Predicted lensless image for ``capture``'s geometry (no coordinate noise)."""
    s = _Sample(model, capture, psfs, geometry)
    return assemble_subapertures(s.predict(model, Var(model.theta), s.coords).value)


def evaluate_model(model: MlpModel, held_out, psfs, geometry=None, ids=None) -> dict:
    """PSNR / SSIM / MS-SSIM of predicted versus captured lensless images.

    MS-SSIM uses as many scales (up to five) as the image size allows.
    Returns a JSON-ready report; ``inference_seconds`` is the only
    non-deterministic entry.
    """
    rows = []
    t_inf = 0.0
    for k, (cap, p) in enumerate(zip(held_out, psfs)):
        t0 = time.perf_counter()
        pred = predict_capture(model, cap, p, geometry)
        t_inf += time.perf_counter() - t0
        gt = cap.image
        scales = min(5, max_msssim_scales(gt.shape))
        rows.append({
            "id": ids[k] if ids is not None else k,
            "display_pos": list(cap.display_pos),
            "aperture_index": cap.aperture_index,
            "channel": cap.channel,
            "psnr": psnr(gt, pred),
            "ssim": ssim(gt, pred),
            "msssim": msssim(gt, pred, scales=scales) if scales >= 1 else float("nan"),
            "msssim_scales": scales,
        })
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "msssim")} if rows else {}
    return {"rows": rows, "mean": mean, "count": len(rows),
            "inference_seconds": t_inf / max(len(rows), 1)}
