"""Zero padding, center cropping and DFT-based linear convolution.

All padding and cropping uses the same floor-offset centering: an array of
height ``h`` placed in a frame of height ``H`` starts at row
``(H - h) // 2``. With that convention ``crop_center`` is the exact
adjoint (and left inverse) of ``zero_pad``.

FFT normalization is numpy's default: unnormalized forward transform,
``1/N`` on the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .optics import PsfStack


def _offsets(big, small):
    return tuple((b - s) // 2 for b, s in zip(big, small))


def zero_pad(t, out_h: int, out_w: int) -> np.ndarray:
    """Center ``t`` (over its last two axes) inside an ``out_h x out_w`` frame."""
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"zero_pad cannot shrink {h}x{w} to {out_h}x{out_w}")
    oy, ox = _offsets((out_h, out_w), (h, w))
    out = np.zeros(t.shape[:-2] + (out_h, out_w), dtype=t.dtype)
    out[..., oy:oy + h, ox:ox + w] = t
    return out


def crop_center(t, out_h: int, out_w: int) -> np.ndarray:
    """Central ``out_h x out_w`` window of ``t`` over its last two axes."""
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"crop_center cannot grow {h}x{w} to {out_h}x{out_w}")
    oy, ox = _offsets((h, w), (out_h, out_w))
    return t[..., oy:oy + out_h, ox:ox + out_w]


def _check(a, name):
    if a.size == 0 or 0 in a.shape[-2:]:
        raise ValueError(f"{name} is empty")
    if a.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions")


def conv2d_linear(scene, psf, method: str = "real") -> np.ndarray:
    """Full linear convolution over the last two axes via the DFT.

    Both operands are zero-padded to ``(h + p_h - 1, w + p_w - 1)`` before
    transforming so there is no circular wrap-around. Leading axes
    broadcast. ``method="complex"`` uses full complex FFTs and keeps only
    the real part; ``"real"`` uses the real-input transforms.
    """
    scene = np.asarray(scene)
    psf = np.asarray(psf)
    _check(scene, "scene")
    _check(psf, "psf")
    h, w = scene.shape[-2:]
    ph, pw = psf.shape[-2:]
    shape = (h + ph - 1, w + pw - 1)
    out_dtype = np.result_type(scene.dtype, psf.dtype, np.float32)
    if method == "real":
        spec = np.fft.rfft2(scene, s=shape) * np.fft.rfft2(psf, s=shape)
        out = np.fft.irfft2(spec, s=shape)
    elif method == "complex":
        spec = np.fft.fft2(scene, s=shape) * np.fft.fft2(psf, s=shape)
        out = np.fft.ifft2(spec).real
    else:
        raise ValueError(f"unknown method {method!r}")
    return out.astype(out_dtype, copy=False)


def correlate_valid(grad_full, psf, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of ``conv2d_linear`` with respect to the scene operand.

    Given a gradient over the full convolution support, returns the
    gradient over the ``out_h x out_w`` scene:
    ``g[j] = sum_k grad_full[j + k] * psf[k]``.
    """
    grad_full = np.asarray(grad_full)
    psf = np.asarray(psf)
    shape = grad_full.shape[-2:]
    spec = np.fft.rfft2(grad_full, s=shape) * np.conj(np.fft.rfft2(psf, s=shape))
    out = np.fft.irfft2(spec, s=shape)[..., :out_h, :out_w]
    return out.astype(np.result_type(grad_full.dtype, np.float32), copy=False)


@dataclass
class ForwardModel:
    """A shift-invariant lensless measurement: convolve with ``psf``, crop."""

    psf: np.ndarray
    out_height: int
    out_width: int
    scene_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.psf = np.asarray(self.psf, dtype=np.float32)
        if self.psf.ndim != 2:
            raise ValueError("psf must be 2D")
        if not np.all(np.isfinite(self.psf)) or np.any(self.psf < 0):
            raise ValueError("psf must be finite and non-negative")
        if self.scene_shape is not None:
            hs, ws = self.scene_shape
            ph, pw = self.psf.shape
            if self.out_height > hs + ph - 1 or self.out_width > ws + pw - 1:
                raise ValueError("crop does not fit the linear convolution support")


def forward_measure(model: ForwardModel, scene) -> np.ndarray:
    scene = np.asarray(scene, dtype=np.float32)
    if model.scene_shape is not None and scene.shape != tuple(model.scene_shape):
        raise ValueError(f"scene shape {scene.shape} != model {tuple(model.scene_shape)}")
    ph, pw = model.psf.shape
    if model.out_height > scene.shape[0] + ph - 1 or model.out_width > scene.shape[1] + pw - 1:
        raise ValueError("crop does not fit the linear convolution support")
    full = conv2d_linear(scene, model.psf)
    return crop_center(full, model.out_height, model.out_width)


def forward_measure_adjoint(model: ForwardModel, grad_out, scene_shape) -> np.ndarray:
    """Transpose of :func:`forward_measure` applied to ``grad_out``."""
    hs, ws = scene_shape
    ph, pw = model.psf.shape
    full = zero_pad(np.asarray(grad_out), hs + ph - 1, ws + pw - 1)
    return correlate_valid(full, model.psf, hs, ws)


def forward_measure_lf(psfs: PsfStack, lf_views) -> np.ndarray:
    """Per-angle measurement of a light field ``[n_u, n_v, h, w]``.

    ``out[u, v] = crop_center(conv2d_linear(views[u, v], patch[u, v]), h, w)``.
    The windows are independent, so this equals a block-diagonal 4D
    convolution over the angular grid.
    """
    views = np.asarray(lf_views)
    patches = psfs.patches
    if views.ndim != 4 or views.shape[:2] != patches.shape[:2]:
        raise ValueError(
            f"angular grid mismatch: views {views.shape[:2]} vs psfs {patches.shape[:2]}"
        )
    h, w = views.shape[-2:]
    return crop_center(conv2d_linear(views, patches), h, w)


def forward_measure_lf_adjoint(psfs: PsfStack, grad_out) -> np.ndarray:
    grad_out = np.asarray(grad_out)
    h, w = grad_out.shape[-2:]
    ph, pw = psfs.patches.shape[-2:]
    full = zero_pad(grad_out, h + ph - 1, w + pw - 1)
    return correlate_valid(full, psfs.patches, h, w)
