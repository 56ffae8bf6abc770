"""Image-quality metrics and angular intensity profiles.

SSIM follows Wang et al. (2004): an 11x11 Gaussian window with sigma 1.5,
``K1 = 0.01``, ``K2 = 0.03``, averaged over the fully contained ("valid")
windows. MS-SSIM follows Wang, Simoncelli & Bovik (2003) with the usual
five weights and 2x2 mean downsampling between scales. Contrast-structure
terms are clamped at zero before exponentiation so the product stays real.
All accumulation happens in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .nn import MlpModel
from .optics import AngularDomain

PSNR_CAP = 99.0
K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(peak**2 / mse)))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_maps(a, b, data_range):
    win = gaussian_window()
    filt = lambda img: signal.convolve2d(img, win, mode="valid")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu1, mu2 = filt(a), filt(b)
    s11 = filt(a * a) - mu1 * mu1
    s22 = filt(b * b) - mu2 * mu2
    s12 = filt(a * b) - mu1 * mu2
    lum = (2 * mu1 * mu2 + c1) / (mu1**2 + mu2**2 + c1)
    cs = (2 * s12 + c2) / (s11 + s22 + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < WINDOW:
        raise ValueError(f"ssim needs a 2D image of at least {WINDOW}x{WINDOW}, got {a.shape}")
    lum, cs = _ssim_maps(a, b, data_range)
    return float(np.mean(lum * cs))


def max_msssim_scales(shape) -> int:
    """Largest scale count whose coarsest level still fits the SSIM window."""
    n, m = min(shape), 0
    while n >= WINDOW:
        m += 1
        n //= 2
    return m


def _downsample(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def msssim(a, b, scales: int = 5, weights=None, data_range: float = 1.0) -> float:
    """Multi-scale SSIM. With fewer than five scales and no explicit
    ``weights``, the leading standard weights are renormalized to sum to 1."""
    a, b = _pair(a, b)
    if weights is None:
        w = np.asarray(MSSSIM_WEIGHTS[:scales], dtype=np.float64)
        weights = w if scales == len(MSSSIM_WEIGHTS) else w / w.sum()
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != scales or scales < 1:
        raise ValueError("need one weight per scale")
    if a.ndim != 2 or min(a.shape) < WINDOW * 2 ** (scales - 1):
        raise ValueError(
            f"image {a.shape} too small for {scales} scales; "
            f"max feasible scales = {max_msssim_scales(a.shape)}"
        )
    result = 1.0
    for j in range(scales):
        lum, cs = _ssim_maps(a, b, data_range)
        if j < scales - 1:
            term = np.mean(cs)
            a, b = _downsample(a), _downsample(b)
        else:
            term = np.mean(lum * cs)
        result *= max(term, 0.0) ** weights[j]
    return float(result)


@dataclass
class AngularProfile:
    radii: np.ndarray           # bin centers, degrees
    mean_intensity: np.ndarray  # normalized to max 1; NaN where a bin is empty
    counts: np.ndarray

    def rows(self):
        return [(f"{r:.6f}", float(i) if np.isfinite(i) else float("nan"), int(c))
                for r, i, c in zip(self.radii, self.mean_intensity, self.counts)]


def _intensity_fn(source, display_pos):
    if isinstance(source, MlpModel):
        x, y = display_pos
        return lambda u, v: source.footprint_radiance(x, y, u, v)
    if callable(source):
        return source
    raise TypeError(f"cannot build an angular profile from {type(source).__name__}")


def angular_profile(source, display_pos=(0.5, 0.5), radius_bins=8,
                    domain: AngularDomain | None = None, mask=None) -> AngularProfile:
    """Mean intensity versus combined angular deviation ``sqrt(u^2 + v^2)``.

    ``source`` is a trained :class:`~drf.nn.MlpModel` (radiance averaged
    over the pixel's sub-view footprint) or a callable ``f(u_deg, v_deg)``.
    ``domain`` is the angular sampling grid; for models it defaults to a
    61x61 grid over the trained angular range. ``mask`` optionally restricts
    sampling to a boolean ``[n_u, n_v]`` subset of the grid, e.g. the angles
    actually observed from ``display_pos``. ``radius_bins`` is a bin count
    or explicit edges; a bin count spans the sampled radii.
    """
    if domain is None:
        if not isinstance(source, MlpModel):
            raise ValueError("an angular domain is required for non-model sources")
        (u0, u1), (v0, v1) = source.frame.ranges[2], source.frame.ranges[3]
        domain = AngularDomain(u0, u1, v0, v1, 61, 61)
    f = _intensity_fn(source, display_pos)
    U, V = np.meshgrid(domain.u, domain.v, indexing="ij")
    keep = np.ones(U.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != U.shape:
        raise ValueError(f"mask shape {keep.shape} does not match the angular grid {U.shape}")
    if not keep.any():
        raise ValueError("mask selects no angles")
    U, V = U[keep], V[keep]
    vals = np.clip(np.asarray(f(U, V), dtype=np.float64), 0.0, None).ravel()
    r = np.hypot(U, V).ravel()
    if np.ndim(radius_bins) == 0:
        if radius_bins < 2:
            raise ValueError("need at least 2 radius bins")
        lo = r.min() if mask is not None else 0.0
        edges = np.linspace(lo, r.max() * (1 + 1e-12) + 1e-12, int(radius_bins) + 1)
    else:
        edges = np.asarray(radius_bins, dtype=np.float64)
        if len(edges) < 3:
            raise ValueError("need at least 2 radius bins")
    idx = np.digitize(r, edges) - 1
    nb = len(edges) - 1
    counts = np.zeros(nb, dtype=np.int64)
    sums = np.zeros(nb)
    ok = (idx >= 0) & (idx < nb)
    np.add.at(counts, idx[ok], 1)
    np.add.at(sums, idx[ok], vals[ok])
    means = np.full(nb, np.nan)
    means[counts > 0] = sums[counts > 0] / counts[counts > 0]
    peak = np.nanmax(means) if np.any(counts > 0) else 0.0
    if peak > 0:
        means = means / peak
    return AngularProfile(0.5 * (edges[:-1] + edges[1:]), means, counts)


def monotone_within_one_bin(values) -> bool:
    """True if no bin exceeds any bin at least two positions before it.

    Adjacent-bin reversals are tolerated; anything longer-range is not.
    """
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    for i in range(2, len(v)):
        if v[i] > v[: i - 1].min() + 1e-12:
            return False
    return True
