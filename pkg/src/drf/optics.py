"""Aperture-array lensless camera geometry and synthetic data generation.

Lengths are millimeters and angles degrees throughout. A lit display pixel
at offset ``p`` from the camera axis, seen through an aperture centered at
``c`` with width ``n`` at standoff ``m``, reaches the sensor at incidence
angles ``[atan((c - n/2 - p)/m), atan((c + n/2 - p)/m)]``.

Display positions are normalized to ``[0, 1]^2`` over the sampled panel
region, whose physical extent is ``panel_width x panel_height`` centered on
the camera axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fftconv import forward_measure_lf
from .tensor_io import RngStream, load_tensor, save_tensor

#: The 3x3 grid of display positions sampled for training.
NINE_POSITIONS: tuple[tuple[float, float], ...] = tuple(
    (x, y) for y in (0.0, 0.5, 1.0) for x in (0.0, 0.5, 1.0)
)

# Aperture layout derived with fit_aperture_spacing() for the default
# geometry below; see tests/test_optics.py::test_default_layout_is_fitted.
DEFAULT_SPACING = (1.835021, 3.106417)


def diagonal_layout(dx: float, dy: float, count: int = 5) -> tuple[tuple[float, float], ...]:
    """Apertures on a diagonal through the axis, ``dx``/``dy`` apart."""
    half = (count - 1) / 2
    return tuple(((i - half) * dx, (i - half) * dy) for i in range(count))


@dataclass(frozen=True)
class ApertureGeometry:
    aperture_width: float = 2.5
    aperture_height: float = 3.0
    standoff: float = 30.0
    sensor_gap: float = 10.0
    aperture_centers: tuple[tuple[float, float], ...] = field(
        default_factory=lambda: diagonal_layout(*DEFAULT_SPACING)
    )
    panel_width: float = 16.0
    panel_height: float = 5.0
    # Sensor pixel pitch used to convert PSF translations to pixels.
    sensor_pixel: float = 0.2

    def __post_init__(self):
        object.__setattr__(
            self,
            "aperture_centers",
            tuple((float(cx), float(cy)) for cx, cy in self.aperture_centers),
        )
        for name in ("aperture_width", "aperture_height", "standoff", "sensor_gap", "sensor_pixel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.panel_width < 0 or self.panel_height < 0:
            raise ValueError("panel extent must be non-negative")
        if not self.aperture_centers:
            raise ValueError("at least one aperture is required")
        n, h = self.aperture_width, self.aperture_height
        cs = self.aperture_centers
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                ox = n - abs(cs[i][0] - cs[j][0])
                oy = h - abs(cs[i][1] - cs[j][1])
                if ox > 1e-9 and oy > 1e-9:
                    raise ValueError(f"apertures {i} and {j} overlap")

    @property
    def n_apertures(self) -> int:
        return len(self.aperture_centers)

    def pixel_offset(self, display_pos) -> tuple[float, float]:
        """Physical offset (mm) of a normalized display position from the axis."""
        x, y = display_pos
        return ((x - 0.5) * self.panel_width, (y - 0.5) * self.panel_height)


def incident_angle_range(g: ApertureGeometry, aperture_index: int, pixel_offset=(0.0, 0.0)):
    """``(u_lo, u_hi, v_lo, v_hi)`` in degrees for one aperture and pixel."""
    if not 0 <= aperture_index < g.n_apertures:
        raise IndexError(f"aperture index {aperture_index} out of range [0, {g.n_apertures})")
    cx, cy = g.aperture_centers[aperture_index]
    px, py = pixel_offset
    m = g.standoff
    hn, hh = g.aperture_width / 2, g.aperture_height / 2
    deg = math.degrees
    return (
        deg(math.atan((cx - hn - px) / m)),
        deg(math.atan((cx + hn - px) / m)),
        deg(math.atan((cy - hh - py) / m)),
        deg(math.atan((cy + hh - py) / m)),
    )


def _union_measure(intervals) -> float:
    total, cur_lo, cur_hi = 0.0, None, None
    for lo, hi in sorted(intervals):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def coverage_intervals(g: ApertureGeometry, positions=NINE_POSITIONS):
    """Per-(position, aperture) angular windows as two interval lists."""
    hs, vs = [], []
    for pos in positions:
        off = g.pixel_offset(pos)
        for a in range(g.n_apertures):
            u0, u1, v0, v1 = incident_angle_range(g, a, off)
            hs.append((u0, u1))
            vs.append((v0, v1))
    return hs, vs


def total_coverage(g: ApertureGeometry, positions=NINE_POSITIONS) -> tuple[float, float]:
    """Measure (degrees) of the union of incident-angle windows, per axis."""
    hs, vs = coverage_intervals(g, positions)
    return _union_measure(hs), _union_measure(vs)


def coverage_bounds(g: ApertureGeometry, positions=NINE_POSITIONS):
    """Outer ``(u_lo, u_hi, v_lo, v_hi)`` of all reachable incidence angles."""
    hs, vs = coverage_intervals(g, positions)
    return (min(h[0] for h in hs), max(h[1] for h in hs),
            min(v[0] for v in vs), max(v[1] for v in vs))


def fit_aperture_spacing(g: ApertureGeometry, target=(46.6, 37.6), count: int = 5,
                         positions=NINE_POSITIONS, tol: float = 1e-7):
    """Sweep diagonal-layout spacing until coverage hits ``target``.

    Horizontal spacing is searched in ``(0, aperture_width]`` and vertical
    spacing in ``[aperture_height, 2 * aperture_height]``. That keeps the
    rectangles disjoint and the union of windows contiguous, where coverage
    grows monotonically with spacing. Each axis' coverage depends only on its own
    spacing, so the two bisections are independent.
    """
    def cover(dx, dy):
        trial = ApertureGeometry(
            g.aperture_width, g.aperture_height, g.standoff, g.sensor_gap,
            diagonal_layout(dx, dy, count), g.panel_width, g.panel_height, g.sensor_pixel,
        )
        return total_coverage(trial, positions)

    def bisect(axis, lo, hi):
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            args = (mid, g.aperture_height) if axis == 0 else (g.aperture_width, mid)
            if cover(*args)[axis] < target[axis]:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return bisect(0, 0.0, g.aperture_width), bisect(1, g.aperture_height, 2 * g.aperture_height)


@dataclass(frozen=True)
class AngularDomain:
    """A regular grid of ``n_u x n_v`` angle bins; samples at bin centers."""

    u_min: float
    u_max: float
    v_min: float
    v_max: float
    n_u: int = 9
    n_v: int = 9

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise ValueError("angular domain must have positive extent")
        if self.n_u < 1 or self.n_v < 1:
            raise ValueError("grid counts must be positive")

    @property
    def du(self) -> float:
        return (self.u_max - self.u_min) / self.n_u

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.n_v

    @property
    def u(self) -> np.ndarray:
        return self.u_min + (np.arange(self.n_u) + 0.5) * self.du

    @property
    def v(self) -> np.ndarray:
        return self.v_min + (np.arange(self.n_v) + 0.5) * self.dv

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("u_min", "u_max", "v_min", "v_max", "n_u", "n_v")}


def capture_domain(g: ApertureGeometry, aperture_index: int, display_pos,
                   n_u: int = 9, n_v: int = 9) -> AngularDomain:
    """Angular grid spanning one aperture's window for one display position."""
    u0, u1, v0, v1 = incident_angle_range(g, aperture_index, g.pixel_offset(display_pos))
    return AngularDomain(u0, u1, v0, v1, n_u, n_v)


def aperture_window_mask(g: ApertureGeometry, dom: AngularDomain, aperture_index: int,
                         display_pos) -> np.ndarray:
    """Boolean ``[n_u, n_v]`` mask of grid angles that pass the aperture."""
    u0, u1, v0, v1 = incident_angle_range(g, aperture_index, g.pixel_offset(display_pos))
    eps = 1e-9
    mu = (dom.u >= u0 - eps) & (dom.u <= u1 + eps)
    mv = (dom.v >= v0 - eps) & (dom.v <= v1 + eps)
    return mu[:, None] & mv[None, :]


def observed_angles_mask(g: ApertureGeometry, dom: AngularDomain, display_pos) -> np.ndarray:
    """Union over all apertures of :func:`aperture_window_mask`."""
    mask = np.zeros((dom.n_u, dom.n_v), dtype=bool)
    for idx in range(g.n_apertures):
        mask |= aperture_window_mask(g, dom, idx, display_pos)
    return mask


@dataclass
class PsfStack:
    """Per-angle PSF patches ``[n_u, n_v, p_h, p_w]`` on an angular grid."""

    patches: np.ndarray
    domain: AngularDomain

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 4:
            raise ValueError("PSF stack must be [n_u, n_v, p_h, p_w]")
        if self.patches.shape[:2] != (self.domain.n_u, self.domain.n_v):
            raise ValueError("PSF stack does not match its angular grid")

    @classmethod
    def delta(cls, domain: AngularDomain, patch_h: int, patch_w: int) -> "PsfStack":
        """Stack of unit impulses that make the measurement an identity.

        The centered crop of a full convolution starts at ``(p - 1) // 2``,
        so that is where the impulse must sit (the middle for odd sizes).
        """
        p = np.zeros((domain.n_u, domain.n_v, patch_h, patch_w), np.float32)
        p[:, :, (patch_h - 1) // 2, (patch_w - 1) // 2] = 1.0
        return cls(p, domain)

    def save(self, path) -> None:
        path = Path(path)
        save_tensor(self.patches, path.parent / (path.name + ".patches"))
        meta = {"domain": self.domain.to_dict(), "patches": path.name + ".patches"}
        with open(path.parent / (path.name + ".json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PsfStack":
        path = Path(path)
        with open(path.parent / (path.name + ".json")) as fh:
            meta = json.load(fh)
        return cls(load_tensor(path.parent / meta["patches"]), AngularDomain(**meta["domain"]))


def caustic_texture(patch_h: int, patch_w: int, rng: RngStream) -> np.ndarray:
    """Sparse caustic-like pattern: smoothed, thresholded Gaussian noise."""
    gen = rng.generator()
    noise = gen.standard_normal((patch_h, patch_w))
    smooth = ndimage.gaussian_filter(noise, sigma=max(patch_h, patch_w) / 24.0, mode="wrap")
    thr = np.quantile(smooth, 0.8)
    tex = ndimage.gaussian_filter(np.clip(smooth - thr, 0.0, None), sigma=0.5, mode="constant")
    return tex / tex.sum()


def synth_psf_stack(g: ApertureGeometry, dom: AngularDomain, patch_h: int, patch_w: int,
                    rng: RngStream) -> PsfStack:
    """Translate one fixed caustic texture per incidence angle.

    The patch for angle ``(u, v)`` is the texture shifted by
    ``sensor_gap * tan(angle) / sensor_pixel`` pixels (columns follow
    ``u``, rows follow ``v``), clipped to the patch and renormalized.
    """
    if patch_h < 8 or patch_w < 8:
        raise ValueError("PSF patches must be at least 8x8")
    tex = caustic_texture(patch_h, patch_w, rng)
    out = np.empty((dom.n_u, dom.n_v, patch_h, patch_w), np.float64)
    for i, u in enumerate(dom.u):
        for j, v in enumerate(dom.v):
            dx = g.sensor_gap * math.tan(math.radians(u)) / g.sensor_pixel
            dy = g.sensor_gap * math.tan(math.radians(v)) / g.sensor_pixel
            if abs(dx) > patch_w / 2 or abs(dy) > patch_h / 2:
                raise ValueError(f"angle outside sensor support: ({u:.3f}, {v:.3f}) deg")
            if dx == 0 and dy == 0:
                p = tex.copy()
            else:
                p = ndimage.shift(tex, (dy, dx), order=1, mode="constant", cval=0.0)
                p = np.clip(p, 0.0, None)
            s = p.sum()
            if s <= 0:
                raise ValueError(f"angle outside sensor support: ({u:.3f}, {v:.3f}) deg")
            out[i, j] = p / s
    return PsfStack(out.astype(np.float32), dom)


@dataclass(frozen=True)
class DisplayEmissionModel:
    """Synthetic angular emission ``peak * cos(a_h u)^k * cos(a_v v)^k``."""

    falloff_exponent: float = 4.0
    anisotropy: tuple[float, float] = (1.0, 1.25)
    spatial_spread_sigma: float = 1.0
    peak_intensity: float = 1.0

    def __post_init__(self):
        if self.falloff_exponent < 0 or self.spatial_spread_sigma <= 0:
            raise ValueError("falloff exponent must be >= 0 and spread sigma > 0")
        if self.peak_intensity < 0:
            raise ValueError("peak intensity must be non-negative")

    def __call__(self, u_deg, v_deg):
        return emission(self, u_deg, v_deg)


def emission(model: DisplayEmissionModel, u_deg, v_deg):
    ah, av = model.anisotropy
    k = model.falloff_exponent
    cu = np.clip(np.cos(np.radians(ah * np.asarray(u_deg, dtype=np.float64))), 0.0, None)
    cv = np.clip(np.cos(np.radians(av * np.asarray(v_deg, dtype=np.float64))), 0.0, None)
    out = model.peak_intensity * cu**k * cv**k
    return float(out) if np.ndim(out) == 0 else out


def pointspread(h: int, w: int, sigma: float) -> np.ndarray:
    """Gaussian spread of a lit pixel over a sub-view, peak 1 at the center."""
    s = np.arange(h) - (h - 1) / 2
    t = np.arange(w) - (w - 1) / 2
    return np.exp(-(s[:, None] ** 2 + t[None, :] ** 2) / (2.0 * sigma**2))


def ground_truth_views(g: ApertureGeometry, dom: AngularDomain, model: DisplayEmissionModel,
                       display_pos, aperture_index: int, tile_shape) -> np.ndarray:
    """Noise-free light field ``[n_u, n_v, h, w]`` restricted to the aperture window."""
    h, w = tile_shape
    ang = emission(model, dom.u[:, None], dom.v[None, :])
    ang = ang * aperture_window_mask(g, dom, aperture_index, display_pos)
    return (ang[:, :, None, None] * pointspread(h, w, model.spatial_spread_sigma)).astype(np.float32)


def simulate_capture(g: ApertureGeometry, dom: AngularDomain, psfs: PsfStack,
                     model: DisplayEmissionModel, display_pos, aperture_index: int,
                     noise_sigma: float, rng: RngStream | None = None, channel: str = "G",
                     tile_shape=None):
    """Synthesize one lensless capture of a single lit pixel."""
    from .lightfield import Capture, assemble_subapertures

    x, y = display_pos
    if not (0 <= x <= 1 and 0 <= y <= 1):
        raise ValueError(f"display position {display_pos} outside [0, 1]^2")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if not 0 <= aperture_index < g.n_apertures:
        raise IndexError(f"aperture index {aperture_index} out of range [0, {g.n_apertures})")
    tile_shape = tuple(tile_shape or psfs.patches.shape[-2:])
    views = ground_truth_views(g, dom, model, display_pos, aperture_index, tile_shape)
    tiles = forward_measure_lf(psfs, views)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("a random stream is required when noise_sigma > 0")
        tiles = tiles + noise_sigma * rng.generator().standard_normal(tiles.shape)
    tiles = np.clip(tiles, 0.0, None).astype(np.float32)
    return Capture(
        image=assemble_subapertures(tiles),
        display_pos=(float(x), float(y)),
        aperture_index=int(aperture_index),
        channel=channel,
        domain=dom,
    )
