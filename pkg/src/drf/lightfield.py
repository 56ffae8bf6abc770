"""Light fields, lensless captures and their sub-aperture decomposition.

A capture is the ``(u, v)``-tiled assembly of ``n_u x n_v`` sub-aperture
images. Tile ``(i, j)`` covers rows ``[i*win_h, (i+1)*win_h)`` and columns
``[j*win_w, (j+1)*win_w)`` of the centered tiling region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fftconv import crop_center
from .nn import MlpModel
from .optics import AngularDomain
from .tensor_io import load_tensor, save_tensor


@dataclass
class LightField:
    views: np.ndarray  # [n_u, n_v, h, w]
    domain: AngularDomain
    display_pos: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float32)
        if self.views.ndim != 4 or self.views.shape[:2] != (self.domain.n_u, self.domain.n_v):
            raise ValueError("views do not match the angular grid")

    def save(self, path) -> None:
        path = Path(path)
        save_tensor(self.views, path.parent / (path.name + ".views"))
        meta = {"display_pos": list(self.display_pos), "domain": self.domain.to_dict(),
                "views": path.name + ".views"}
        with open(path.parent / (path.name + ".json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LightField":
        path = Path(path)
        with open(path.parent / (path.name + ".json")) as fh:
            meta = json.load(fh)
        return cls(load_tensor(path.parent / meta["views"]), AngularDomain(**meta["domain"]),
                   tuple(meta["display_pos"]))


@dataclass
class Capture:
    """One lensless measurement with its provenance."""

    image: np.ndarray
    display_pos: tuple[float, float]
    aperture_index: int
    channel: str
    domain: AngularDomain

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ValueError("capture image must be 2D")

    def tiles(self, win_h=None, win_w=None) -> np.ndarray:
        n_u, n_v = self.domain.n_u, self.domain.n_v
        win_h = win_h or self.image.shape[0] // n_u
        win_w = win_w or self.image.shape[1] // n_v
        return extract_subapertures(self, n_u, n_v, win_h, win_w)

    def metadata(self) -> dict:
        return {"display_pos": list(self.display_pos), "aperture_index": self.aperture_index,
                "channel": self.channel, "domain": self.domain.to_dict()}

    def save(self, path) -> None:
        path = Path(path)
        save_tensor(self.image, path.parent / (path.name + ".image"))
        meta = self.metadata() | {"image": path.name + ".image"}
        with open(path.parent / (path.name + ".json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Capture":
        path = Path(path)
        with open(path.parent / (path.name + ".json")) as fh:
            meta = json.load(fh)
        return cls(load_tensor(path.parent / meta["image"]), tuple(meta["display_pos"]),
                   int(meta["aperture_index"]), meta["channel"], AngularDomain(**meta["domain"]))


def extract_subapertures(c, n_u: int = 9, n_v: int = 9, win_h: int = 54, win_w: int = 70) -> np.ndarray:
    """Split a capture into ``[n_u, n_v, win_h, win_w]`` disjoint tiles."""
    img = c.image if isinstance(c, Capture) else np.asarray(c)
    H, W = n_u * win_h, n_v * win_w
    if img.shape[0] < H or img.shape[1] < W:
        raise ValueError(f"capture {img.shape} too small for {n_u}x{n_v} tiles of {win_h}x{win_w}")
    region = crop_center(img, H, W)
    return region.reshape(n_u, win_h, n_v, win_w).transpose(0, 2, 1, 3).copy()


def assemble_subapertures(tiles) -> np.ndarray:
    """Inverse of :func:`extract_subapertures` for a conforming capture."""
    tiles = np.asarray(tiles)
    n_u, n_v, h, w = tiles.shape
    return tiles.transpose(0, 2, 1, 3).reshape(n_u * h, n_v * w)


def form_image(lf: LightField) -> np.ndarray:
    """Riemann sum of the views over the angular grid (bin area ``du * dv``)."""
    d = lf.domain
    return lf.views.astype(np.float64).sum(axis=(0, 1)) * (d.du * d.dv)


def sample_coordinates(display_pos, domain: AngularDomain, tile_shape) -> np.ndarray:
    """Physical ``[n_u*n_v*h*w, 6]`` coordinates in view order ``(u, v, s, t)``."""
    h, w = tile_shape
    u, v = domain.u, domain.v
    s, t = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    U, V, S, T = np.meshgrid(u, v, s, t, indexing="ij")
    n = U.size
    x, y = display_pos
    return np.stack([np.full(n, x), np.full(n, y), U.ravel(), V.ravel(), S.ravel(), T.ravel()], axis=1)


@dataclass(frozen=True)
class DisplayPanel:
    """Physical extent (mm) of the panel region addressed by ``[0, 1]^2``."""

    width: float
    height: float


def render_view(model, camera_pos, panel: DisplayPanel, out_h: int, out_w: int,
                channel: str | None = None):
    """Render the panel as seen from ``camera_pos = (X, Y, Z)`` millimeters.

    ``model`` is an :class:`~drf.nn.MlpModel`, a mapping of channel name to
    models (select with ``channel``), or any callable ``f(u_deg, v_deg)``
    such as a :class:`~drf.optics.DisplayEmissionModel`. Returns the image
    and a boolean mask that is false where the viewing angle falls outside
    the model's trained angular range.
    """
    X, Y, Z = (float(c) for c in camera_pos)
    if not Z > 0:
        raise ValueError("camera must be in front of the panel (Z > 0)")
    if isinstance(model, dict):
        if channel is None:
            raise ValueError("channel is required when rendering a multi-channel model")
        model = model[channel]
    xs = np.linspace(0.0, 1.0, out_w) if out_w > 1 else np.array([0.5])
    ys = np.linspace(0.0, 1.0, out_h) if out_h > 1 else np.array([0.5])
    gx, gy = np.meshgrid(xs, ys)
    px = (gx - 0.5) * panel.width
    py = (gy - 0.5) * panel.height
    u = np.degrees(np.arctan((X - px) / Z))
    v = np.degrees(np.arctan((Y - py) / Z))

    if isinstance(model, MlpModel):
        image = model.footprint_radiance(gx, gy, u, v)
        mask = model.frame.angular_contains(u, v)
    else:
        image = np.asarray(model(u, v), dtype=np.float64)
        mask = np.ones_like(image, dtype=bool)
    return image, mask

