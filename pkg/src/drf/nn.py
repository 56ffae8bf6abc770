"""Coordinate network: positional encoding, sine/ReLU MLP, Adam.

The network maps the six coordinates ``(x, y, u, v, s, t)`` of a light-field
sample to a single channel's intensity. Coordinates are first mapped to
normalized units by a :class:`CoordinateFrame`; each physical range lands on
``[-0.5, 0.5]`` so that the lowest encoding level (period 2) stays
one-to-one over the data and extrapolation up to one range-width beyond it
remains inside ``[-1, 1]``.

Parameters live in one flat vector ``theta`` laid out layer by layer as
``W`` (``fan_in x fan_out``, row-major) followed by ``b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var
from .tensor_io import RngStream, load_tensor, save_tensor

#: Noise stds in normalized units for the display, angular and sub-view groups.
DEFAULT_NOISE_STDS = (5e-3, 1e-2, 1e-3)


class DivergenceError(FloatingPointError):
    """Raised when an optimizer sees a non-finite gradient or loss."""


@dataclass(frozen=True)
class PositionalEncoder:
    display_levels: int = 1
    angular_levels: int = 5
    spatial_levels: int = 10

    @property
    def levels(self) -> tuple[int, int, int]:
        return (self.display_levels, self.angular_levels, self.spatial_levels)

    @property
    def width(self) -> int:
        return 4 * sum(self.levels)

    def __call__(self, coords) -> np.ndarray:
        """Encode ``[N, 6]`` normalized coordinates to ``[N, width]`` features.

        Per scalar ``p`` the block is ``sin(2^0 pi p), cos(2^0 pi p), ...,
        sin(2^(L-1) pi p), cos(2^(L-1) pi p)``; scalars are ordered
        ``x, y, u, v, s, t``.
        """
        coords = np.asarray(coords)
        if coords.ndim != 2 or coords.shape[1] != 6:
            raise ValueError(f"expected [N, 6] coordinates, got {coords.shape}")
        blocks = []
        for col in range(6):
            L = self.levels[col // 2]
            if L == 0:
                continue
            freqs = (2.0 ** np.arange(L)) * np.pi
            ang = coords[:, col:col + 1] * freqs.astype(coords.dtype)
            pair = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
            blocks.append(pair.reshape(len(coords), 2 * L))
        return np.concatenate(blocks, axis=1)


def positional_encode(x, y, u, v, s, t, encoder: PositionalEncoder | None = None) -> np.ndarray:
    """Encode a single normalized sample; returns a 1-D feature vector."""
    encoder = encoder or PositionalEncoder()
    return encoder(np.array([[x, y, u, v, s, t]], dtype=np.float64))[0]


@dataclass(frozen=True)
class CoordinateFrame:
    """Physical coordinate ranges mapped onto ``[-0.5, 0.5]``.

    ``ranges`` holds ``(lo, hi)`` for ``x, y`` (normalized display units),
    ``u, v`` (degrees) and ``s, t`` (sub-view pixel indices).
    """

    ranges: tuple = ((0.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (0.0, 1.0), (0.0, 1.0))

    @classmethod
    def build(cls, angular_bounds, tile_shape):
        u0, u1, v0, v1 = angular_bounds
        h, w = tile_shape
        return cls(((0.0, 1.0), (0.0, 1.0), (float(u0), float(u1)), (float(v0), float(v1)),
                    (0.0, float(h - 1)), (0.0, float(w - 1))))

    def normalize(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        out = np.empty_like(coords)
        for i, (lo, hi) in enumerate(self.ranges):
            span = hi - lo
            out[:, i] = (coords[:, i] - 0.5 * (lo + hi)) / span if span > 0 else 0.0
        return out

    def angular_contains(self, u, v) -> np.ndarray:
        (u0, u1), (v0, v1) = self.ranges[2], self.ranges[3]
        eps = 1e-9
        return (u >= u0 - eps) & (u <= u1 + eps) & (v >= v0 - eps) & (v <= v1 + eps)

    @property
    def subview_center(self) -> tuple[float, float]:
        (s0, s1), (t0, t1) = self.ranges[4], self.ranges[5]
        return (0.5 * (s0 + s1), 0.5 * (t0 + t1))

    @property
    def subview_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer sub-view sample positions covered by the ``s, t`` ranges."""
        (s0, s1), (t0, t1) = self.ranges[4], self.ranges[5]
        return (np.arange(np.ceil(s0), np.floor(s1) + 1), np.arange(np.ceil(t0), np.floor(t1) + 1))


@dataclass
class MlpModel:
    """Coordinate MLP ``F_theta`` with its encoder and coordinate frame.

    ``activation`` is ``"sine"`` (sin(omega z), ``omega0`` on the first
    layer and ``omega_hidden`` afterwards) or ``"relu"``. A model without an
    encoder consumes the six normalized coordinates directly.
    """

    widths: tuple = (64, 32, 32, 32, 1)
    activation: str = "sine"
    omega0: float = 30.0
    omega_hidden: float = 1.0
    encoder: PositionalEncoder | None = field(default_factory=PositionalEncoder)
    frame: CoordinateFrame = field(default_factory=CoordinateFrame)
    theta: np.ndarray | None = None
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        expected_in = self.encoder.width if self.encoder is not None else 6
        if self.widths[0] != expected_in:
            raise ValueError(f"input width {self.widths[0]} != feature width {expected_in}")
        if self.widths[-1] != 1:
            raise ValueError("the output head must be scalar")
        if self.theta is None:
            self.theta = np.zeros(self.n_params, dtype=self.dtype)
        else:
            self.theta = np.asarray(self.theta, dtype=self.dtype)
            if self.theta.shape != (self.n_params,):
                raise ValueError(f"theta has {self.theta.size} values, expected {self.n_params}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def layer_slices(self):
        """``(W_slice, b_slice, fan_in, fan_out)`` for each layer."""
        out, k = [], 0
        for i, o in self.layer_shapes:
            out.append((slice(k, k + i * o), slice(k + i * o, k + i * o + o), i, o))
            k += i * o + o
        return out

    def initialize(self, rng: RngStream, head: str = "default") -> "MlpModel":
        """SIREN-style init for sine nets, He-uniform for ReLU nets.

        ``head="zero"`` zeroes the output layer so the untrained model
        predicts exactly 0.
        """
        gen = rng.generator()
        theta = np.zeros(self.n_params, dtype=np.float64)
        slices = self.layer_slices()
        for li, (ws, bs, fan_in, fan_out) in enumerate(slices):
            if self.activation == "sine":
                bound = 1.0 / fan_in if li == 0 else math.sqrt(6.0 / fan_in) / self.omega_hidden
                theta[ws] = gen.uniform(-bound, bound, fan_in * fan_out)
                theta[bs] = gen.uniform(-1.0, 1.0, fan_out) / math.sqrt(fan_in)
            else:
                bound = math.sqrt(6.0 / fan_in)
                theta[ws] = gen.uniform(-bound, bound, fan_in * fan_out)
        if head == "zero":
            ws, bs, _, _ = slices[-1]
            theta[ws] = 0.0
            theta[bs] = 0.0
        elif head != "default":
            raise ValueError(f"unknown head init {head!r}")
        self.theta = theta.astype(self.dtype)
        return self

    def features(self, coords_normalized) -> np.ndarray:
        c = np.asarray(coords_normalized, dtype=self.dtype)
        return self.encoder(c) if self.encoder is not None else c

    def network(self, theta: Var, features) -> Var:
        """Differentiable forward pass; returns a ``[N]`` Var."""
        h = Var(np.asarray(features, dtype=self.dtype))
        slices = self.layer_slices()
        for li, (ws, bs, fan_in, fan_out) in enumerate(slices):
            z = h @ theta[ws].reshape(fan_in, fan_out) + theta[bs]
            if li == len(slices) - 1:
                h = z
            elif self.activation == "sine":
                omega = self.omega0 if li == 0 else self.omega_hidden
                h = (z * omega).sin() if omega != 1.0 else z.sin()
            else:
                h = z.relu()
        return h.reshape(-1)

    def radiance(self, coords) -> np.ndarray:
        """Evaluate on physical ``[N, 6]`` coordinates (no noise)."""
        feats = self.features(self.frame.normalize(coords))
        return mlp_forward(self, feats)

    def footprint_radiance(self, x, y, u, v) -> np.ndarray:
        """Radiance toward ``(u, v)`` averaged over the pixel's sub-view footprint.

        ``x, y, u, v`` broadcast together; the result has their shape. This
        is what a camera integrating the whole pixel would record.
        """
        arrays = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, u, v)))
        shape = arrays[0].shape
        x, y, u, v = (a.ravel() for a in arrays)
        ss, tt = self.frame.subview_grid
        acc = np.zeros(x.size)
        for s in ss:
            for t in tt:
                coords = np.stack([x, y, u, v, np.full(x.size, s), np.full(x.size, t)], axis=1)
                acc += self.radiance(coords)
        return (acc / (len(ss) * len(tt))).reshape(shape)

    def copy(self) -> "MlpModel":
        return MlpModel(self.widths, self.activation, self.omega0, self.omega_hidden,
                        self.encoder, self.frame, self.theta.copy(), self.dtype)

    def astype(self, dtype: str) -> "MlpModel":
        m = self.copy()
        m.dtype = dtype
        m.theta = m.theta.astype(dtype)
        return m


def make_model(kind: str, frame: CoordinateFrame, rng: RngStream,
               encoder: PositionalEncoder | None = None, hidden: int = 32, depth: int = 3,
               head: str = "default", dtype: str = "float32", omega0: float = 30.0,
               omega_hidden: float = 1.0) -> MlpModel:
    """Build and initialize ``"ours"`` (encoded sine net) or ``"vanilla"`` (raw ReLU)."""
    if kind == "ours":
        encoder = encoder or PositionalEncoder()
        widths = (encoder.width,) + (hidden,) * depth + (1,)
        m = MlpModel(widths, "sine", omega0, omega_hidden, encoder=encoder, frame=frame, dtype=dtype)
    elif kind == "vanilla":
        widths = (6,) + (hidden,) * depth + (1,)
        m = MlpModel(widths, "relu", encoder=None, frame=frame, dtype=dtype)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return m.initialize(rng, head=head)


def mlp_forward(m: MlpModel, features):
    feats = np.asarray(features, dtype=m.dtype)
    single = feats.ndim == 1
    if single:
        feats = feats[None, :]
    if feats.shape[1] != m.widths[0]:
        raise ValueError(f"feature width {feats.shape[1]} != input width {m.widths[0]}")
    out = m.network(Var(m.theta), feats).value
    return out[0] if single else out


def backward(m: MlpModel, features, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * F_theta(features))`` with respect to theta."""
    theta = Var(m.theta)
    out = m.network(theta, np.atleast_2d(np.asarray(features, dtype=m.dtype)))
    out.backward(np.asarray(upstream, dtype=m.dtype).reshape(out.shape))
    return theta.grad if theta.grad is not None else np.zeros_like(m.theta)


@dataclass
class AdamState:
    """Adam moments plus the linear-decay schedule and clipping settings."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-3
    total_epochs: int = 800
    clip_norm: float = 1.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def lr(self, epoch) -> float:
        return self.base_lr * (1.0 - epoch / self.total_epochs)


def clip_by_global_norm(grad, clip_norm: float):
    norm = float(np.sqrt(np.sum(np.square(grad, dtype=np.float64))))
    if math.isfinite(clip_norm) and norm > clip_norm:
        grad = grad * (clip_norm / norm)
    return grad, norm


def adam_step(state: AdamState, theta, grad, epoch) -> np.ndarray:
    """One bias-corrected Adam update after global-norm clipping."""
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != theta shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("diverged: non-finite gradient")
    grad, _ = clip_by_global_norm(grad, state.clip_norm)
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    lr = state.lr(epoch)
    return (theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)


def inject_coordinate_noise(coords, rng=None, stds=DEFAULT_NOISE_STDS) -> np.ndarray:
    """Add zero-mean Gaussian noise per coordinate group (``rng=None``: eval mode)."""
    coords = np.asarray(coords)
    if rng is None:
        return coords
    gen = rng if isinstance(rng, np.random.Generator) else rng.generator()
    scale = np.repeat(np.asarray(stds, dtype=np.float64), 2)
    return coords + gen.standard_normal(coords.shape) * scale


# -- checkpoints ---------------------------------------------------------------

def _model_meta(m: MlpModel) -> dict:
    enc = m.encoder
    return {
        "widths": list(m.widths),
        "activation": m.activation,
        "omega0": m.omega0,
        "omega_hidden": m.omega_hidden,
        "encoder": None if enc is None else {
            "display_levels": enc.display_levels,
            "angular_levels": enc.angular_levels,
            "spatial_levels": enc.spatial_levels,
        },
        "normalization_ranges": [list(r) for r in m.frame.ranges],
        "n_params": m.n_params,
    }


def save_checkpoint(m: MlpModel, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (configuration) and ``<path>.theta.{json,bin}``."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    meta = _model_meta(m)
    meta["theta"] = path.name + ".theta"
    if extra:
        meta["extra"] = extra
    save_tensor(m.theta.astype(np.float32), path.parent / (path.name + ".theta"))
    with open(path.parent / (path.name + ".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path) -> MlpModel:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    with open(path.parent / (path.name + ".json")) as fh:
        meta = json.load(fh)
    enc = meta["encoder"]
    theta = load_tensor(path.parent / meta["theta"])
    return MlpModel(
        widths=tuple(meta["widths"]),
        activation=meta["activation"],
        omega0=meta["omega0"],
        omega_hidden=meta["omega_hidden"],
        encoder=None if enc is None else PositionalEncoder(**enc),
        frame=CoordinateFrame(tuple(tuple(r) for r in meta["normalization_ranges"])),
        theta=theta,
    )
