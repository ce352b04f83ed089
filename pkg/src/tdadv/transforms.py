"""Deterministic, input-differentiable image transforms T(x; theta).

Continuous kinds: scaling (factor S), Gaussian blur (sigma, fixed 5x5
kernel), gamma correction (A = 1 on [0,1] images), JPEG quality Q with a
smooth rounding surrogate.  Discrete kinds: flips and three perspective
presets.  All transforms map [0,1] images to [0,1] images and are
differentiable w.r.t. the pixels (transform parameters are constants).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import SplitMix64


class TransformKind(enum.Enum):
    SCALE = "scale"
    BLUR = "blur"
    GAMMA = "gamma"
    JPEG = "jpeg"
    FLIP = "flip"
    PERSPECTIVE = "perspective"


DISCRETE_KINDS = frozenset({TransformKind.FLIP, TransformKind.PERSPECTIVE})
FLIP_MODES = ("none", "horizontal", "vertical")
PERSPECTIVE_PRESETS = (1, 2, 3)

# operating interval per kind; used for validation and capacity sweeps
KIND_DOMAIN = {
    TransformKind.SCALE: (0.05, 4.0),
    TransformKind.BLUR: (0.0, 8.0),
    TransformKind.GAMMA: (0.05, 8.0),
    TransformKind.JPEG: (1, 100),
}

BLUR_IDENTITY_SIGMA = 0.01
GAMMA_FLOOR = 1e-6


def _check_theta(kind: TransformKind, theta) -> None:
    if kind is TransformKind.FLIP:
        if theta not in FLIP_MODES:
            raise ValueError(f"flip mode must be one of {FLIP_MODES}, got {theta!r}")
        return
    if kind is TransformKind.PERSPECTIVE:
        if theta not in PERSPECTIVE_PRESETS:
            raise ValueError(f"perspective preset must be 1, 2 or 3, got {theta!r}")
        return
    lo, hi = KIND_DOMAIN[kind]
    if kind is TransformKind.JPEG:
        if int(theta) != theta or not lo <= theta <= hi:
            raise ValueError(f"JPEG quality must be an integer in [{lo},{hi}], got {theta!r}")
        return
    if not lo <= theta <= hi:
        raise ValueError(f"{kind.value} parameter {theta!r} outside [{lo},{hi}]")
    if kind is TransformKind.SCALE and theta <= 0:
        raise ValueError("scale factor must be positive")


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind
    theta: float | int | str

    def __post_init__(self):
        _check_theta(self.kind, self.theta)


@dataclass(frozen=True)
class ParamRange:
    """Neighborhood [center-radius, center+radius] within one kind's domain."""

    kind: TransformKind
    center: float | int | str
    radius: float = 0.0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.kind in DISCRETE_KINDS:
            if self.radius != 0:
                raise ValueError(f"{self.kind.value} is discrete; radius must be 0")
            _check_theta(self.kind, self.center)
            return
        _check_theta(self.kind, self.center)
        lo, hi = KIND_DOMAIN[self.kind]
        if self.center - self.radius < lo or self.center + self.radius > hi:
            raise ValueError(
                f"interval [{self.center - self.radius}, {self.center + self.radius}] "
                f"leaves the {self.kind.value} domain [{lo},{hi}]"
            )

    def contains(self, theta) -> bool:
        if self.kind in DISCRETE_KINDS:
            return theta == self.center
        return self.center - self.radius - 1e-9 <= theta <= self.center + self.radius + 1e-9


# ---------------------------------------------------------------------------
# dispatch


def apply(x: T.Tensor, spec: TransformSpec) -> T.Tensor:
    if not isinstance(spec, TransformSpec):
        raise ValueError(f"not a TransformSpec: {spec!r}")
    if spec.kind is TransformKind.SCALE:
        return scale_bilinear(x, float(spec.theta))
    if spec.kind is TransformKind.BLUR:
        return gaussian_blur(x, float(spec.theta))
    if spec.kind is TransformKind.GAMMA:
        return gamma_correct(x, float(spec.theta))
    if spec.kind is TransformKind.JPEG:
        return jpeg_diff(x, int(spec.theta))
    if spec.kind is TransformKind.FLIP:
        return flip(x, str(spec.theta))
    if spec.kind is TransformKind.PERSPECTIVE:
        return perspective(x, int(spec.theta))
    raise ValueError(f"unhandled kind {spec.kind}")


def apply_np(x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Forward-only convenience for evaluation paths."""
    return apply(T.Tensor(x), spec).data


# ---------------------------------------------------------------------------
# scaling


def scale_coords(H: int, W: int, S: float) -> tuple[int, int, np.ndarray]:
    Ho, Wo = int(round(S * H)), int(round(S * W))
    if Ho < 1 or Wo < 1:
        raise ValueError(f"scale {S} collapses a {H}x{W} image")
    # src = (dst + 0.5)/S - 0.5 keeps S=1 an exact identity
    rs = (np.arange(Ho, dtype=np.float64) + 0.5) / S - 0.5
    cs = (np.arange(Wo, dtype=np.float64) + 0.5) / S - 0.5
    rr, cc = np.meshgrid(rs, cs, indexing="ij")
    return Ho, Wo, np.stack([rr, cc], axis=-1)


def scale_bilinear(x: T.Tensor, S: float) -> T.Tensor:
    if S <= 0:
        raise ValueError("scale factor must be positive")
    C, H, W = x.data.shape
    if S == 1.0:
        return x
    _, _, coords = scale_coords(H, W, S)
    return T.grid_sample_bilinear(x, coords, mode="border")


# ---------------------------------------------------------------------------
# blur


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalized 5x5 gaussian, K(i,j) ~ exp(-(i^2+j^2)/(2 sigma^2))."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    ij = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(ij[:, None] ** 2 + ij[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(x: T.Tensor, sigma: float) -> T.Tensor:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma <= BLUR_IDENTITY_SIGMA:
        return x
    C, H, W = x.data.shape
    k = T.Tensor(blur_kernel(sigma).reshape(1, 1, 5, 5).astype(x.dtype))
    as_batch = T.reshape(x, (C, 1, H, W))  # depthwise: channels become the batch
    out = T.conv2d(as_batch, k, padding=2, pad_mode="reflect")
    return T.reshape(out, (C, H, W))


# ---------------------------------------------------------------------------
# gamma


def gamma_correct(x: T.Tensor, gamma: float) -> T.Tensor:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if gamma == 1.0:
        return x
    return T.pow_const(T.clamp(x, GAMMA_FLOOR, 1.0), gamma)


# ---------------------------------------------------------------------------
# JPEG

# JPEG Annex K base quantization tables
LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_QTABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# BT.601 RGB -> YCbCr on [0,255] values; offsets (0,128,128)
RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)
YCC_OFFSET = np.array([0.0, 128.0, 128.0], dtype=np.float64)
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)


def scaled_qtable(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling: 5000/Q below 50, else 200-2Q; entries in [1,255]."""
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in [1,100], got {quality!r}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def dct_matrix(dtype=np.float64) -> np.ndarray:
    """Orthonormal 8-point DCT-II matrix."""
    n = np.arange(8, dtype=np.float64)
    D = np.cos((2.0 * n[None, :] + 1.0) * n[:, None] * np.pi / 16.0)
    D[0] *= math.sqrt(1.0 / 2.0)
    return (D * math.sqrt(2.0 / 8.0)).astype(dtype)


def _jpeg_pipeline(x: T.Tensor, quality: int, rounding: str) -> tuple[T.Tensor, T.Tensor]:
    """Shared jpeg_diff / jpeg_hard path; returns (image, quantized coefficients)."""
    if x.data.ndim != 3 or x.data.shape[0] != 3:
        raise ValueError(f"JPEG expects a [3,H,W] image, got {x.data.shape}")
    _, H, W = x.data.shape
    dtype = x.dtype
    Hp = (H + 7) // 8 * 8
    Wp = (W + 7) // 8 * 8

    v = T.mul(x, 255.0)
    flat = T.reshape(v, (3, H * W))
    ycc = T.add(
        T.matmul(T.Tensor(RGB_TO_YCC.astype(dtype)), flat),
        T.Tensor(np.broadcast_to(YCC_OFFSET[:, None], (3, H * W)).astype(dtype)),
    )
    ycc = T.sub(T.reshape(ycc, (3, H, W)), 128.0)
    if (Hp, Wp) != (H, W):
        ycc = T.pad2d(ycc, ((0, Hp - H), (0, Wp - W)), mode="edge")

    nbh, nbw = Hp // 8, Wp // 8
    nblocks = 3 * nbh * nbw
    blocks = T.reshape(
        T.transpose(T.reshape(ycc, (3, nbh, 8, nbw, 8)), (0, 1, 3, 2, 4)), (nblocks, 8, 8)
    )

    D = T.Tensor(dct_matrix(dtype))
    Dt = T.Tensor(dct_matrix(dtype).T)
    coeffs = T.matmul(T.matmul(D, blocks), Dt)

    qtab = np.empty((3, 8, 8), dtype=np.float64)
    qtab[0] = scaled_qtable(LUMA_QTABLE, quality)
    qtab[1] = qtab[2] = scaled_qtable(CHROMA_QTABLE, quality)
    qtile = T.Tensor(
        np.broadcast_to(qtab[:, None], (3, nbh * nbw, 8, 8)).reshape(nblocks, 8, 8).astype(dtype)
    )

    scaled = T.div(coeffs, qtile)
    if rounding == "smooth":
        quantized = T.round_smooth(scaled)
    elif rounding == "hard":
        quantized = T.round_hard(scaled)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")

    rec = T.matmul(T.matmul(Dt, T.mul(quantized, qtile)), D)
    ycc_rec = T.reshape(
        T.transpose(T.reshape(rec, (3, nbh, nbw, 8, 8)), (0, 1, 3, 2, 4)), (3, Hp, Wp)
    )
    if (Hp, Wp) != (H, W):
        ycc_rec = T.crop2d(ycc_rec, 0, 0, H, W)
    ycc_rec = T.add(ycc_rec, 128.0)
    flat_rec = T.sub(
        T.reshape(ycc_rec, (3, H * W)),
        T.Tensor(np.broadcast_to(YCC_OFFSET[:, None], (3, H * W)).astype(dtype)),
    )
    rgb = T.matmul(T.Tensor(YCC_TO_RGB.astype(dtype)), flat_rec)
    out = T.clamp(T.div(T.reshape(rgb, (3, H, W)), 255.0), 0.0, 1.0)
    return out, quantized


def jpeg_diff(x: T.Tensor, quality: int) -> T.Tensor:
    """JPEG round trip with the cubic rounding surrogate; differentiable."""
    out, _ = _jpeg_pipeline(x, quality, rounding="smooth")
    return out


def jpeg_hard(x: T.Tensor | np.ndarray, quality: int) -> np.ndarray:
    """Exact-rounding JPEG round trip; forward-only (defense and oracle)."""
    if isinstance(x, np.ndarray):
        x = T.Tensor(x)
    out, _ = _jpeg_pipeline(T.Tensor(x.data), quality, rounding="hard")
    return out.data


# ---------------------------------------------------------------------------
# flip


def flip(x: T.Tensor, mode: str) -> T.Tensor:
    if mode == "none":
        return x
    if mode == "horizontal":
        return T.flip_axis(x, 2)
    if mode == "vertical":
        return T.flip_axis(x, 1)
    raise ValueError(f"flip mode must be one of {FLIP_MODES}, got {mode!r}")


# ---------------------------------------------------------------------------
# perspective


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from 4 point correspondences (h33 = 1)."""
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((xs, ys), (xd, yd)) in enumerate(zip(src, dst)):
        A[2 * i] = [xs, ys, 1, 0, 0, 0, -xs * xd, -ys * xd]
        A[2 * i + 1] = [0, 0, 0, xs, ys, 1, -xs * yd, -ys * yd]
        b[2 * i] = xd
        b[2 * i + 1] = yd
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"degenerate perspective mapping: {exc}") from exc
    return np.append(h, 1.0).reshape(3, 3)


def perspective_coords(H: int, W: int, preset: int) -> np.ndarray:
    """Inverse-mapped source (row, col) coords for each destination pixel."""
    # corner moves are fractions of the image size (0.25 / 0.75), so the
    # 224-pixel presets carry over to any resolution
    tl, tr = (0.0, 0.0), (W - 1.0, 0.0)
    bl, br = (0.0, H - 1.0), (W - 1.0, H - 1.0)
    if preset == 2:  # top edge pulled inward: viewed from above
        dst = [(0.25 * W, 0.25 * H), (0.75 * W, 0.25 * H), bl, br]
    elif preset == 3:  # bottom edge pulled inward: viewed from below
        dst = [tl, tr, (0.25 * W, 0.75 * H), (0.75 * W, 0.75 * H)]
    else:
        raise ValueError("coords only defined for presets 2 and 3")
    G = _homography(np.array([tl, tr, bl, br]), np.array(dst))
    Ginv = np.linalg.inv(G)
    xd, yd = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    ones = np.ones_like(xd)
    pts = Ginv @ np.stack([xd.ravel(), yd.ravel(), ones.ravel()])
    if np.any(np.abs(pts[2]) < 1e-12):
        raise ValueError("degenerate perspective mapping: points at infinity")
    xs = (pts[0] / pts[2]).reshape(H, W)
    ys = (pts[1] / pts[2]).reshape(H, W)
    return np.stack([ys, xs], axis=-1)


def perspective(x: T.Tensor, preset: int) -> T.Tensor:
    if preset not in PERSPECTIVE_PRESETS:
        raise ValueError(f"perspective preset must be 1, 2 or 3, got {preset!r}")
    if preset == 1:
        return x
    _, H, W = x.data.shape
    coords = perspective_coords(H, W, preset)
    return T.grid_sample_bilinear(x, coords, mode="zeros")


# ---------------------------------------------------------------------------
# parameter sampling


def sample_param(prange: ParamRange, rng: SplitMix64) -> TransformSpec:
    """theta ~ uniform on [center-radius, center+radius]; JPEG rounds to int."""
    if prange.radius == 0:
        return TransformSpec(prange.kind, prange.center)
    theta = prange.center + (2.0 * rng.uniform() - 1.0) * prange.radius
    if prange.kind is TransformKind.JPEG:
        theta = int(min(100, max(1, round(theta))))
    return TransformSpec(prange.kind, theta)


def param_grid(prange: ParamRange, step: float) -> list[TransformSpec]:
    """{center-r, center-r+step, ...} inclusive of endpoints on the lattice."""
    if step <= 0:
        raise ValueError("step must be positive")
    if prange.radius == 0:
        return [TransformSpec(prange.kind, prange.center)]
    count = int(math.floor(2.0 * prange.radius / step + 1e-9)) + 1
    thetas = [prange.center - prange.radius + i * step for i in range(count)]
    if prange.kind is TransformKind.JPEG:
        thetas = [int(min(100, max(1, round(t)))) for t in thetas]
    return [TransformSpec(prange.kind, t) for t in thetas]
