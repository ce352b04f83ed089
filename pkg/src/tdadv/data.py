"""Datasets and on-disk formats.

The synthetic generator renders five anti-aliased shapes in two colorways
(10 classes) on textured backgrounds, entirely from the SplitMix64 stream,
so acceptance runs need no downloads and reproduce bit-for-bit anywhere.
Interchange formats are codec-free: binary P6 PPM for images, 'TDAP' for
perturbations (see save_perturbation for the byte layout).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "ring")
COLORWAYS = ("warm", "cool")


class StorageError(Exception):
    """Malformed or inconsistent on-disk artifact."""


@dataclass
class LabeledImage:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    label: int
    id: str


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    image_size: int = 32
    samples_per_class: int = 500
    seed: int = 7

    def __post_init__(self):
        if self.num_classes != 10:
            raise ValueError("the shapes dataset is 5 shapes x 2 colorways = 10 classes")
        if self.image_size < 16:
            raise ValueError("image size must be >= 16")


@dataclass
class Dataset:
    train: list[LabeledImage] = field(default_factory=list)
    test: list[LabeledImage] = field(default_factory=list)
    num_classes: int = 10

    @staticmethod
    def from_images(images: list[LabeledImage], num_classes: int = 10) -> "Dataset":
        """80/20 split keyed on the id hash, stable across reloads."""
        ds = Dataset(num_classes=num_classes)
        for im in images:
            (ds.test if derive_seed(0xD5, im.id) % 5 == 4 else ds.train).append(im)
        return ds


# ---------------------------------------------------------------------------
# synthetic shapes


def _rot(py, px, angle):
    c, s = np.cos(angle), np.sin(angle)
    return c * py - s * px, s * py + c * px


def _shape_sdf(shape: str, py, px, radius):
    """Signed distance (<0 inside) for one of the five shapes."""
    if shape == "circle":
        return np.hypot(py, px) - radius
    if shape == "square":
        h = 0.82 * radius
        return np.maximum(np.abs(py), np.abs(px)) - h
    if shape == "triangle":
        d = -np.inf * np.ones_like(py)
        for ang in (np.pi / 6, np.pi * 5 / 6, np.pi * 3 / 2):
            ny, nx = np.sin(ang), np.cos(ang)
            d = np.maximum(d, ny * py + nx * px - radius * 0.5)
        return d
    if shape == "cross":
        w = 0.36 * radius
        bar1 = np.maximum(np.abs(py) - w, np.abs(px) - radius)
        bar2 = np.maximum(np.abs(py) - radius, np.abs(px) - w)
        return np.minimum(bar1, bar2)
    if shape == "ring":
        return np.abs(np.hypot(py, px) - 0.72 * radius) - 0.30 * radius
    raise ValueError(f"unknown shape {shape!r}")


def _palette_color(rng: SplitMix64, colorway: str) -> np.ndarray:
    u = rng.uniform_block(3)
    if colorway == "warm":
        return np.array([0.70 + 0.28 * u[0], 0.15 + 0.40 * u[1], 0.05 + 0.18 * u[2]])
    return np.array([0.05 + 0.18 * u[2], 0.25 + 0.40 * u[1], 0.65 + 0.33 * u[0]])


def _render_sample(size: int, shape_idx: int, colorway_idx: int, rng: SplitMix64) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")

    # textured background: soft two-corner gradient plus two random gratings,
    # structured nuisance the net has to explain away (natural-image stand-in)
    u = rng.uniform_block(8)
    base = 0.40 + 0.15 * u[0]
    tint = 0.05 * (u[1:4] - 0.5)
    gx, gy = 0.16 * (u[4] - 0.5), 0.16 * (u[5] - 0.5)
    bg = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    bg = np.repeat(bg[None], 3, axis=0) + tint[:, None, None]
    for _ in range(2):
        g = rng.uniform_block(7)
        freq = 2.0 + 8.0 * g[0]
        ang = np.pi * g[1]
        phase = 2 * np.pi * g[2]
        wave = np.sin(2 * np.pi * freq * ((np.cos(ang) * xx + np.sin(ang) * yy) / size) + phase)
        amp = 0.05 * (0.4 + 0.6 * g[3]) * (0.5 + g[4:7])
        bg += amp[:, None, None] * wave[None]

    cy = size * (0.38 + 0.24 * u[6])
    cx = size * (0.38 + 0.24 * u[7])
    u2 = rng.uniform_block(4)
    radius = size * (0.28 + 0.10 * u2[0])
    # bounded rotation jitter keeps orientation cues learnable at desk scale
    angle = 0.7 * (u2[1] - 0.5)
    py, px = _rot(yy - cy, xx - cx, angle)
    sdf = _shape_sdf(SHAPE_NAMES[shape_idx], py, px, radius)
    alpha = np.clip(0.5 - sdf / 1.2, 0.0, 1.0)  # ~1.2 px anti-aliased edge

    color = _palette_color(rng, COLORWAYS[colorway_idx])
    # inner shading gradient so shape interiors carry structure too
    shade = 1.0 + 0.25 * (u2[2] - 0.5) * (py + px) / max(radius, 1e-9)
    fg = np.clip(color[:, None, None] * shade[None], 0.0, 1.0)
    img = bg * (1 - alpha[None]) + fg * alpha[None]

    noise = 0.035 * (rng.uniform_block(3 * size * size).reshape(3, size, size) - 0.5)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def gen_synthetic(spec: SyntheticSpec, rng: SplitMix64 | None = None) -> Dataset:
    """Balanced 10-class dataset; deterministic given the spec seed."""
    base_seed = spec.seed if rng is None else rng.seed
    images: list[LabeledImage] = []
    for label in range(spec.num_classes):
        shape_idx, colorway_idx = divmod(label, 2)
        for k in range(spec.samples_per_class):
            sample_id = f"synth-{label:02d}-{k:05d}"
            srng = SplitMix64(derive_seed(base_seed, sample_id))
            images.append(
                LabeledImage(_render_sample(spec.image_size, shape_idx, colorway_idx, srng), label, sample_id)
            )
    return Dataset.from_images(images, spec.num_classes)


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)


def save_ppm(image: np.ndarray, path: str | Path) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got {image.shape}")
    _, h, w = image.shape
    body = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.transpose(1, 2, 0).tobytes())


def load_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise StorageError(f"{path}: not a binary P6 PPM")
    # header: magic, width, height, maxval as whitespace-separated tokens
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise StorageError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise StorageError(f"{path}: bad header field: {exc}") from exc
    if maxval != 255:
        raise StorageError(f"{path}: maxval must be 255, got {maxval}")
    body = raw[pos : pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise StorageError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def load_dataset(directory: str | Path, labels_file: str | Path) -> list[LabeledImage]:
    """Load `<filename>,<int label>` entries; stable ordering by filename."""
    directory = Path(directory)
    entries: dict[str, int] = {}
    with open(labels_file, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise StorageError(f"{labels_file}:{lineno}: expected '<filename>,<label>'")
            name, label_s = parts[0].strip(), parts[1].strip()
            if name in entries:
                raise StorageError(f"{labels_file}:{lineno}: duplicate filename {name!r}")
            try:
                entries[name] = int(label_s)
            except ValueError as exc:
                raise StorageError(f"{labels_file}:{lineno}: bad label {label_s!r}") from exc
    images = []
    for name in sorted(entries):
        path = directory / name
        if not path.exists():
            raise StorageError(f"missing image file {path}")
        images.append(LabeledImage(load_ppm(path), entries[name], Path(name).stem))
    return images


def save_dataset_ppm(images: list[LabeledImage], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels_path = directory / "labels.csv"
    with open(labels_path, "w", encoding="utf-8") as fh:
        for im in sorted(images, key=lambda i: i.id):
            save_ppm(im.image, directory / f"{im.id}.ppm")
            fh.write(f"{im.id}.ppm,{im.label}\n")
    return labels_path


# ---------------------------------------------------------------------------
# perturbation files: magic 'TDAP', u32 version=1, u32 C,H,W, f32 epsilon,
# 8-byte plan fingerprint, then C*H*W little-endian f32 row-major

TDAP_MAGIC = b"TDAP"


def save_perturbation(delta: np.ndarray, epsilon: float, fingerprint: bytes, path: str | Path) -> None:
    if delta.ndim != 3:
        raise ValueError("delta must be [C,H,W]")
    if len(fingerprint) != 8:
        raise ValueError("fingerprint must be 8 bytes")
    c, h, w = delta.shape
    with open(path, "wb") as fh:
        fh.write(TDAP_MAGIC)
        fh.write(struct.pack("<IIII", 1, c, h, w))
        fh.write(struct.pack("<f", epsilon))
        fh.write(fingerprint)
        fh.write(delta.astype("<f4").tobytes())


def load_perturbation(path: str | Path) -> tuple[np.ndarray, float, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TDAP_MAGIC:
        raise StorageError(f"{path}: bad magic")
    if len(raw) < 4 + 16 + 4 + 8:
        raise StorageError(f"{path}: truncated header")
    version, c, h, w = struct.unpack_from("<IIII", raw, 4)
    if version != 1:
        raise StorageError(f"{path}: unsupported version {version}")
    (epsilon,) = struct.unpack_from("<f", raw, 20)
    fingerprint = raw[24:32]
    body = raw[32:]
    if len(body) != 4 * c * h * w:
        raise StorageError(f"{path}: payload size mismatch")
    delta = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)
    if np.abs(delta).max() > epsilon * (1 + 1e-6):
        raise StorageError(f"{path}: ||delta||_inf exceeds stored epsilon {epsilon}")
    return delta, float(epsilon), fingerprint
