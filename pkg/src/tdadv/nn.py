"""Small convolutional classifier trained from scratch.

Global average pooling (instead of flatten) lets the net classify inputs of
any spatial size >= 8, which scale-dependent attacks need.  Weights freeze
after training; attacks and evaluation only read them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledImage, StorageError
from .rng import SplitMix64, derive_seed

TDAW_MAGIC = b"TDAW"


@dataclass
class ModelConfig:
    num_classes: int
    widths: tuple[int, ...] = (16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ValueError("widths must be three positive conv widths")


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    augment_flip: bool = True
    augment_scale_jitter: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.momentum < 0:
            raise ValueError("hyperparameters must be positive")


@dataclass
class Model:
    config: ModelConfig
    weights: dict[str, T.Tensor]
    frozen: bool = False
    train_metrics: list[dict] = field(default_factory=list)


def build_model(cfg: ModelConfig) -> Model:
    """He-initialized conv3(C->w0) conv3(w0->w1) pool conv3(w1->w2) gap dense."""
    rng = SplitMix64(derive_seed(cfg.seed, "model-init"))
    w0, w1, w2 = cfg.widths
    weights: dict[str, T.Tensor] = {}

    def he_kernel(name, out_c, in_c, k=3):
        fan_in = in_c * k * k
        vals = rng.normal_block(out_c * fan_in, sigma=np.sqrt(2.0 / fan_in))
        weights[name] = T.Tensor(vals.reshape(out_c, in_c, k, k).astype(np.float32))
        weights[name.replace("kernel", "bias")] = T.Tensor(np.zeros(out_c, dtype=np.float32))

    he_kernel("conv1.kernel", w0, 3)
    he_kernel("conv2.kernel", w1, w0)
    he_kernel("conv3.kernel", w2, w1)
    dvals = rng.normal_block(w2 * cfg.num_classes, sigma=np.sqrt(2.0 / w2))
    weights["dense.weight"] = T.Tensor(dvals.reshape(w2, cfg.num_classes).astype(np.float32))
    weights["dense.bias"] = T.Tensor(np.zeros(cfg.num_classes, dtype=np.float32))
    return Model(cfg, weights)


def forward(model: Model, batch: T.Tensor) -> T.Tensor:
    """[N,C,H,W] -> logits [N,K]; requires H,W >= 8."""
    if batch.data.ndim != 4:
        raise ValueError(f"expected [N,C,H,W], got {batch.data.shape}")
    if batch.data.shape[2] < 8 or batch.data.shape[3] < 8:
        raise ValueError(f"spatial size must be >= 8, got {batch.data.shape[2:]}")
    w = model.weights
    centered = T.sub(batch, 0.5)  # zero-centered pixels train much faster
    h = T.relu(T.add_chanvec(T.conv2d(centered, w["conv1.kernel"], padding=1), w["conv1.bias"]))
    h = T.relu(T.add_chanvec(T.conv2d(h, w["conv2.kernel"], padding=1), w["conv2.bias"]))
    h = T.max_pool2d(h, 2)
    h = T.relu(T.add_chanvec(T.conv2d(h, w["conv3.kernel"], padding=1), w["conv3.bias"]))
    h = T.global_avg_pool(h)
    return T.add_rowvec(T.matmul(h, w["dense.weight"]), w["dense.bias"])


def predict(model: Model, image: np.ndarray | T.Tensor) -> int:
    """Argmax label; ties resolve to the lowest class index."""
    data = image.data if isinstance(image, T.Tensor) else image
    logits = forward(model, T.Tensor(data[None])).data[0]
    return int(np.argmax(logits))


def accuracy(model: Model, images: list[LabeledImage], batch_size: int = 128) -> float:
    if not images:
        raise ValueError("empty evaluation set")
    correct = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        batch = T.Tensor(np.stack([im.image for im in chunk]))
        preds = np.argmax(forward(model, batch).data, axis=1)
        correct += int(sum(p == im.label for p, im in zip(preds, chunk)))
    return correct / len(images)


# ---------------------------------------------------------------------------
# training


def _resize_np(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, H, W = img.shape
    rs = (np.arange(out_h, dtype=np.float64) + 0.5) * (H / out_h) - 0.5
    cs = (np.arange(out_w, dtype=np.float64) + 0.5) * (W / out_w) - 0.5
    rr, cc = np.meshgrid(rs, cs, indexing="ij")
    coords = np.stack([rr, cc], axis=-1)
    return T.grid_sample_bilinear(T.Tensor(img), coords, mode="border").data


# native-size jitter draws from the evaluation-relevant scale bands only;
# sizes between bands stay untrained so per-band behavior can diverge
JITTER_BANDS = ((0.4, 0.6), (0.9, 1.1), (1.4, 1.6))


def _augment(img: np.ndarray, cfg: TrainConfig, rng: SplitMix64) -> np.ndarray:
    if cfg.augment_flip and rng.uniform() < 0.5:
        img = np.ascontiguousarray(img[:, :, ::-1])
    return img


def train(model: Model, images: list[LabeledImage], cfg: TrainConfig) -> Model:
    """SGD with momentum on softmax cross-entropy; freezes the model at the end."""
    if model.frozen:
        raise ValueError("model is frozen")
    if not images:
        raise ValueError("empty training set")
    if any(im.label >= model.config.num_classes or im.label < 0 for im in images):
        raise ValueError("label outside [0, num_classes)")
    shapes = {im.image.shape for im in images}
    if len(shapes) != 1:
        raise ValueError("training batch requires equally sized images")

    for w in model.weights.values():
        w.requires_grad = True
    velocity = {name: np.zeros_like(w.data) for name, w in model.weights.items()}
    rng = SplitMix64(derive_seed(cfg.seed, "train"))
    order = list(range(len(images)))

    for epoch in range(cfg.epochs):
        # cfg.learning_rate is the peak of a fixed 1x / 0.25x / 0.05x step decay
        frac = epoch / cfg.epochs
        lr = cfg.learning_rate * (1.0 if frac < 0.5 else 0.25 if frac < 0.8 else 0.05)
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            augmented = [_augment(images[i].image, cfg, rng) for i in idx]
            if cfg.augment_scale_jitter:
                # one jitter per batch, alternating between two regimes:
                # native-size batches teach the resolutions the evaluation
                # grids use, down-up batches teach lowpass tolerance
                _, H, W = augmented[0].shape
                if rng.uniform() < 0.5:
                    band = JITTER_BANDS[rng.randint(len(JITTER_BANDS))]
                    s = rng.uniform(band[0], band[1])
                    h2 = max(8, round(s * H))
                    w2 = max(8, round(s * W))
                    if (h2, w2) != (H, W):
                        augmented = [_resize_np(im, h2, w2) for im in augmented]
                else:
                    s = rng.uniform(JITTER_BANDS[0][0], 1.0)
                    h2 = max(8, round(s * H))
                    w2 = max(8, round(s * W))
                    if (h2, w2) != (H, W):
                        augmented = [_resize_np(_resize_np(im, h2, w2), H, W) for im in augmented]
            batch_np = np.stack(augmented)
            targets = np.array([images[i].label for i in idx])
            logits = forward(model, T.Tensor(batch_np))
            # smoothing keeps logit margins moderate; without it the toy net
            # grows ~30-nat margins that no epsilon-ball perturbation can move
            loss = T.softmax_cross_entropy(logits, targets, label_smoothing=0.1)
            grads = T.backward(loss)
            for name, w in model.weights.items():
                g = grads[w].data
                velocity[name] = cfg.momentum * velocity[name] + g
                w.data = w.data - lr * velocity[name]
            losses.append(loss.item())
        model.train_metrics.append({"epoch": epoch, "train_loss": float(np.mean(losses))})

    for w in model.weights.values():
        w.requires_grad = False
    model.frozen = True
    return model


# ---------------------------------------------------------------------------
# persistence: magic 'TDAW', u32 version=1, u32 tensor count, per tensor
# u16 name length, name, u8 rank, u32 dims, little-endian f32 row-major


def save_weights(model: Model, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(TDAW_MAGIC)
        fh.write(struct.pack("<II", 1, len(model.weights)))
        for name in sorted(model.weights):
            data = model.weights[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_weights(path: str | Path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TDAW_MAGIC:
        raise StorageError(f"{path}: bad magic")
    if len(raw) < 12:
        raise StorageError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise StorageError(f"{path}: unsupported version {version}")
    pos = 12
    weights: dict[str, T.Tensor] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            body = raw[pos : pos + 4 * size]
            if len(body) != 4 * size:
                raise StorageError(f"{path}: truncated tensor {name!r}")
            pos += 4 * size
            weights[name] = T.Tensor(np.frombuffer(body, dtype="<f4").reshape(dims).copy())
        except struct.error as exc:
            raise StorageError(f"{path}: truncated file: {exc}") from exc
    expected = {"conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias", "conv3.kernel", "conv3.bias", "dense.weight", "dense.bias"}
    if set(weights) != expected:
        raise StorageError(f"{path}: tensor names {sorted(weights)} do not form a classifier")
    widths = tuple(weights[f"conv{i}.kernel"].data.shape[0] for i in (1, 2, 3))
    if weights["conv1.kernel"].data.shape[1] != 3 or weights["dense.weight"].data.shape[0] != widths[2]:
        raise StorageError(f"{path}: inconsistent tensor shapes")
    cfg = ModelConfig(num_classes=weights["dense.weight"].data.shape[1], widths=widths)
    return Model(cfg, weights, frozen=True)
