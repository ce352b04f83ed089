"""Transform-dependent perturbation crafting.

One additive perturbation is optimized so that applying the i-th transform
parameter to the perturbed image drives the classifier to the i-th target:
minimize sum_i CE(f(T(clamp(x+delta); theta_i)), target_i) over the epsilon
ball, with theta_i redrawn each iteration from its neighborhood (the
expectation-over-parameters form).  Optimizers: single-step FGSM, PGD, MIM,
and a margin-loss (CW) variant under the same projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from . import transforms as tf
from .rng import SplitMix64, mix64

PAPER_ALPHA = 5e-4
PAPER_ITERATIONS = 500
PAPER_EPSILON = 8.0 / 255.0

# parameter-range centers studied per kind (radius 0.1, JPEG radius 1)
PAPER_CENTERS = {
    tf.TransformKind.SCALE: (0.5, 1.0, 1.5),
    tf.TransformKind.BLUR: (0.5, 1.5, 3.0),
    tf.TransformKind.GAMMA: (0.5, 1.0, 2.0),
    tf.TransformKind.JPEG: (20, 50, 80),
    tf.TransformKind.FLIP: ("none", "horizontal", "vertical"),
    tf.TransformKind.PERSPECTIVE: (1, 2, 3),
}


class AttackDiverged(RuntimeError):
    """Non-finite loss encountered during optimization."""


@dataclass(frozen=True)
class OptimizerKind:
    name: str  # fgsm | pgd | mim | cw
    mu: float = 1.0  # MIM momentum
    kappa: float = 0.0  # CW margin

    def __post_init__(self):
        if self.name not in ("fgsm", "pgd", "mim", "cw"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.mu < 0 or self.kappa < 0:
            raise ValueError("mu and kappa must be >= 0")


@dataclass
class AttackPlan:
    pairs: list[tuple[tf.ParamRange, int]]
    epsilon: float = PAPER_EPSILON
    mode: str = "targeted"
    optimizer: OptimizerKind = field(default_factory=lambda: OptimizerKind("pgd"))
    iterations: int = PAPER_ITERATIONS
    alpha: float = PAPER_ALPHA
    eot_samples_per_pair: int = 1

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("plan needs at least one parameter-target pair")
        kinds = {pr.kind for pr, _ in self.pairs}
        if len(kinds) != 1:
            raise ValueError(f"mixed transform kinds in one plan are rejected: {kinds}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"mode must be targeted or untargeted, got {self.mode!r}")
        if self.iterations < 1 or self.alpha <= 0 or self.eot_samples_per_pair < 1:
            raise ValueError("iterations, alpha and eot samples must be positive")

    @property
    def kind(self) -> tf.TransformKind:
        return self.pairs[0][0].kind

    def fingerprint(self) -> bytes:
        """8-byte FNV-1a hash of the canonical JSON form."""
        doc = {
            "pairs": [
                {"kind": pr.kind.value, "center": pr.center, "radius": pr.radius, "target": t}
                for pr, t in self.pairs
            ],
            "epsilon": repr(self.epsilon),
            "mode": self.mode,
            "optimizer": [self.optimizer.name, repr(self.optimizer.mu), repr(self.optimizer.kappa)],
            "iterations": self.iterations,
            "alpha": repr(self.alpha),
            "eot": self.eot_samples_per_pair,
        }
        h = 0xCBF29CE484222325
        for b in json.dumps(doc, sort_keys=True).encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
        return h.to_bytes(8, "little")


@dataclass
class Perturbation:
    delta: np.ndarray  # float32, clean image's shape
    epsilon: float
    plan_fingerprint: bytes

    def validate(self, x: np.ndarray) -> None:
        if self.delta.shape != x.shape:
            raise ValueError("delta shape does not match the image")
        if np.abs(self.delta).max() > self.epsilon * (1 + 1e-6):
            raise ValueError("||delta||_inf exceeds epsilon")
        s = x + self.delta
        if s.min() < 0 or s.max() > 1:
            raise ValueError("x + delta leaves [0,1]")


# ---------------------------------------------------------------------------
# loss


def attack_loss(
    model: nn.Model,
    x: T.Tensor,
    delta: T.Tensor,
    plan: AttackPlan,
    specs: list[tf.TransformSpec],
    y_true: int | None = None,
) -> T.Tensor:
    """Summed per-pair loss at one draw of transform parameters."""
    if len(specs) != len(plan.pairs):
        raise ValueError("need exactly one sampled spec per pair")
    for spec, (prange, _) in zip(specs, plan.pairs):
        if spec.kind is not prange.kind or not prange.contains(spec.theta):
            raise ValueError(f"spec {spec} outside its declared range {prange}")
    if plan.mode == "untargeted" and y_true is None:
        raise ValueError("untargeted mode needs the ground-truth label")

    adv = T.clamp(T.add(x, delta), 0.0, 1.0)
    total: T.Tensor | None = None
    for spec, (_, target) in zip(specs, plan.pairs):
        label = y_true if plan.mode == "untargeted" else target
        transformed = tf.apply(adv, spec)
        logits = nn.forward(model, T.reshape(transformed, (1,) + transformed.data.shape))
        logits_1d = T.reshape(logits, (logits.data.shape[1],))
        if plan.optimizer.name == "cw" and plan.mode == "targeted":
            # margin max(max_{j != t} z_j - z_t, -kappa)
            term = T.clamp(
                T.sub(T.masked_max(logits_1d, label), T.pick(logits_1d, label)),
                -plan.optimizer.kappa,
                np.inf,
            )
        else:
            term = T.softmax_cross_entropy(logits_1d, label)
        total = term if total is None else T.add(total, term)
    if plan.mode == "untargeted":
        total = T.neg(total)  # maximize the true-label loss
    return total


# ---------------------------------------------------------------------------
# steps


def pgd_step(delta: np.ndarray, grad: np.ndarray, alpha: float, epsilon: float) -> np.ndarray:
    """delta - alpha * sign(grad), projected onto the epsilon ball."""
    if delta.shape != grad.shape:
        raise ValueError("delta and gradient shapes disagree")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return np.clip(delta - alpha * np.sign(grad), -epsilon, epsilon)


def _project_box(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the epsilon ball, then pull x+delta into [0,1] exactly.

    Float rounding in (clip(x+delta) - x) can leave a stray ulp; nudge until
    both invariants hold bit-exactly (terminates in a couple of rounds).
    """
    d = np.clip(delta, -epsilon, epsilon)
    for _ in range(8):
        d = np.clip(np.clip(x + d, 0.0, 1.0) - x, -epsilon, epsilon)
        s = x + d
        bad = (s < 0.0) | (s > 1.0)
        if not bad.any():
            return d
        d = np.where(bad, np.nextafter(d, -np.sign(d) * np.inf).astype(d.dtype), d)
    raise AttackDiverged("box projection failed to converge")


def run_attack(
    model: nn.Model,
    x: np.ndarray,
    y_true: int,
    plan: AttackPlan,
    rng: SplitMix64,
) -> tuple[Perturbation, list[float]]:
    """Craft delta for one image; returns the perturbation and the loss trace."""
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image must lie in [0,1]")
    x = x.astype(np.float32)
    eps = np.float32(plan.epsilon)
    delta = np.zeros_like(x)
    momentum = np.zeros_like(x)
    trace: list[float] = []
    iterations = 1 if plan.optimizer.name == "fgsm" else plan.iterations

    for it in range(iterations):
        grad = np.zeros_like(x, dtype=np.float64)
        loss_acc = 0.0
        for _ in range(plan.eot_samples_per_pair):
            specs = [tf.sample_param(pr, rng) for pr, _ in plan.pairs]
            dt = T.Tensor(delta, requires_grad=True)
            loss = attack_loss(model, T.Tensor(x), dt, plan, specs, y_true=y_true)
            grad += T.backward(loss)[dt].data
            loss_acc += loss.item()
        grad = (grad / plan.eot_samples_per_pair).astype(np.float32)
        loss_acc /= plan.eot_samples_per_pair
        if not np.isfinite(loss_acc) or not np.all(np.isfinite(grad)):
            raise AttackDiverged(f"non-finite loss {loss_acc} at iteration {it}")
        trace.append(loss_acc)

        name = plan.optimizer.name
        if name == "fgsm":
            delta = np.clip(-eps * np.sign(grad), -eps, eps).astype(np.float32)
        elif name in ("pgd", "cw"):
            delta = pgd_step(delta, grad, plan.alpha, eps).astype(np.float32)
        elif name == "mim":
            l1 = np.abs(grad).sum()
            momentum = plan.optimizer.mu * momentum + (grad / l1 if l1 > 0 else 0.0)
            delta = pgd_step(delta, momentum, plan.alpha, eps).astype(np.float32)
        delta = _project_box(delta, x, eps)
        assert np.abs(delta).max() <= eps
        s = x + delta
        assert s.min() >= 0.0 and s.max() <= 1.0

    return Perturbation(delta, float(eps), plan.fingerprint()), trace


# ---------------------------------------------------------------------------
# plan construction


def make_plan_from_paper_defaults(
    kind: tf.TransformKind,
    mode: str = "targeted",
    *,
    y_true: int,
    num_classes: int,
    rng: SplitMix64,
    epsilon: float = PAPER_EPSILON,
    iterations: int = PAPER_ITERATIONS,
    alpha: float = PAPER_ALPHA,
    optimizer: OptimizerKind | None = None,
    target_strategy: str = "random",
    model: nn.Model | None = None,
    image: np.ndarray | None = None,
    stealth_center=None,
) -> AttackPlan:
    """Three studied ranges for the kind, with targets drawn off y_true.

    target_strategy 'least_likely' picks the lowest-probability classes from
    model(image) instead of random draws.  stealth_center maps one center to
    y_true so the untransformed image keeps behaving cleanly.
    """
    centers = PAPER_CENTERS[kind]
    radius = 0.0 if kind in tf.DISCRETE_KINDS else (1.0 if kind is tf.TransformKind.JPEG else 0.1)
    n = len(centers)
    if num_classes - 1 < n:
        raise ValueError(f"need at least {n} labels besides the true one")

    if target_strategy == "least_likely":
        if model is None or image is None:
            raise ValueError("least_likely targeting needs a model and an image")
        logits = nn.forward(model, T.Tensor(image[None])).data[0]
        order = [int(i) for i in np.argsort(logits) if int(i) != y_true]
        targets = order[:n]
    elif target_strategy == "random":
        candidates = [c for c in range(num_classes) if c != y_true]
        targets = []
        for _ in range(n):
            pick = candidates[rng.randint(len(candidates))]
            targets.append(pick)
            candidates.remove(pick)
    else:
        raise ValueError(f"unknown target strategy {target_strategy!r}")

    pairs = []
    for center, target in zip(centers, targets):
        if stealth_center is not None and center == stealth_center:
            target = y_true
        pairs.append((tf.ParamRange(kind, center, radius), int(target)))
    return AttackPlan(
        pairs,
        epsilon=epsilon,
        mode=mode,
        optimizer=optimizer or OptimizerKind("pgd"),
        iterations=iterations,
        alpha=alpha,
    )


def derive_attack_rng(seed: int, image_id: str) -> SplitMix64:
    """Per-image stream so concurrent attacks stay order-independent."""
    h = mix64(seed)
    for b in image_id.encode("utf-8"):
        h = mix64(h ^ b)
    return SplitMix64(h)
