"""Measurement protocols: ASR grids, loss landscapes, blackbox transfer,
prediction consistency, defended-model evaluation, target-capacity sweeps.

Everything here is pure measurement over frozen inputs; nothing mutates the
model or the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from . import transforms as tf
from .attack import AttackPlan, Perturbation, run_attack
from .rng import SplitMix64, derive_seed

PredictFn = Callable[[np.ndarray], int]

# interval each kind's capacity sweep spreads its centers over
SWEEP_DOMAIN = {
    tf.TransformKind.SCALE: (0.4, 1.6),
    tf.TransformKind.BLUR: (0.4, 3.0),
    tf.TransformKind.GAMMA: (0.4, 2.0),
    tf.TransformKind.JPEG: (20, 80),
}
MIN_CENTER_SPACING = {tf.TransformKind.JPEG: 2.0}
DEFAULT_MIN_SPACING = 0.05


@dataclass
class PairRecord:
    kind: str
    center: float | int | str
    radius: float
    target: int
    thetas: list
    successes: list[bool]

    @property
    def asr(self) -> float:
        return 100.0 * sum(self.successes) / len(self.successes)


@dataclass
class EvalReport:
    mode: str
    pairs: list[PairRecord] = field(default_factory=list)

    @property
    def average_asr(self) -> float:
        return float(np.mean([p.asr for p in self.pairs]))

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "pairs": [
                {
                    "kind": p.kind,
                    "center": p.center,
                    "radius": p.radius,
                    "target": p.target,
                    "thetas": p.thetas,
                    "successes": p.successes,
                    "asr": p.asr,
                }
                for p in self.pairs
            ],
            "average_asr": self.average_asr,
        }


@dataclass
class LandscapeSample:
    theta: float
    losses: list[float]


@dataclass
class TransferResult:
    pairs: list[dict]  # {target, found_theta (or None), queries}

    @property
    def any_success(self) -> bool:
        return any(p["found_theta"] is not None for p in self.pairs)


def _default_predict(model: nn.Model) -> PredictFn:
    return lambda img: nn.predict(model, img)


def _adv_image(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(x + delta, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# ASR over parameter grids


def eval_asr(
    model: nn.Model,
    x: np.ndarray,
    perturbation: Perturbation,
    plan: AttackPlan,
    step: float,
    y_true: int | None = None,
    predict_fn: PredictFn | None = None,
) -> EvalReport:
    """Success = prediction matches the pair target (targeted mode) or
    differs from y_true (untargeted), over each pair's parameter grid."""
    perturbation.validate(x)
    if plan.mode == "untargeted" and y_true is None:
        raise ValueError("untargeted evaluation needs the ground-truth label")
    predict = predict_fn or _default_predict(model)
    adv = _adv_image(x, perturbation.delta)
    report = EvalReport(mode=plan.mode)
    for prange, target in plan.pairs:
        grid = tf.param_grid(prange, step)
        if not grid:
            raise ValueError("empty parameter grid")
        successes = []
        for spec in grid:
            pred = predict(tf.apply_np(adv, spec))
            successes.append(pred == target if plan.mode == "targeted" else pred != y_true)
        report.pairs.append(
            PairRecord(prange.kind.value, prange.center, prange.radius, target, [s.theta for s in grid], successes)
        )
    return report


# ---------------------------------------------------------------------------
# loss landscape


def loss_landscape(
    model: nn.Model,
    x: np.ndarray,
    delta: np.ndarray,
    kind: tf.TransformKind,
    theta_lo: float,
    theta_hi: float,
    step: float,
    targets: list[int],
) -> list[LandscapeSample]:
    """Cross-entropy against each target over a theta sweep of one kind."""
    if not theta_lo < theta_hi:
        raise ValueError("need theta_lo < theta_hi")
    adv = _adv_image(x, delta)
    count = int(np.floor((theta_hi - theta_lo) / step + 1e-9)) + 1
    samples = []
    for i in range(count):
        theta = theta_lo + i * step
        spec = tf.TransformSpec(kind, int(round(theta)) if kind is tf.TransformKind.JPEG else theta)
        out = tf.apply_np(adv, spec)
        logits = nn.forward(model, T.Tensor(out[None])).data[0].astype(np.float64)
        lse = float(np.log(np.exp(logits - logits.max()).sum()) + logits.max())
        samples.append(LandscapeSample(theta, [lse - float(logits[t]) for t in targets]))
    return samples


def landscape_to_csv(samples: list[LandscapeSample]) -> str:
    """theta,loss_target_1,... with 9-significant-digit decimal text."""
    if not samples:
        raise ValueError("no landscape samples")
    n = len(samples[0].losses)
    lines = ["theta," + ",".join(f"loss_target_{i + 1}" for i in range(n))]
    for s in samples:
        lines.append(",".join(f"{v:.9g}" for v in [s.theta, *s.losses]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# blackbox transfer


def blackbox_transfer(
    bb_model: nn.Model,
    x: np.ndarray,
    perturbation: Perturbation,
    plan: AttackPlan,
    step: float,
    y_true: int | None = None,
    predict_fn: PredictFn | None = None,
) -> TransferResult:
    """Query the blackbox model over each pair's grid in ascending order,
    stopping at the first success."""
    if plan.mode == "untargeted" and y_true is None:
        raise ValueError("untargeted transfer needs the ground-truth label")
    predict = predict_fn or _default_predict(bb_model)
    adv = _adv_image(x, perturbation.delta)
    results = []
    for prange, target in plan.pairs:
        grid = tf.param_grid(prange, step)
        found = None
        queries = 0
        for spec in grid:
            queries += 1
            pred = predict(tf.apply_np(adv, spec))
            hit = pred == target if plan.mode == "targeted" else pred != y_true
            if hit:
                found = spec.theta
                break
        results.append({"target": target, "found_theta": found, "queries": queries})
    return TransferResult(results)


# ---------------------------------------------------------------------------
# consistency


def consistency(
    model: nn.Model,
    x: np.ndarray,
    delta: np.ndarray,
    specs: list[tf.TransformSpec],
    predict_fn: PredictFn | None = None,
) -> dict:
    """Does the prediction survive each transform, on the perturbed image
    (f(T(x+d)) == f(x+d)) and on the clean one (f(T(x)) == f(x))."""
    predict = predict_fn or _default_predict(model)
    adv = _adv_image(x, delta)
    base_adv = predict(adv)
    base_clean = predict(x.astype(np.float32))
    adv_flags = [predict(tf.apply_np(adv, s)) == base_adv for s in specs]
    clean_flags = [predict(tf.apply_np(x.astype(np.float32), s)) == base_clean for s in specs]
    return {
        "adv_consistent": adv_flags,
        "clean_consistent": clean_flags,
        "adv_rate": 100.0 * sum(adv_flags) / len(specs),
        "clean_rate": 100.0 * sum(clean_flags) / len(specs),
    }


# ---------------------------------------------------------------------------
# defenses


@dataclass(frozen=True)
class DefenseSpec:
    kind: str  # "jpeg" | "randomized_smoothing"
    jpeg_quality: int = 75
    num_samples: int = 25
    noise_sigma: float = 0.12

    def __post_init__(self):
        if self.kind not in ("jpeg", "randomized_smoothing"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "randomized_smoothing" and self.num_samples < 1:
            raise ValueError("need at least one smoothing sample")


def defended_predict_fn(model: nn.Model, defense: DefenseSpec, rng: SplitMix64) -> PredictFn:
    if defense.kind == "jpeg":
        return lambda img: nn.predict(model, tf.jpeg_hard(img, defense.jpeg_quality))

    def smoothed(img: np.ndarray) -> int:
        votes = np.zeros(model.config.num_classes, dtype=np.int64)
        for _ in range(defense.num_samples):
            noise = rng.normal_block(img.size, sigma=defense.noise_sigma).reshape(img.shape)
            noisy = np.clip(img + noise.astype(np.float32), 0.0, 1.0)
            votes[nn.predict(model, noisy)] += 1
        return int(np.argmax(votes))  # ties resolve to the lowest class

    return smoothed


def defense_eval(
    model: nn.Model,
    defense: DefenseSpec,
    x: np.ndarray,
    perturbation: Perturbation,
    plan: AttackPlan,
    step: float,
    y_true: int,
    rng: SplitMix64,
) -> EvalReport:
    """eval_asr in untargeted mode with the defense prepended to prediction."""
    predict = defended_predict_fn(model, defense, rng)
    untargeted = AttackPlan(
        plan.pairs,
        epsilon=plan.epsilon,
        mode="untargeted",
        optimizer=plan.optimizer,
        iterations=plan.iterations,
        alpha=plan.alpha,
        eot_samples_per_pair=plan.eot_samples_per_pair,
    )
    return eval_asr(model, x, perturbation, untargeted, step, y_true=y_true, predict_fn=predict)


# ---------------------------------------------------------------------------
# capacity sweep


def capacity_centers(kind: tf.TransformKind, n: int):
    lo, hi = SWEEP_DOMAIN[kind]
    min_spacing = MIN_CENTER_SPACING.get(kind, DEFAULT_MIN_SPACING)
    if n > 1 and (hi - lo) / (n - 1) < min_spacing:
        raise ValueError(f"domain [{lo},{hi}] too small for {n} centers spaced >= {min_spacing}")
    if n == 1:
        centers = [(lo + hi) / 2.0]
    else:
        centers = list(np.linspace(lo, hi, n))
    if kind is tf.TransformKind.JPEG:
        centers = [int(round(c)) for c in centers]
    return centers


def capacity_sweep(
    model: nn.Model,
    x: np.ndarray,
    y_true: int,
    kind: tf.TransformKind,
    max_n: int,
    rng: SplitMix64,
    epsilon: float = 16.0 / 255.0,
    iterations: int = 500,
    alpha: float = 1e-3,
) -> list[tuple[int, float]]:
    """Targeted ASR at exact centers as the number of embedded pairs grows.

    Centers are spaced evenly over the kind's sweep domain (the paper's
    adaptive appending rule is unspecified); targets are drawn fresh per N,
    with replacement once N exceeds the number of off-true labels.
    """
    if max_n > 25:
        raise ValueError("capacity sweeps cap at 25 pairs")
    num_classes = model.config.num_classes
    results = []
    for n in range(1, max_n + 1):
        centers = capacity_centers(kind, n)
        others = [c for c in range(num_classes) if c != y_true]
        targets = []
        pool = list(others)
        for _ in range(n):
            if not pool:
                pool = list(others)
            pick = pool[rng.randint(len(pool))]
            targets.append(pick)
            pool.remove(pick)
        plan = AttackPlan(
            [(tf.ParamRange(kind, c, 0.0), t) for c, t in zip(centers, targets)],
            epsilon=epsilon,
            iterations=iterations,
            alpha=alpha,
        )
        pert, _ = run_attack(model, x, y_true, plan, rng)
        report = eval_asr(model, x, pert, plan, step=1.0)
        results.append((n, report.average_asr))
    return results
