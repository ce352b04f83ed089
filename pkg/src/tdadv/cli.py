"""Command-line orchestration.

Subcommands: gen-data, train, attack, eval-asr, landscape, transfer,
defend-eval, capacity.  Every run writes a manifest (effective config,
config hash, versions, timestamp); reports are byte-reproducible given the
same config and seeds (timestamps live only in the manifest).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import attack as atk
from . import data as dt
from . import evaluation as ev
from . import nn
from . import transforms as tf
from .config import ConfigError, RunConfig, build_manifest
from .rng import SplitMix64, derive_seed

KIND_BY_NAME = {k.value: k for k in tf.TransformKind}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _emit_manifest(cfg: RunConfig, out: Path, command: str) -> None:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    _write_json(out / "manifest.json", build_manifest(cfg, command, stamp))


def _load_dataset(cfg: RunConfig) -> dt.Dataset:
    section = cfg["dataset"]
    if section["kind"] == "synthetic":
        spec = dt.SyntheticSpec(
            samples_per_class=section["samples_per_class"],
            image_size=section["image_size"],
            seed=section["seed"],
        )
        return dt.gen_synthetic(spec)
    images = dt.load_dataset(section["directory"], section["labels_file"])
    return dt.Dataset.from_images(images)


def _load_model(cfg: RunConfig) -> nn.Model:
    return nn.load_weights(cfg["model"]["path"])


def _attack_images(cfg: RunConfig, dataset: dt.Dataset, model: nn.Model) -> list[dt.LabeledImage]:
    """First N correctly-classified test images, in id order."""
    picked = []
    for im in sorted(dataset.test, key=lambda i: i.id):
        if nn.predict(model, im.image) == im.label:
            picked.append(im)
        if len(picked) == cfg["attack"]["num_images"]:
            break
    if len(picked) < cfg["attack"]["num_images"]:
        raise ValueError(
            f"only {len(picked)} correctly-classified test images available, "
            f"need {cfg['attack']['num_images']}"
        )
    return picked


def _plan_for_image(cfg: RunConfig, model: nn.Model, image: dt.LabeledImage, rng: SplitMix64) -> atk.AttackPlan:
    a = cfg["attack"]
    kind = KIND_BY_NAME[a["kind"]]
    optimizer = atk.OptimizerKind(a["optimizer"], mu=a["mim_mu"], kappa=a["cw_kappa"])
    centers = a.get("centers")
    if centers is None:
        return atk.make_plan_from_paper_defaults(
            kind,
            a["mode"],
            y_true=image.label,
            num_classes=model.config.num_classes,
            rng=rng,
            epsilon=a["epsilon"],
            iterations=a["iterations"],
            alpha=a["alpha"],
            optimizer=optimizer,
            target_strategy=a["target_strategy"],
            model=model,
            image=image.image,
            stealth_center=a.get("stealth_center"),
        )
    radius = cfg.radius_for(a["kind"])
    others = [c for c in range(model.config.num_classes) if c != image.label]
    pairs = []
    for center in centers:
        target = others[rng.randint(len(others))]
        others.remove(target)
        if a.get("stealth_center") is not None and center == a["stealth_center"]:
            target = image.label
        pairs.append((tf.ParamRange(kind, center, radius), target))
    plan = atk.AttackPlan(
        pairs,
        epsilon=a["epsilon"],
        mode=a["mode"],
        optimizer=optimizer,
        iterations=a["iterations"],
        alpha=a["alpha"],
        eot_samples_per_pair=a["eot_samples_per_pair"],
    )
    return plan


def _pool_map(fn, items, workers: int):
    """Deterministic-order map over a thread pool; workers own their rngs."""
    if workers <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    images = sorted(dataset.train + dataset.test, key=lambda im: im.id)
    labels = dt.save_dataset_ppm(images, out / "images")
    return {
        "images_dir": str(out / "images"),
        "labels_file": str(labels),
        "train_count": len(dataset.train),
        "test_count": len(dataset.test),
    }


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    t = cfg["train"]
    model = nn.build_model(
        nn.ModelConfig(
            num_classes=cfg["model"]["num_classes"],
            widths=tuple(cfg["model"]["widths"]),
            seed=cfg["model"]["seed"],
        )
    )
    nn.train(
        model,
        dataset.train,
        nn.TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            momentum=t["momentum"],
            seed=t["seed"],
            augment_flip=t["augment_flip"],
            augment_scale_jitter=t["augment_scale_jitter"],
        ),
    )
    path = out / Path(cfg["model"]["path"]).name
    nn.save_weights(model, path)
    test_acc = nn.accuracy(model, dataset.test)
    return {
        "model_path": str(path),
        "test_accuracy": test_acc,
        "train_metrics": model.train_metrics,
    }


def cmd_attack(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    images = _attack_images(cfg, dataset, model)
    step = cfg.grid_step_for(cfg["attack"]["kind"])
    seed = cfg["seed"]

    def craft(image: dt.LabeledImage) -> dict:
        rng = atk.derive_attack_rng(seed, image.id)
        plan = _plan_for_image(cfg, model, image, rng)
        pert, trace = atk.run_attack(model, image.image, image.label, plan, rng)
        dt.save_perturbation(pert.delta, pert.epsilon, pert.plan_fingerprint, out / f"{image.id}.tdap")
        report = ev.eval_asr(model, image.image, pert, plan, step, y_true=image.label)
        return {
            "image_id": image.id,
            "label": image.label,
            "plan": _plan_doc(plan),
            "final_loss": trace[-1],
            "report": report.to_json_dict(),
        }

    per_image = _pool_map(craft, images, cfg["workers"])
    per_image.sort(key=lambda r: r["image_id"])
    average = float(np.mean([r["report"]["average_asr"] for r in per_image]))
    return {"images": per_image, "average_asr": average, "grid_step": step}


def _plan_doc(plan: atk.AttackPlan) -> dict:
    return {
        "pairs": [
            {"kind": pr.kind.value, "center": pr.center, "radius": pr.radius, "target": t}
            for pr, t in plan.pairs
        ],
        "epsilon": plan.epsilon,
        "mode": plan.mode,
        "optimizer": plan.optimizer.name,
        "iterations": plan.iterations,
        "alpha": plan.alpha,
        "eot_samples_per_pair": plan.eot_samples_per_pair,
    }


def _plan_from_doc(doc: dict) -> atk.AttackPlan:
    pairs = [
        (tf.ParamRange(KIND_BY_NAME[p["kind"]], p["center"], p["radius"]), p["target"])
        for p in doc["pairs"]
    ]
    return atk.AttackPlan(
        pairs,
        epsilon=doc["epsilon"],
        mode=doc["mode"],
        optimizer=atk.OptimizerKind(doc["optimizer"]),
        iterations=doc["iterations"],
        alpha=doc["alpha"],
        eot_samples_per_pair=doc["eot_samples_per_pair"],
    )


def _load_attack_artifacts(cfg: RunConfig, out: Path, artifacts_dir: Path | None = None):
    """Perturbations and plans from a prior `attack` run directory."""
    src = artifacts_dir or out
    report_path = src / "report.json"
    if not report_path.exists():
        raise FileNotFoundError(f"no attack report at {report_path}; run the attack subcommand first")
    report = json.loads(report_path.read_text())
    dataset = _load_dataset(cfg)
    by_id = {im.id: im for im in dataset.train + dataset.test}
    loaded = []
    for rec in report["images"]:
        image = by_id[rec["image_id"]]
        delta, eps, fp = dt.load_perturbation(src / f"{rec['image_id']}.tdap")
        pert = atk.Perturbation(delta, eps, fp)
        loaded.append((image, pert, _plan_from_doc(rec["plan"])))
    return loaded


def cmd_eval_asr(cfg: RunConfig, out: Path, artifacts_dir: Path | None) -> dict:
    model = _load_model(cfg)
    step = cfg.grid_step_for(cfg["attack"]["kind"])
    records = []
    for image, pert, plan in _load_attack_artifacts(cfg, out, artifacts_dir):
        report = ev.eval_asr(model, image.image, pert, plan, step, y_true=image.label)
        records.append({"image_id": image.id, "report": report.to_json_dict()})
    records.sort(key=lambda r: r["image_id"])
    average = float(np.mean([r["report"]["average_asr"] for r in records]))
    return {"images": records, "average_asr": average, "grid_step": step}


def cmd_landscape(cfg: RunConfig, out: Path, artifacts_dir: Path | None) -> dict:
    model = _load_model(cfg)
    land = cfg["landscape"]
    artifacts = _load_attack_artifacts(cfg, out, artifacts_dir)
    kind = KIND_BY_NAME[cfg["attack"]["kind"]]
    all_rows = []
    for image, pert, plan in artifacts:
        targets = [t for _, t in plan.pairs]
        samples = ev.loss_landscape(
            model, image.image, pert.delta, kind, land["theta_lo"], land["theta_hi"], land["step"], targets
        )
        if land["per_image"]:
            (out / f"{image.id}.landscape.csv").write_text(ev.landscape_to_csv(samples))
        all_rows.append(samples)
    # averaged losses across images, one row per grid point
    thetas = [s.theta for s in all_rows[0]]
    averaged = [
        ev.LandscapeSample(theta, list(np.mean([[l for l in rows[i].losses] for rows in all_rows], axis=0)))
        for i, theta in enumerate(thetas)
    ]
    (out / "landscape.csv").write_text(ev.landscape_to_csv(averaged))
    return {"rows": len(thetas), "images": len(artifacts), "csv": str(out / "landscape.csv")}


def cmd_transfer(cfg: RunConfig, out: Path, artifacts_dir: Path | None) -> dict:
    bb_model = nn.load_weights(cfg["transfer"]["blackbox_model_path"])
    step = cfg.grid_step_for(cfg["attack"]["kind"])
    records = []
    for image, pert, plan in _load_attack_artifacts(cfg, out, artifacts_dir):
        res = ev.blackbox_transfer(bb_model, image.image, pert, plan, step, y_true=image.label)
        records.append({"image_id": image.id, "pairs": res.pairs, "any_success": res.any_success})
    records.sort(key=lambda r: r["image_id"])
    rate = 100.0 * sum(r["any_success"] for r in records) / len(records)
    return {"images": records, "transfer_success_rate": rate, "grid_step": step}


def cmd_defend_eval(cfg: RunConfig, out: Path, artifacts_dir: Path | None) -> dict:
    model = _load_model(cfg)
    d = cfg["defense"]
    defense = ev.DefenseSpec(
        kind=d["kind"], jpeg_quality=d["jpeg_quality"], num_samples=d["num_samples"], noise_sigma=d["noise_sigma"]
    )
    step = cfg.grid_step_for(cfg["attack"]["kind"])
    seed = cfg["seed"]
    records = []
    for image, pert, plan in _load_attack_artifacts(cfg, out, artifacts_dir):
        rng = SplitMix64(derive_seed(seed, "defense", image.id))
        report = ev.defense_eval(model, defense, image.image, pert, plan, step, image.label, rng)
        records.append({"image_id": image.id, "report": report.to_json_dict()})
    records.sort(key=lambda r: r["image_id"])
    average = float(np.mean([r["report"]["average_asr"] for r in records]))
    return {"images": records, "average_asr": average, "defense": d}


def cmd_capacity(cfg: RunConfig, out: Path) -> dict:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    cap = cfg["capacity"]
    kind = KIND_BY_NAME[cfg["attack"]["kind"]]
    images = []
    for im in sorted(dataset.test, key=lambda i: i.id):
        if nn.predict(model, im.image) == im.label:
            images.append(im)
        if len(images) == cap["num_images"]:
            break
    seed = cfg["seed"]

    def sweep(image: dt.LabeledImage):
        rng = SplitMix64(derive_seed(seed, "capacity", image.id))
        return ev.capacity_sweep(
            model,
            image.image,
            image.label,
            kind,
            cap["max_n"],
            rng,
            epsilon=cfg["attack"]["epsilon"],
            iterations=cfg["attack"]["iterations"],
            alpha=cfg["attack"]["alpha"],
        )

    results = _pool_map(sweep, images, cfg["workers"])
    by_n = {n: [] for n in range(1, cap["max_n"] + 1)}
    for rows in results:
        for n, asr in rows:
            by_n[n].append(asr)
    trend = [{"n": n, "average_asr": float(np.mean(vals))} for n, vals in sorted(by_n.items())]
    return {"trend": trend, "num_images": len(images)}


# ---------------------------------------------------------------------------
# entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdadv", description="transform-dependent adversarial attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run config (defaults used if omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--workers", type=int, default=None, help="worker pool width")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="dotted.key=json",
        help="override one config key, e.g. --set attack.epsilon=0.0627",
    )
    for name in ("gen-data", "train", "attack", "capacity"):
        sub.add_parser(name, parents=[common])
    for name in ("eval-asr", "landscape", "transfer", "defend-eval"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--attack-dir", type=Path, default=None, help="directory with .tdap files and report.json (defaults to --out)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        if args.seed is not None:
            cfg.doc["seed"] = args.seed
        if args.workers is not None:
            cfg.doc["workers"] = args.workers
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        artifacts_dir = getattr(args, "attack_dir", None)
        if args.command == "gen-data":
            report = cmd_gen_data(cfg, out)
        elif args.command == "train":
            report = cmd_train(cfg, out)
        elif args.command == "attack":
            report = cmd_attack(cfg, out)
        elif args.command == "eval-asr":
            report = cmd_eval_asr(cfg, out, artifacts_dir)
        elif args.command == "landscape":
            report = cmd_landscape(cfg, out, artifacts_dir)
        elif args.command == "transfer":
            report = cmd_transfer(cfg, out, artifacts_dir)
        elif args.command == "defend-eval":
            report = cmd_defend_eval(cfg, out, artifacts_dir)
        elif args.command == "capacity":
            report = cmd_capacity(cfg, out)
        else:  # pragma: no cover
            raise ValueError(f"unhandled command {args.command}")
        _write_json(out / "report.json", report)
        _emit_manifest(cfg, out, args.command)
        print(json.dumps({"ok": True, "command": args.command, "out": str(out)}))
        return 0
    except (ConfigError, ValueError, OSError, KeyError, dt.StorageError) as exc:
        print(
            json.dumps({"ok": False, "error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1
    except Exception as exc:  # pragma: no cover
        print(
            json.dumps(
                {"ok": False, "error": {"type": type(exc).__name__, "message": str(exc), "trace": traceback.format_exc()}}
            ),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
