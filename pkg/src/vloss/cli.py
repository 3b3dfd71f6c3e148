"""Command-line entry points: gen | train | eval | verify | schedule-sim.

Run configs are YAML; command-line flags override file values and the
VLOSS_SEED environment variable overrides both. Every command that writes an
output directory drops the resolved effective config there for provenance.
Exit codes: 0 success, 1 validation error, 2 runtime abort (NaN/IO).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import losses as L
from . import tensor as T
from .data import (
    DataError,
    SceneConfig,
    generate_synth_captions,
    generate_synth_detection,
    generate_synth_panoptic,
    load_dataset,
)
from .evaluator import evaluate_panoptic, mask_ap, panoptic_quality, zero_shot_eval, gt_segments_for, extended_space
from .scheduler import DatasetHandle, build_epoch_plan, plan_stats
from .segmenter import ModelConfig
from .tensor import grad_check
from .text import TextConfig
from .trainer import TrainAbort, TrainConfig, config_hash, restore_system, train


class CliError(ValueError):
    pass


DEFAULT_DATA = {
    "image_size": 64,
    "thing_classes": ["red circle", "blue square", "yellow triangle"],
    "stuff_classes": ["sky", "grass"],
    "held_out_classes": [],
    "extra_thing_classes": [],
    "panoptic": {"num_images": 8},
    "detection": {"num_images": 8, "mask_noise": 1},
    "caption": {"num_images": 16},
    "zeroshot": {"num_images": 4},
}


def resolve_config(args) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if os.environ.get("VLOSS_SEED"):
        cfg["seed"] = int(os.environ["VLOSS_SEED"])
    cfg.setdefault("seed", 0)
    return cfg


def write_provenance(out_dir: Path, cfg: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective-config.json", "w") as fh:
        json.dump({"command": command, "config": cfg}, fh, indent=2, sort_keys=True)


def _data_cfg(cfg: dict) -> dict:
    merged = json.loads(json.dumps(DEFAULT_DATA))
    for key, val in (cfg.get("data") or {}).items():
        if isinstance(val, dict) and key in merged:
            merged[key].update(val)
        else:
            merged[key] = val
    return merged


def _scene_cfg(data: dict, split: dict, thing_classes, stuff_classes) -> SceneConfig:
    known = set(SceneConfig.__dataclass_fields__)
    kwargs = {k: v for k, v in split.items() if k in known}
    kwargs.setdefault("image_size", data["image_size"])
    return SceneConfig(thing_classes=list(thing_classes), stuff_classes=list(stuff_classes), **kwargs)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    data = _data_cfg(cfg)
    seed = cfg["seed"]
    out = Path(args.out or data.get("out") or "data")

    held_out = list(data["held_out_classes"])
    train_things = [c for c in data["thing_classes"] if c not in held_out]
    det_things = train_things + list(data["extra_thing_classes"])
    stuffs = data["stuff_classes"]

    plans = {
        "panoptic": _scene_cfg(data, data["panoptic"], train_things, stuffs),
        "detection": _scene_cfg(data, data["detection"], det_things, stuffs),
        "caption": _scene_cfg(data, data["caption"], train_things, stuffs),
    }
    if held_out:
        plans["zeroshot"] = _scene_cfg(data, data["zeroshot"], held_out, stuffs)

    if args.dry_run:
        for name, sc in plans.items():
            print(f"{name}: {sc.num_images} images, things={sc.thing_classes}, stuff={sc.stuff_classes}")
        return 0

    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output dir {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)

    generate_synth_panoptic(plans["panoptic"], seed, out)
    generate_synth_detection(plans["detection"], seed, out)
    generate_synth_captions(plans["caption"], seed, out)
    if "zeroshot" in plans:
        # held-out classes only, panoptic format, never seen by training splits
        generate_synth_panoptic(plans["zeroshot"], seed + 1, out, split_name="zeroshot")
    write_provenance(out, cfg, "gen")
    print(f"wrote splits under {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def model_cfg_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**(cfg.get("model") or {}))


def text_cfg_from(cfg: dict) -> TextConfig:
    return TextConfig(**(cfg.get("text") or {}))


def train_cfg_from(cfg: dict) -> TrainConfig:
    d = dict(cfg.get("train") or {})
    d.setdefault("seed", cfg.get("seed", 0))
    return TrainConfig(**d)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.strategy:
        cfg.setdefault("train", {})["strategy"] = args.strategy
    if args.epochs:
        cfg.setdefault("train", {})["epochs"] = args.epochs
        cfg["train"].setdefault(
            "decay_epochs",
            [max(1, args.epochs * 2 // 3), max(1, args.epochs * 11 // 12)] if args.epochs > 1 else [],
        )
    data_root = Path(args.data)
    datasets = {}
    for stream in ("panoptic", "detection", "caption"):
        split_dir = data_root / stream
        if split_dir.exists():
            datasets[stream] = load_dataset(split_dir, stream)
    if not datasets:
        raise CliError(f"no splits found under {data_root}")

    out = Path(args.out or "runs/run")
    write_provenance(out, cfg, "train")
    try:
        system, space, summary = train(
            datasets,
            model_cfg_from(cfg),
            text_cfg_from(cfg),
            train_cfg_from(cfg),
            out_dir=out,
            max_steps=10 if args.smoke else None,
        )
    except TrainAbort as e:
        print(f"abort: {e}", file=sys.stderr)
        return 2
    print(f"trained {summary['steps']} steps; checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    system, space, manifest = restore_system(args.ckpt)
    dataset = load_dataset(Path(args.split), "panoptic")

    before = system.param_hash()
    if args.classes:
        with open(args.classes) as fh:
            names = [ln.strip() for ln in fh if ln.strip()]
        report = zero_shot_eval(system, dataset, names)
        eval_space = extended_space(dataset.label_space, names)
    else:
        report = evaluate_panoptic(system, dataset)
        eval_space = dataset.label_space

    # instance AP over thing classes from the same checkpoint
    instances, gts = [], []
    for sample in dataset:
        inst = system.predict_instances(sample.image, eval_space)
        instances.append(inst)
        gts.append([g for g in gt_segments_for(sample, eval_space) if eval_space.is_thing[g["class_id"]]])
    ap_report = mask_ap(instances, gts, eval_space)

    if system.param_hash() != before:
        raise CliError("evaluation mutated parameters")

    out = Path(args.out or "eval-out")
    write_provenance(out, cfg, "eval")
    payload = {"pq": report.to_dict(), "ap": ap_report.to_dict()}
    if not args.per_class:
        payload["pq"].pop("per_class")
        payload["ap"].pop("per_class")
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    with open(out / "report.csv", "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"pq_all,{report.pq_all}\npq_things,{report.pq_things}\npq_stuff,{report.pq_stuff}\n")
        fh.write(f"ap,{ap_report.ap}\nap50,{ap_report.ap50}\nap75,{ap_report.ap75}\n")
        if args.per_class:
            for cid, row in report.per_class.items():
                fh.write(f"pq_class_{eval_space.names[cid]},{row['pq']}\n")
    print(f"PQ_all={report.pq_all:.4f} PQ_th={report.pq_things:.4f} PQ_st={report.pq_stuff:.4f} AP={ap_report.ap:.4f}")
    return 0


# ---------------------------------------------------------------------------
# verify


def _tap(results: list[tuple[str, bool]]) -> int:
    print(f"1..{len(results)}")
    failed = 0
    for i, (name, ok) in enumerate(results, 1):
        print(f"{'ok' if ok else 'not ok'} {i} - {name}")
        failed += not ok
    return 0 if failed == 0 else 1


def verify_gradcheck() -> list[tuple[str, bool]]:
    cases = {
        "matmul": [(2, 3), (3, 4)],
        "conv2d": [(1, 2, 5, 5), (3, 2, 3, 3), (3,)],
        "add": [(3, 4), (3, 4)],
        "mul": [(3, 4), (3, 4)],
        "scale": [(3, 4)],
        "relu": [(4, 4)],
        "gelu": [(4, 4)],
        "sigmoid": [(4, 4)],
        "exp": [(3, 3)],
        "log": [(3, 3)],
        "softmax": [(3, 5)],
        "layer_norm": [(4, 8)],
        "mean_pool_spatial": [(2, 3, 4)],
        "bilinear_upsample": [(2, 3, 3)],
        "reshape": [(2, 6)],
        "transpose": [(2, 3)],
        "concat": [(2, 3), (1, 3)],
        "slice": [(4, 4)],
        "embedding_lookup": [(7, 4), (5,)],
        "l2_normalize": [(4, 6)],
        "sum": [(3, 4)],
        "mean": [(3, 4)],
    }
    attrs = {"reshape": {"shape": (3, 4)}, "transpose": {"axes": (1, 0)}, "scale": {"alpha": 1.3}}
    results = []
    for op, shapes in cases.items():
        worst = max(grad_check(op, shapes, seed, attrs=attrs.get(op)) for seed in range(10))
        results.append((f"gradcheck {op} (10 seeds, max rel err {worst:.2e})", worst < 1e-4))
    return results


def verify_hungarian() -> list[tuple[str, bool]]:
    import itertools

    rng = np.random.default_rng(0)
    bad = 0
    for case in range(1000):
        n, m = rng.integers(1, 8, size=2)
        cost = rng.integers(0, 50, size=(n, m)).astype(float) if case % 2 else rng.random((n, m))
        _, total = L.match_hungarian(cost)
        k = min(n, m)
        best = min(
            sum(cost[r, c] for r, c in zip(rows, cols))
            for rows in itertools.combinations(range(n), k)
            for cols in itertools.permutations(range(m), k)
        )
        bad += total != best
    return [(f"hungarian vs brute force ({1000 - bad}/1000 exact)", bad == 0)]


def verify_metrics() -> list[tuple[str, bool]]:
    from .data import LabelSpace
    from .segmenter import PanopticSeg

    space = LabelSpace(["a", "b", "c"], [True, True, False])
    results = []

    gt_mask = np.zeros((10, 10), bool)
    gt_mask[0, 0:4] = True
    pred_mask = np.zeros((10, 10), bool)
    pred_mask[0, 0:5] = True
    fp_mask = np.zeros((10, 10), bool)
    fp_mask[8, 0:3] = True
    label_map = np.zeros((10, 10), np.int32)
    label_map[pred_mask] = 1
    label_map[fp_mask] = 2
    pred = PanopticSeg(label_map, {1: {"class_id": 0, "is_thing": True, "score": 1.0}, 2: {"class_id": 0, "is_thing": True, "score": 1.0}})
    gts = [[{"class_id": 0, "mask": gt_mask}, {"class_id": 2, "mask": ~gt_mask}]]
    rep = panoptic_quality([pred], gts, space)
    results.append(("pq worked value 0.8/1.5", abs(rep.per_class[0]["pq"] - 0.8 / 1.5) < 1e-12))
    results.append(
        ("pq = sq*rq per class", all(abs(s["pq"] - s["sq"] * s["rq"]) < 1e-12 for s in rep.per_class.values()))
    )

    gt2 = np.zeros((10, 10), bool)
    gt2[0, 0:3] = True
    pm2 = np.zeros((10, 10), bool)
    pm2[0, 1:5] = True
    lm2 = np.zeros((10, 10), np.int32)
    lm2[pm2] = 1
    pred2 = PanopticSeg(lm2, {1: {"class_id": 0, "is_thing": True, "score": 1.0}})
    rep2 = panoptic_quality([pred2], [[{"class_id": 0, "mask": gt2}, {"class_id": 2, "mask": ~gt2}]], space)
    s = rep2.per_class[0]
    results.append(("pq IoU-0.4 case unmatched", s["tp"] == 0 and s["fp"] == 1 and s["fn"] == 1))

    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    ap = mask_ap([[{"class_id": 0, "score": 0.9, "mask": m}]], [[{"class_id": 0, "mask": m}]], space)
    results.append(("ap exact detection = 1", ap.ap == 1.0 and ap.ap50 == 1.0 and ap.ap75 == 1.0))
    results.append(("ap <= ap50 bound", ap.ap <= ap.ap50 + 1e-12))
    return results


def verify_scheduler() -> list[tuple[str, bool]]:
    rng = np.random.default_rng(7)
    ok_exclusion = ok_exact = ok_ubiquity = ok_det = True
    for _ in range(200):
        det, pan, cap = (int(x) for x in rng.integers(0, 15, size=3))
        seed = int(rng.integers(0, 2**31 - 1))
        epoch = int(rng.integers(0, 12))
        strategy = ("stt", "mix", "pretrain_finetune")[int(rng.integers(0, 3))]
        handles = [
            DatasetHandle("detection", det),
            DatasetHandle("panoptic", pan),
            DatasetHandle("caption", cap),
        ]
        plan = build_epoch_plan(strategy, handles, epoch, 12, seed)
        again = build_epoch_plan(strategy, handles, epoch, 12, seed)
        ok_det &= plan.tickets == again.tickets
        counts = {"detection": det, "panoptic": pan, "caption": cap}
        expect = sorted(
            (s, i) for s in plan.streams_included for i in range(counts[s])
        )
        ok_exact &= sorted((t.stream, t.index) for t in plan.tickets) == expect
        if strategy == "stt":
            warm = plan.tickets[: plan.boundary]
            cool = plan.tickets[plan.boundary :]
            ok_exclusion &= not any(t.stream == "panoptic" for t in warm)
            ok_exclusion &= not any(t.stream == "detection" for t in cool)
            if cap >= 2 and det > 0 and pan > 0:
                ok_ubiquity &= any(t.stream == "caption" for t in warm)
                ok_ubiquity &= any(t.stream == "caption" for t in cool)
    return [
        ("scheduler stt exclusion (200 configs)", ok_exclusion),
        ("scheduler exactness (200 configs)", ok_exact),
        ("scheduler caption ubiquity (200 configs)", ok_ubiquity),
        ("scheduler determinism (200 configs)", ok_det),
    ]


VERIFY_SUITES = {
    "gradcheck": verify_gradcheck,
    "hungarian": verify_hungarian,
    "metrics": verify_metrics,
    "scheduler": verify_scheduler,
}


def cmd_verify(args) -> int:
    if args.suite not in VERIFY_SUITES:
        raise CliError(f"unknown suite {args.suite!r}; choose from {sorted(VERIFY_SUITES)}")
    return _tap(VERIFY_SUITES[args.suite]())


# ---------------------------------------------------------------------------
# schedule-sim


def cmd_schedule_sim(args) -> int:
    cfg = resolve_config(args)
    handles = [
        DatasetHandle("detection", args.det),
        DatasetHandle("panoptic", args.pan),
        DatasetHandle("caption", args.cap),
    ]
    plan = build_epoch_plan(args.strategy, handles, args.epoch, args.epochs, cfg["seed"])
    stats = plan_stats(plan)
    stats["tickets"] = [[t.stream, t.index] for t in plan.tickets]
    print(json.dumps(stats, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vloss", description="Desk-scale omni-supervised segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="override config seed (VLOSS_SEED overrides this)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite non-empty output dirs")
        p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")

    p = sub.add_parser("gen", help="generate the synthetic splits")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on generated splits")
    common(p)
    p.add_argument("--data", required=True, help="dataset root produced by gen")
    p.add_argument("--strategy", choices=["stt", "mix", "pretrain_finetune"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--smoke", action="store_true", help="cap to 10 steps for a smoke run")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a panoptic-format split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True, help="path to a panoptic-format split dir")
    p.add_argument("--classes", help="text file of class names (one per line) for zero-shot eval")
    p.add_argument("--per-class", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run an oracle/invariant suite (TAP output)")
    common(p)
    p.add_argument("suite", choices=sorted(VERIFY_SUITES))
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("schedule-sim", help="emit plan_stats JSON for one epoch plan")
    common(p)
    p.add_argument("--strategy", default="stt", choices=["stt", "mix", "pretrain_finetune"])
    p.add_argument("--det", type=int, default=4)
    p.add_argument("--pan", type=int, default=4)
    p.add_argument("--cap", type=int, default=4)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12)
    p.set_defaults(fn=cmd_schedule_sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors; usage errors are
        # validation failures under this tool's exit-code contract
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except (CliError, DataError, T.OpError, T.ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainAbort, OSError) as e:
        print(f"abort: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
