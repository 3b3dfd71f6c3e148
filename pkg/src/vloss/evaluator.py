"""Segmentation metrics: IoU, panoptic quality, mask AP, zero-shot protocol.

PQ follows the standard definition: per-class matching at IoU > 0.5 with
VOID-excluded denominators, PQ = sum(TP IoU) / (TP + FP/2 + FN/2), averaged
over classes present in ground truth or predictions. AP uses greedy
score-ordered matching and 101-point interpolation over IoU thresholds
.50:.05:.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabelSpace
from .segmenter import PanopticSeg


class MetricError(ValueError):
    pass


def compute_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """|A n B| / |A u B|; 0 when the union is empty."""
    a, b = np.asarray(mask_a), np.asarray(mask_b)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.dtype != bool:
        a = a.astype(bool)
    if b.dtype != bool:
        b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class PQReport:
    pq_all: float
    pq_things: float
    pq_stuff: float
    per_class: dict[int, dict]  # class_id -> {"pq","sq","rq","tp","fp","fn","iou_sum"}

    def to_dict(self) -> dict:
        return {
            "pq_all": self.pq_all,
            "pq_things": self.pq_things,
            "pq_stuff": self.pq_stuff,
            "per_class": {str(k): v for k, v in self.per_class.items()},
        }


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float]
    empty: bool = False
    buckets: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "empty": self.empty,
            "buckets": self.buckets,
            "per_class": {str(k): v for k, v in self.per_class.items()},
        }


def _segments_of(seg: PanopticSeg) -> list[dict]:
    out = []
    for sid, entry in seg.segments.items():
        mask = seg.label_map == sid
        if mask.any():
            out.append({"class_id": entry["class_id"], "mask": mask})
    return out


def panoptic_quality(
    preds: list[PanopticSeg],
    gts: list[list[dict]],
    label_space: LabelSpace,
) -> PQReport:
    """``gts[i]`` is a list of {"class_id", "mask"} partitioning image i (VOID allowed)."""
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions vs {len(gts)} ground-truth images")
    ncls = len(label_space)
    stats = {}

    def stat(cid):
        if cid < 0 or cid >= ncls:
            raise MetricError(f"unknown class id {cid}")
        return stats.setdefault(cid, {"iou_sum": 0.0, "tp": 0, "fp": 0, "fn": 0})

    for seg, gt in zip(preds, gts):
        pred_segments = _segments_of(seg)
        gt_void = None
        if gt:
            covered = np.zeros_like(gt[0]["mask"], dtype=bool)
            for g in gt:
                covered |= g["mask"].astype(bool)
            gt_void = ~covered
        matched_preds = set()
        matched_gts = set()
        for gi, g in enumerate(gt):
            stat(int(g["class_id"]))
            for pi, p in enumerate(pred_segments):
                if pi in matched_preds or p["class_id"] != g["class_id"]:
                    continue
                pm, gm = p["mask"], g["mask"].astype(bool)
                inter = np.logical_and(pm, gm).sum()
                union = np.logical_or(pm, gm).sum() - np.logical_and(pm, gt_void).sum()
                iou = inter / union if union > 0 else 0.0
                if iou > 0.5:
                    s = stat(int(g["class_id"]))
                    s["tp"] += 1
                    s["iou_sum"] += float(iou)
                    matched_preds.add(pi)
                    matched_gts.add(gi)
                    break
        for gi, g in enumerate(gt):
            if gi not in matched_gts:
                stat(int(g["class_id"]))["fn"] += 1
        for pi, p in enumerate(pred_segments):
            if pi not in matched_preds:
                stat(int(p["class_id"]))["fp"] += 1

    per_class = {}
    for cid, s in sorted(stats.items()):
        denom = s["tp"] + 0.5 * s["fp"] + 0.5 * s["fn"]
        sq = s["iou_sum"] / s["tp"] if s["tp"] else 0.0
        rq = s["tp"] / denom if denom else 0.0
        pq = s["iou_sum"] / denom if denom else 0.0
        per_class[cid] = {"pq": pq, "sq": sq, "rq": rq, **s}

    def mean_over(ids):
        vals = [per_class[i]["pq"] for i in ids if i in per_class]
        return float(np.mean(vals)) if vals else 0.0

    present = sorted(per_class)
    thing_ids = [i for i in present if label_space.is_thing[i]]
    stuff_ids = [i for i in present if not label_space.is_thing[i]]
    return PQReport(mean_over(present), mean_over(thing_ids), mean_over(stuff_ids), per_class)


IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))


def _ap_from_pr(flags: list[bool], n_gt: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 101)


def mask_ap(
    instances: list[list[dict]],
    gts: list[list[dict]],
    label_space: LabelSpace,
    iou_thresholds=IOU_THRESHOLDS,
    frequency_buckets: bool = False,
) -> APReport:
    """``instances[i]``: scored {"class_id","score","mask"} per image; ``gts`` likewise without scores."""
    if len(instances) != len(gts):
        raise MetricError(f"{len(instances)} pred images vs {len(gts)} gt images")
    class_gt_counts: dict[int, int] = {}
    for gt in gts:
        for g in gt:
            class_gt_counts[int(g["class_id"])] = class_gt_counts.get(int(g["class_id"]), 0) + 1
    classes = sorted(class_gt_counts)
    if not classes:
        return APReport(0.0, 0.0, 0.0, {}, empty=True)

    # flatten predictions with image index
    flat: dict[int, list] = {c: [] for c in classes}
    for img_i, preds in enumerate(instances):
        for p in preds:
            cid = int(p["class_id"])
            if cid in flat:
                flat[cid].append((float(p["score"]), img_i, p["mask"]))

    ap_per_class_thr: dict[int, dict[float, float]] = {}
    for cid in classes:
        preds = sorted(flat[cid], key=lambda x: -x[0])
        gt_by_image = [
            [g["mask"].astype(bool) for g in gt if int(g["class_id"]) == cid] for gt in gts
        ]
        ap_per_class_thr[cid] = {}
        for thr in iou_thresholds:
            used = [set() for _ in gts]
            tps = []
            for score, img_i, mask in preds:
                best_iou, best_j = 0.0, -1
                for j, gmask in enumerate(gt_by_image[img_i]):
                    if j in used[img_i]:
                        continue
                    iou = compute_iou(mask, gmask)
                    if iou > best_iou:
                        best_iou, best_j = iou, j
                if best_iou >= thr:
                    used[img_i].add(best_j)
                    tps.append(True)
                else:
                    tps.append(False)
            ap_per_class_thr[cid][thr] = _ap_from_pr(tps, class_gt_counts[cid])

    per_class = {cid: float(np.mean(list(v.values()))) for cid, v in ap_per_class_thr.items()}
    ap = float(np.mean(list(per_class.values())))
    ap50 = float(np.mean([ap_per_class_thr[c][0.5] for c in classes]))
    ap75 = float(np.mean([ap_per_class_thr[c][0.75] for c in classes]))

    buckets = {}
    if frequency_buckets and len(classes) >= 3:
        ordered = sorted(classes, key=lambda c: class_gt_counts[c])
        cut = max(len(ordered) // 3, 1)
        groups = {"rare": ordered[:cut], "common": ordered[cut : 2 * cut], "frequent": ordered[2 * cut :]}
        buckets = {k: float(np.mean([per_class[c] for c in v])) if v else 0.0 for k, v in groups.items()}
    return APReport(ap, ap50, ap75, per_class, empty=False, buckets=buckets)


# ---------------------------------------------------------------------------
# model-level evaluation


def gt_segments_for(sample, label_space: LabelSpace) -> list[dict]:
    return [
        {"class_id": label_space.index(s["class"]), "mask": s["mask"]}
        for s in sample.segments
        if s["class"] in label_space.names
    ]


def evaluate_panoptic(system, dataset, class_names: list[str] | None = None) -> PQReport:
    """Run panoptic inference over a dataset and score it.

    ``class_names`` extends/replaces the label space used for classification;
    this is the zero-shot path when it differs from the training names.
    """
    space = (
        dataset.label_space
        if class_names is None
        else extended_space(dataset.label_space, class_names)
    )
    preds, gts = [], []
    for sample in dataset:
        preds.append(system.predict_panoptic(sample.image, space))
        gts.append(gt_segments_for(sample, space))
    return panoptic_quality(preds, gts, space)


def extended_space(base: LabelSpace, names: list[str]) -> LabelSpace:
    """Label space over ``names``; thing/stuff flags inherited or inferred."""
    flags = []
    for n in names:
        if n in base.names:
            flags.append(base.is_thing[base.index(n)])
        else:
            from .data import SHAPES

            flags.append(n.split()[-1] in SHAPES)
    return LabelSpace(list(names), flags)


def zero_shot_eval(system, dataset, extended_names: list[str]) -> PQReport:
    """Evaluate with a rebuilt class-embedding matrix and frozen weights.

    Asserts no parameter changed (hash compared before/after).
    """
    before = system.param_hash()
    report = evaluate_panoptic(system, dataset, class_names=extended_names)
    after = system.param_hash()
    if before != after:
        raise MetricError("zero-shot evaluation mutated parameters")
    return report


def random_assignment_baseline(
    preds: list[PanopticSeg], gts: list[list[dict]], label_space: LabelSpace, seed: int = 0
) -> PQReport:
    """Same predicted masks with classes resampled uniformly (things from things,
    stuff from stuff); the floor a real classifier must beat."""
    rng = np.random.default_rng(seed)
    thing_ids = [i for i, t in enumerate(label_space.is_thing) if t]
    stuff_ids = [i for i, t in enumerate(label_space.is_thing) if not t]
    shuffled = []
    for seg in preds:
        new_segments = {}
        for sid, entry in seg.segments.items():
            pool = thing_ids if entry["is_thing"] else stuff_ids
            new_cid = int(rng.choice(pool)) if pool else entry["class_id"]
            new_segments[sid] = {**entry, "class_id": new_cid}
        shuffled.append(PanopticSeg(seg.label_map.copy(), new_segments))
    return panoptic_quality(shuffled, gts, label_space)
