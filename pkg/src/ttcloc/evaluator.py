"""Detection mAP with no-duplicate-credit matching, plus a brute-force oracle.

``oracle_evaluate`` (kept deliberately first and independent) re-derives
every AP as an explicit precision/recall area over score-order prefixes,
re-matching each prefix from scratch with plain loops.  ``evaluate`` is
the production path.  Both share only the report container and the
detection sort rule: descending score, ties by earlier start then lower
video id.

AP is non-interpolated: the sum of precision at each true-positive rank
divided by the number of ground-truth segments.  Classes without any
ground truth are excluded from mAP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .data import DatasetManifest, VideoSample
from .errors import ValidationError
from .localizer import Detection

ORACLE_MAX_DETECTIONS = 10


@dataclass(frozen=True)
class GroundTruthIndex:
    """Ground-truth segments grouped per class, in source order."""

    num_classes: int
    video_ids: frozenset
    by_class: tuple  # index c -> tuple of (video_id, start, end)

    def total_segments(self) -> int:
        return sum(len(v) for v in self.by_class)


def index_from_rows(num_classes: int, video_ids, rows) -> GroundTruthIndex:
    by_class: list[list] = [[] for _ in range(num_classes)]
    for video_id, class_id, start, end in rows:
        if not 0 <= class_id < num_classes:
            raise ValidationError(f"ground truth in {video_id!r}: class {class_id} outside {num_classes} classes")
        by_class[class_id].append((video_id, start, end))
    return GroundTruthIndex(
        num_classes=num_classes,
        video_ids=frozenset(video_ids),
        by_class=tuple(tuple(v) for v in by_class),
    )


def index_from_manifest(manifest: DatasetManifest) -> GroundTruthIndex:
    rows = []
    for r in manifest.records:
        for seg in r.segments or ():
            rows.append((r.id, seg.class_id, seg.start, seg.end))
    return index_from_rows(manifest.num_classes, (r.id for r in manifest.records), rows)


def index_from_samples(samples: list[VideoSample], num_classes: int) -> GroundTruthIndex:
    rows = []
    for s in samples:
        for seg in s.segments or ():
            rows.append((s.id, seg.class_id, seg.start, seg.end))
    return index_from_rows(num_classes, (s.id for s in samples), rows)


@dataclass(frozen=True)
class EvalReport:
    iou_thresholds: tuple
    class_names: tuple
    per_class_ap: tuple  # [threshold][class] -> float or None (no ground truth)
    per_class_counts: tuple  # [threshold][class] -> (tp, fp, num_gt)
    map_per_threshold: tuple
    average_map: float


def _sorted_dets(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.start, d.video_id))


def _validate_inputs(detections: list[Detection], gt: GroundTruthIndex, iou_thresholds) -> None:
    if not iou_thresholds:
        raise ValidationError("need at least one IoU threshold")
    for t in iou_thresholds:
        if not 0.0 < t <= 1.0:
            raise ValidationError(f"IoU threshold {t} must lie in (0, 1]")
    if gt.total_segments() == 0:
        raise ValidationError("ground truth contains no segments; mAP is undefined")
    for det in detections:
        det.validate()
        if det.video_id not in gt.video_ids:
            raise ValidationError(f"detection references unknown video {det.video_id!r}")
        if not 0 <= det.class_id < gt.num_classes:
            raise ValidationError(f"detection class {det.class_id} outside {gt.num_classes} classes")


def _default_names(gt: GroundTruthIndex, class_names) -> tuple:
    if class_names is None:
        return tuple(f"class{c:02d}" for c in range(gt.num_classes))
    if len(class_names) != gt.num_classes:
        raise ValidationError("class_names length must match the class count")
    return tuple(class_names)


# ---------------------------------------------------------------------------
# Oracle (independent reference; used only by tests)


def oracle_evaluate(
    detections: list[Detection],
    gt: GroundTruthIndex,
    iou_thresholds,
    class_names=None,
) -> EvalReport:
    """Reference evaluator: prefix-by-prefix PR enumeration, plain loops."""
    _validate_inputs(detections, gt, iou_thresholds)
    names = _default_names(gt, class_names)
    per_class = [[d for d in detections if d.class_id == c] for c in range(gt.num_classes)]
    for c, dets in enumerate(per_class):
        if len(dets) > ORACLE_MAX_DETECTIONS:
            raise ValidationError(f"oracle limited to {ORACLE_MAX_DETECTIONS} detections per class, class {c} has {len(dets)}")

    def prefix_tp_count(dets_prefix, gts, thresh):
        used = [False] * len(gts)
        tp = 0
        for det in dets_prefix:
            best_iou = -1.0
            best_j = -1
            for j, (vid, gs, ge) in enumerate(gts):
                if used[j] or vid != det.video_id:
                    continue
                inter = max(0.0, min(det.end, ge) - max(det.start, gs))
                union = (det.end - det.start) + (ge - gs) - inter
                iou = inter / union if union > 0 else 0.0
                if iou >= thresh and iou > best_iou:
                    best_iou = iou
                    best_j = j
            if best_j >= 0:
                used[best_j] = True
                tp += 1
        return tp

    ap_rows, count_rows, maps = [], [], []
    for thresh in iou_thresholds:
        aps, counts = [], []
        for c in range(gt.num_classes):
            gts = gt.by_class[c]
            dets = _sorted_dets(per_class[c])
            num_gt = len(gts)
            full_tp = prefix_tp_count(dets, gts, thresh)
            counts.append((full_tp, len(dets) - full_tp, num_gt))
            if num_gt == 0:
                aps.append(None)
                continue
            area = 0.0
            prev_recall = 0.0
            for k in range(1, len(dets) + 1):
                tp_k = prefix_tp_count(dets[:k], gts, thresh)
                recall = tp_k / num_gt
                precision = tp_k / k
                area += (recall - prev_recall) * precision
                prev_recall = recall
            aps.append(area)
        defined = [a for a in aps if a is not None]
        maps.append(sum(defined) / len(defined))
        ap_rows.append(tuple(aps))
        count_rows.append(tuple(counts))

    return EvalReport(
        iou_thresholds=tuple(iou_thresholds),
        class_names=names,
        per_class_ap=tuple(ap_rows),
        per_class_counts=tuple(count_rows),
        map_per_threshold=tuple(maps),
        average_map=sum(maps) / len(maps),
    )


# ---------------------------------------------------------------------------
# Production evaluator


def interval_iou(a: tuple, b: tuple) -> float:
    """Intersection over union of two [start, end) intervals."""
    (a0, a1), (b0, b1) = a, b
    if not (a0 < a1 and b0 < b1):
        raise ValidationError(f"degenerate interval: {a} vs {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets: list[Detection], gts, iou_thresh: float) -> list[bool]:
    """TP/FP flags in score order under the one-detection-per-GT rule.

    ``gts`` is a sequence of (video_id, start, end) for a single class.
    Each detection, visited in descending score order, claims the
    highest-IoU unmatched ground truth of its own video, if any reaches
    the threshold.
    """
    by_video: dict = {}
    for j, (vid, gs, ge) in enumerate(gts):
        by_video.setdefault(vid, []).append((j, gs, ge))
    used = set()
    flags = []
    for det in _sorted_dets(dets):
        best_iou = -1.0
        best_j = -1
        for j, gs, ge in by_video.get(det.video_id, ()):
            if j in used:
                continue
            iou = interval_iou((det.start, det.end), (gs, ge))
            if iou >= iou_thresh and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            used.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float | None:
    """Non-interpolated AP from score-ordered TP/FP flags."""
    if num_gt < 0:
        raise ValidationError("num_gt must be >= 0")
    if num_gt == 0:
        return None
    tp = 0
    total = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
            total += tp / rank
    return total / num_gt


def evaluate(
    detections: list[Detection],
    gt: GroundTruthIndex,
    iou_thresholds,
    class_names=None,
) -> EvalReport:
    _validate_inputs(detections, gt, iou_thresholds)
    names = _default_names(gt, class_names)
    per_class = [[d for d in detections if d.class_id == c] for c in range(gt.num_classes)]

    ap_rows, count_rows, maps = [], [], []
    for thresh in iou_thresholds:
        aps, counts = [], []
        for c in range(gt.num_classes):
            flags = match_detections(per_class[c], gt.by_class[c], thresh)
            num_gt = len(gt.by_class[c])
            tp = sum(flags)
            counts.append((tp, len(flags) - tp, num_gt))
            aps.append(average_precision(flags, num_gt))
        defined = [a for a in aps if a is not None]
        maps.append(sum(defined) / len(defined))
        ap_rows.append(tuple(aps))
        count_rows.append(tuple(counts))

    return EvalReport(
        iou_thresholds=tuple(iou_thresholds),
        class_names=names,
        per_class_ap=tuple(ap_rows),
        per_class_counts=tuple(count_rows),
        map_per_threshold=tuple(maps),
        average_map=sum(maps) / len(maps),
    )


# ---------------------------------------------------------------------------
# Report rendering


def _fmt_thresh(t: float) -> str:
    return f"{t:g}"


def render_report_json(report: EvalReport) -> str:
    per_class = {}
    for c, name in enumerate(report.class_names):
        ap = {}
        counts = {}
        for i, t in enumerate(report.iou_thresholds):
            key = _fmt_thresh(t)
            ap[key] = report.per_class_ap[i][c]
            tp, fp, num_gt = report.per_class_counts[i][c]
            counts[key] = {"tp": tp, "fp": fp, "num_gt": num_gt}
        per_class[name] = {"ap": ap, "counts": counts}
    obj = {
        "iou_thresholds": list(report.iou_thresholds),
        "map": {_fmt_thresh(t): report.map_per_threshold[i] for i, t in enumerate(report.iou_thresholds)},
        "average_map": report.average_map,
        "per_class": per_class,
    }
    return json.dumps(obj, indent=2, sort_keys=True)


def render_report_csv(report: EvalReport) -> str:
    """One row per class plus an mAP row; columns per IoU plus the average."""
    header = ["class"] + [f"ap@{_fmt_thresh(t)}" for t in report.iou_thresholds] + ["average"]
    lines = [",".join(header)]
    for c, name in enumerate(report.class_names):
        cells = [name]
        vals = [report.per_class_ap[i][c] for i in range(len(report.iou_thresholds))]
        for v in vals:
            cells.append("" if v is None else f"{v:.6f}")
        defined = [v for v in vals if v is not None]
        cells.append(f"{sum(defined) / len(defined):.6f}" if defined else "")
        lines.append(",".join(cells))
    map_cells = ["mAP"] + [f"{v:.6f}" for v in report.map_per_threshold] + [f"{report.average_map:.6f}"]
    lines.append(",".join(map_cells))
    return "".join(line + "\n" for line in lines)
