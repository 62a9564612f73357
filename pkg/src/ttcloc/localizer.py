"""Inference: turn a trained network into per-video segment detections.

The default (predicted) mode uses the same gate rule the objective trains,
binarized at 0.5, which for any of the gate shapes is exactly "score above
the predicted threshold".  The manual mode reproduces the fixed test-time
rule it replaces: per class, threshold at the midpoint of the max and min
snippet scores.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import network
from .data import VideoSample
from .errors import ValidationError
from .network import NetworkParams
from .objectives import AGGREGATORS, VideoProbabilities, manual_thresholds, pool_and_classify

INFERENCE_MODES = ("predicted", "manual")


@dataclass(frozen=True)
class Detection:
    video_id: str
    class_id: int
    start: float  # seconds
    end: float
    score: float

    def validate(self) -> None:
        if not self.start < self.end:
            raise ValidationError(f"detection in {self.video_id!r}: start {self.start} must precede end {self.end}")
        if not np.isfinite(self.score):
            raise ValidationError(f"detection in {self.video_id!r}: non-finite score")


def extract_segments(values: np.ndarray, binarize_at: float = 0.5) -> list[tuple[int, int]]:
    """Maximal runs of entries strictly above the cut, as inclusive spans."""
    mask = np.asarray(values) > binarize_at
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def select_classes(probs: VideoProbabilities) -> set[int]:
    """Classes whose probability strictly exceeds the action-class mean.

    The background probability is excluded from the average.
    """
    p = probs.probs[:-1]
    return set(np.flatnonzero(p > p.mean()).tolist())


def infer_video(
    params: NetworkParams,
    sample: VideoSample,
    mode: str = "predicted",
    aggregator: str = "gated",
    gating: str = "sigmoid",
) -> list[Detection]:
    """Full-sequence inference; no cropping, no dropout.

    Detection score is the video-level class probability times the mean
    sigmoid gate value across the segment, in both modes.
    """
    if mode not in INFERENCE_MODES:
        raise ValidationError(f"mode must be one of {INFERENCE_MODES}, got {mode!r}")
    if aggregator not in AGGREGATORS:
        raise ValidationError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
    smap, _ = network.forward(params, sample.features)
    s, b = smap.scores, smap.thresholds
    x = s - b[:, None]
    sig_gate = network.gate_values(x, "sigmoid")

    pool_gate = None
    if aggregator == "gated":
        pool_gate = network.Gate(values=network.gate_values(x, gating), kind=gating)
    probs = pool_and_classify(smap, pool_gate, aggregator)
    classes = sorted(select_classes(probs))

    tau = sample.snippet_duration
    detections = []
    for c in classes:
        if mode == "predicted":
            runs = extract_segments(sig_gate[:, c], 0.5)
        else:
            thr = manual_thresholds(s)
            runs = extract_segments(s[:, c], float(thr[c]))
        for t0, t1 in runs:
            seg_score = float(probs.probs[c] * sig_gate[t0 : t1 + 1, c].mean())
            detections.append(
                Detection(
                    video_id=sample.id,
                    class_id=c,
                    start=t0 * tau,
                    end=(t1 + 1) * tau,
                    score=seg_score,
                )
            )
    return detections


def infer_dataset(
    params: NetworkParams,
    samples: list[VideoSample],
    mode: str = "predicted",
    aggregator: str = "gated",
    gating: str = "sigmoid",
) -> list[Detection]:
    out: list[Detection] = []
    for sample in samples:
        out.extend(infer_video(params, sample, mode, aggregator, gating))
    return out


def detections_to_jsonl(detections: list[Detection], class_names: tuple[str, ...]) -> str:
    lines = []
    for det in detections:
        det.validate()
        if not 0 <= det.class_id < len(class_names):
            raise ValidationError(f"detection class {det.class_id} outside the {len(class_names)}-class space")
        lines.append(
            json.dumps(
                {
                    "video_id": det.video_id,
                    "class_id": det.class_id,
                    "class_name": class_names[det.class_id],
                    "start_s": det.start,
                    "end_s": det.end,
                    "score": det.score,
                },
                sort_keys=True,
            )
        )
    return "".join(line + "\n" for line in lines)


def write_detections(detections: list[Detection], class_names: tuple[str, ...], path: str) -> None:
    payload = detections_to_jsonl(detections, class_names)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_detections(path: str) -> list[Detection]:
    detections = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                det = Detection(
                    video_id=str(obj["video_id"]),
                    class_id=int(obj["class_id"]),
                    start=float(obj["start_s"]),
                    end=float(obj["end_s"]),
                    score=float(obj["score"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad detection record: {exc}") from exc
            det.validate()
            detections.append(det)
    return detections
