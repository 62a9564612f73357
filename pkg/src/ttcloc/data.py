"""Video dataset model and on-disk format.

A dataset is a ``manifest.json`` plus one raw feature file per video
(``<id>.f32``, row-major little-endian float32, T rows x D columns).
Segment annotations live in the manifest in seconds; :func:`rasterize`
turns them into per-snippet binary matrices on demand.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

DEFAULT_SNIPPET_DURATION = 0.64  # seconds covered by one feature vector


@dataclass(frozen=True)
class GroundTruthSegment:
    """One annotated action interval ``[start, end)`` in seconds."""

    class_id: int
    start: float
    end: float

    def validate(self, num_classes: int | None = None) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValidationError(f"segment times must be finite, got {self}")
        if self.start < 0 or self.start >= self.end:
            raise ValidationError(f"segment must satisfy 0 <= start < end, got {self}")
        if self.class_id < 0 or (num_classes is not None and self.class_id >= num_classes):
            raise ValidationError(f"segment class {self.class_id} out of range")


@dataclass(frozen=True)
class VideoSample:
    """A feature sequence with its labels and optional segment annotations.

    ``features`` is a read-only (T, D) float32 array.  ``fully_annotated``
    marks the sample as usable for localization supervision, which requires
    ``segments`` to be present.
    """

    id: str
    features: np.ndarray
    labels: frozenset[int]
    snippet_duration: float = DEFAULT_SNIPPET_DURATION
    segments: tuple[GroundTruthSegment, ...] | None = None
    fully_annotated: bool = False

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", frozenset(self.labels))
        if self.segments is not None:
            object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_duration

    def validate(self, num_classes: int | None = None) -> None:
        if self.features.ndim != 2 or self.num_snippets < 1 or self.feature_dim < 1:
            raise ValidationError(f"video {self.id!r}: features must be a nonempty T x D matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"video {self.id!r}: non-finite feature values")
        if not self.labels:
            raise ValidationError(f"video {self.id!r}: label set is empty")
        for c in self.labels:
            if c < 0 or (num_classes is not None and c >= num_classes):
                raise ValidationError(f"video {self.id!r}: label {c} out of range")
        if not (self.snippet_duration > 0 and math.isfinite(self.snippet_duration)):
            raise ValidationError(f"video {self.id!r}: snippet_duration must be a positive real")
        if self.segments is not None:
            for seg in self.segments:
                seg.validate(num_classes)
                if seg.class_id not in self.labels:
                    raise ValidationError(
                        f"video {self.id!r}: segment class {seg.class_id} not in labels {sorted(self.labels)}"
                    )
        if self.fully_annotated and self.segments is None:
            raise ValidationError(f"video {self.id!r}: fully_annotated requires segments")


@dataclass(frozen=True)
class VideoRecord:
    """Manifest entry for one video; features stay on disk."""

    id: str
    num_snippets: int
    feature_dim: int
    labels: tuple[int, ...]
    snippet_duration: float
    segments: tuple[GroundTruthSegment, ...] | None
    fully_annotated: bool


@dataclass(frozen=True)
class DatasetManifest:
    num_classes: int
    class_names: tuple[str, ...]
    records: tuple[VideoRecord, ...]
    directory: str = field(default="", compare=False)

    def validate(self) -> None:
        if self.num_classes < 1 or len(self.class_names) != self.num_classes:
            raise ValidationError("manifest: class_names length must equal num_classes")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"manifest: duplicate video ids {dupes}")
        dims = {r.feature_dim for r in self.records}
        if len(dims) > 1:
            raise ValidationError(f"manifest: videos disagree on feature dim: {sorted(dims)}")


def rasterize(
    segments: list[GroundTruthSegment] | tuple[GroundTruthSegment, ...] | None,
    num_snippets: int,
    num_classes: int,
    snippet_duration: float,
) -> np.ndarray:
    """Snippet-grid binary annotation matrix of shape (T, C).

    Entry (t, c) is 1 iff the midpoint of snippet t's time interval lies
    inside some class-c segment.  Segments fully outside the grid simply
    contribute nothing.
    """
    if num_snippets < 1 or num_classes < 1:
        raise ValidationError("rasterize: num_snippets and num_classes must be >= 1")
    a = np.zeros((num_snippets, num_classes), dtype=np.float64)
    if not segments:
        return a
    tau = snippet_duration
    midpoints = (np.arange(num_snippets) + 0.5) * tau
    for seg in segments:
        inside = (midpoints >= seg.start) & (midpoints < seg.end)
        a[inside, seg.class_id] = 1.0
    return a


def crop_clip(sample: VideoSample, max_len: int, rng: np.random.Generator) -> VideoSample:
    """Random clip of at most ``max_len`` snippets.

    Videos already short enough are returned unchanged.  Segment
    annotations are intersected with the clip window and shifted to
    clip-local time; video-level labels are kept even when the labeled
    action falls outside the clip.
    """
    if max_len < 1:
        raise ValidationError("crop_clip: max_len must be >= 1")
    t = sample.num_snippets
    if t <= max_len:
        return sample
    offset = int(rng.integers(0, t - max_len + 1))
    tau = sample.snippet_duration
    window_start = offset * tau
    window_end = (offset + max_len) * tau
    segments = None
    if sample.segments is not None:
        kept = []
        for seg in sample.segments:
            start = max(seg.start, window_start)
            end = min(seg.end, window_end)
            if start < end:
                kept.append(GroundTruthSegment(seg.class_id, start - window_start, end - window_start))
        segments = tuple(kept)
    return replace(
        sample,
        features=sample.features[offset : offset + max_len],
        segments=segments,
        fully_annotated=sample.fully_annotated and segments is not None,
    )


# ---------------------------------------------------------------------------
# On-disk format


def _segment_to_json(seg: GroundTruthSegment) -> dict:
    return {"class_id": seg.class_id, "start": seg.start, "end": seg.end}


def _segment_from_json(obj: dict, video_id: str) -> GroundTruthSegment:
    try:
        return GroundTruthSegment(int(obj["class_id"]), float(obj["start"]), float(obj["end"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"video {video_id!r}: malformed segment entry {obj!r}") from exc


def _record_from_json(obj: dict) -> VideoRecord:
    vid = obj.get("id")
    if not isinstance(vid, str) or not vid:
        raise ValidationError(f"manifest: video entry without a valid id: {obj!r}")
    required = {"id", "num_snippets", "feature_dim", "labels", "snippet_duration"}
    allowed = required | {"segments", "fully_annotated"}
    unknown = set(obj) - allowed
    if unknown:
        raise ValidationError(f"video {vid!r}: unknown manifest keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ValidationError(f"video {vid!r}: missing manifest keys {sorted(missing)}")
    segments = None
    if obj.get("segments") is not None:
        segments = tuple(_segment_from_json(s, vid) for s in obj["segments"])
    return VideoRecord(
        id=vid,
        num_snippets=int(obj["num_snippets"]),
        feature_dim=int(obj["feature_dim"]),
        labels=tuple(int(c) for c in obj["labels"]),
        snippet_duration=float(obj["snippet_duration"]),
        segments=segments,
        fully_annotated=bool(obj.get("fully_annotated", False)),
    )


def load_manifest(manifest_path: str) -> DatasetManifest:
    """Parse and validate ``manifest.json`` (features are not touched)."""
    if not os.path.isfile(manifest_path):
        raise ValidationError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest {manifest_path}: invalid JSON: {exc}") from exc
    for key in ("num_classes", "class_names", "videos"):
        if key not in obj:
            raise ValidationError(f"manifest {manifest_path}: missing key {key!r}")
    manifest = DatasetManifest(
        num_classes=int(obj["num_classes"]),
        class_names=tuple(str(n) for n in obj["class_names"]),
        records=tuple(_record_from_json(v) for v in obj["videos"]),
        directory=os.path.dirname(os.path.abspath(manifest_path)),
    )
    manifest.validate()
    return manifest


def feature_path(manifest: DatasetManifest, video_id: str) -> str:
    return os.path.join(manifest.directory, f"{video_id}.f32")


def _load_features(path: str, record: VideoRecord) -> np.ndarray:
    if not os.path.isfile(path):
        raise ValidationError(f"video {record.id!r}: feature file missing: {path}")
    expected = record.num_snippets * record.feature_dim * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValidationError(
            f"video {record.id!r}: feature file is {actual} bytes, expected "
            f"{expected} (T={record.num_snippets}, D={record.feature_dim})"
        )
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(record.num_snippets, record.feature_dim)


def load_dataset(manifest_path: str) -> list[VideoSample]:
    """Load every video listed in the manifest, validating all invariants."""
    manifest = load_manifest(manifest_path)
    samples = []
    for record in manifest.records:
        feats = _load_features(feature_path(manifest, record.id), record)
        sample = VideoSample(
            id=record.id,
            features=feats,
            labels=frozenset(record.labels),
            snippet_duration=record.snippet_duration,
            segments=record.segments,
            fully_annotated=record.fully_annotated,
        )
        sample.validate(manifest.num_classes)
        samples.append(sample)
    return samples


def manifest_from_samples(
    samples: list[VideoSample], num_classes: int, class_names: list[str] | tuple[str, ...]
) -> DatasetManifest:
    records = tuple(
        VideoRecord(
            id=s.id,
            num_snippets=s.num_snippets,
            feature_dim=s.feature_dim,
            labels=tuple(sorted(s.labels)),
            snippet_duration=s.snippet_duration,
            segments=s.segments,
            fully_annotated=s.fully_annotated,
        )
        for s in samples
    )
    manifest = DatasetManifest(num_classes=num_classes, class_names=tuple(class_names), records=records)
    manifest.validate()
    return manifest


def manifest_to_json(manifest: DatasetManifest) -> str:
    videos = []
    for r in manifest.records:
        entry = {
            "id": r.id,
            "num_snippets": r.num_snippets,
            "feature_dim": r.feature_dim,
            "labels": list(r.labels),
            "snippet_duration": r.snippet_duration,
            "fully_annotated": r.fully_annotated,
            "segments": None if r.segments is None else [_segment_to_json(s) for s in r.segments],
        }
        videos.append(entry)
    obj = {
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "videos": videos,
    }
    return json.dumps(obj, indent=2, sort_keys=True)


def write_dataset(
    samples: list[VideoSample],
    num_classes: int,
    class_names: list[str] | tuple[str, ...],
    out_dir: str,
) -> str:
    """Write manifest + feature files into ``out_dir``; returns manifest path.

    Files are staged under a temporary name and renamed into place so a
    failed write never leaves a partial dataset behind.
    """
    for s in samples:
        s.validate(num_classes)
    manifest = manifest_from_samples(samples, num_classes, class_names)
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for s in samples:
            tmp = os.path.join(out_dir, f".{s.id}.f32.tmp")
            s.features.astype("<f4").tofile(tmp)
            staged.append((tmp, os.path.join(out_dir, f"{s.id}.f32")))
        tmp_manifest = os.path.join(out_dir, ".manifest.json.tmp")
        with open(tmp_manifest, "w", encoding="utf-8") as fh:
            fh.write(manifest_to_json(manifest))
            fh.write("\n")
        manifest_path = os.path.join(out_dir, "manifest.json")
        staged.append((tmp_manifest, manifest_path))
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return manifest_path
