"""Clip records, embedding bundles, on-disk formats and the synthetic-data generator.

On-disk layout of a dataset directory:

    manifest.jsonl        header line + one JSON record per clip
    streams/<name>.bin    binary per-stream matrix, records in manifest order
    truth.jsonl           hidden true-quality sidecar (synthetic runs only)

Stream binary format: magic "DUBE", u32 format_version, u32 dim, u64 count,
then count*dim float32 little-endian values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

STREAM_MAGIC = b"DUBE"
FORMAT_VERSION = 1

# stream name -> (modality, embedding dim)
STREAM_SPECS = {
    "audio_content": ("audio", 768),
    "audio_speaker": ("audio", 192),
    "audio_emotion": ("audio", 256),
    "video_scene": ("video", 768),
    "video_face": ("video", 512),
    "text_semantic": ("text", 768),
}
STREAM_NAMES = tuple(STREAM_SPECS)
MODALITIES = ("audio", "video", "text")
MODALITY_STREAMS = {
    m: tuple(s for s, (mm, _) in STREAM_SPECS.items() if mm == m) for m in MODALITIES
}

METRIC_NAMES = ("peavs", "emosync", "logf0rmse", "utmos", "speechbert")
# LogF0RMSE is stored raw; lower raw value means better quality.
LOWER_BETTER = ("logf0rmse",)

LANGUAGE_DIRECTIONS = ("en-hi", "hi-en")


@dataclass(frozen=True)
class RaterScore:
    rater_id: str
    score: float
    rubric: dict[str, float] | None = None

    def __post_init__(self):
        if not (1.0 <= self.score <= 5.0):
            raise DataError(f"rater score {self.score} outside [1, 5]")
        if self.rubric is not None:
            for aspect, v in self.rubric.items():
                if not (1.0 <= v <= 5.0):
                    raise DataError(f"rubric score {v} for {aspect!r} outside [1, 5]")


@dataclass(frozen=True)
class ObjectiveVector:
    peavs: float
    emosync: float
    logf0rmse: float
    utmos: float
    speechbert: float

    def __post_init__(self):
        for name in METRIC_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"non-finite objective metric: {name}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    language_direction: str
    duration_s: float
    speaker_id: str
    background_label: str
    is_ground_truth: bool
    objective: ObjectiveVector
    human_ratings: tuple[RaterScore, ...] = ()
    split: str | None = None

    def __post_init__(self):
        if self.language_direction not in LANGUAGE_DIRECTIONS:
            raise DataError(
                f"unknown language_direction {self.language_direction!r} "
                f"(expected one of {LANGUAGE_DIRECTIONS})"
            )
        if not (self.duration_s > 0):
            raise DataError(f"duration_s must be positive, got {self.duration_s}")

    @property
    def mean_rating(self) -> float | None:
        if not self.human_ratings:
            return None
        return float(np.mean([r.score for r in self.human_ratings]))


@dataclass(frozen=True)
class EmbeddingBundle:
    """Per-clip, temporally pre-pooled vectors for the six streams."""

    audio_content: np.ndarray
    audio_speaker: np.ndarray
    audio_emotion: np.ndarray
    video_scene: np.ndarray
    video_face: np.ndarray
    text_semantic: np.ndarray

    def __post_init__(self):
        for name, (_, dim) in STREAM_SPECS.items():
            v = getattr(self, name)
            if v.shape != (dim,):
                raise DataError(
                    f"dimension mismatch for stream {name!r}: "
                    f"expected {dim}, got {v.shape}"
                )
            if not np.all(np.isfinite(v)):
                raise DataError(f"non-finite values in stream {name!r}")


@dataclass
class Manifest:
    records: list[ClipRecord]
    streams: dict[str, np.ndarray]  # stream name -> (n_records, dim) float32
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.clip_id in seen:
                raise DataError(f"duplicate clip_id: {rec.clip_id!r}")
            seen.add(rec.clip_id)
        n = len(self.records)
        for name, (_, dim) in STREAM_SPECS.items():
            if name not in self.streams:
                raise DataError(f"missing stream: {name!r}")
            arr = self.streams[name]
            if arr.shape != (n, dim):
                raise DataError(
                    f"dimension mismatch for stream {name!r}: "
                    f"expected ({n}, {dim}), got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                bad = int(np.argwhere(~np.all(np.isfinite(arr), axis=1))[0, 0])
                raise DataError(
                    f"non-finite values in stream {name!r} "
                    f"for clip {self.records[bad].clip_id!r}"
                )
        self._index = {rec.clip_id: i for i, rec in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def row(self, clip_id: str) -> int:
        try:
            return self._index[clip_id]
        except KeyError:
            raise DataError(f"unknown clip_id: {clip_id!r}") from None

    def record(self, clip_id: str) -> ClipRecord:
        return self.records[self.row(clip_id)]

    def bundle(self, clip_id: str) -> EmbeddingBundle:
        i = self.row(clip_id)
        return EmbeddingBundle(
            **{name: self.streams[name][i].astype(np.float64) for name in STREAM_NAMES}
        )

    def objective_matrix(self, clip_ids=None) -> np.ndarray:
        """(n, 5) matrix of raw objective metrics in METRIC_NAMES order."""
        recs = self.records if clip_ids is None else [self.record(c) for c in clip_ids]
        return np.array([r.objective.as_array() for r in recs])

    def rated_records(self) -> list[ClipRecord]:
        return [r for r in self.records if r.human_ratings]


@dataclass(frozen=True)
class SyntheticSpec:
    n_clips: int = 600
    latent_dim: int = 8
    true_metric_weights: tuple[float, ...] = (0.7, 0.0, 0.0, 0.3, 0.0)
    metric_noise_sigma: float = 0.1
    rater_noise_sigma: float = 0.3
    n_raters: int = 8
    seed: int = 0
    # extra knobs beyond the core contract, all defaulted
    rated_fraction: float = 0.25
    raters_per_clip: int | None = None  # None -> every rater rates every rated clip
    ground_truth_fraction: float = 0.1
    modality_noise_sigma: float = 0.35
    embedding_noise_sigma: float = 0.3
    quality_sigma: float = 0.8  # spread of latent quality around 3.0

    def __post_init__(self):
        w = np.asarray(self.true_metric_weights, dtype=np.float64)
        if w.shape != (5,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(
                "true_metric_weights must be 5 non-negative values summing to 1"
            )
        if self.n_clips < 1 or self.latent_dim < 1 or self.n_raters < 1:
            raise ConfigError("n_clips, latent_dim and n_raters must be positive")
        if self.metric_noise_sigma < 0 or self.rater_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if not (0.0 <= self.rated_fraction <= 1.0):
            raise ConfigError("rated_fraction must be in [0, 1]")


# nominal slope/intercept used to put each metric on a plausible raw scale
_METRIC_AFFINE = {
    "peavs": (50.0, 20.0),
    "emosync": (0.5, 0.2),
    "logf0rmse": (0.3, -0.12),  # negative slope: lower raw value is better
    "utmos": (3.2, 0.7),
    "speechbert": (0.75, 0.1),
}


def generate_synthetic(spec: SyntheticSpec) -> tuple[Manifest, dict[str, float]]:
    """Build a manifest plus a hidden true-quality table.

    A latent quality q in [1, 5] drives everything: objective metrics are noisy
    affine reads of q (strength set by true_metric_weights, LogF0RMSE flipped so
    lower raw is better), human ratings are q plus rater noise clamped to
    [1, 5], and each embedding stream is a fixed random linear map of
    (modality-distorted q, nuisance latents) plus noise. Deterministic given
    spec.seed. The returned table is never written into the manifest.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_clips

    n_gt = int(round(spec.ground_truth_fraction * n))
    q = np.clip(rng.normal(3.0, spec.quality_sigma, size=n), 1.0, 5.0)
    if n_gt:
        # original, non-dubbed clips sit near the top of the scale
        gt_idx = rng.choice(n, size=n_gt, replace=False)
        q[gt_idx] = np.clip(rng.normal(4.6, 0.2, size=n_gt), 1.0, 5.0)
        is_gt = np.zeros(n, dtype=bool)
        is_gt[gt_idx] = True
    else:
        is_gt = np.zeros(n, dtype=bool)
    q_std = (q - 3.0) / 1.0

    # objective metrics
    w = np.asarray(spec.true_metric_weights, dtype=np.float64)
    slope = w / w.max()
    metric_vals = {}
    for j, name in enumerate(METRIC_NAMES):
        signal = slope[j] * q_std + spec.metric_noise_sigma * rng.normal(size=n)
        base, scale = _METRIC_AFFINE[name]
        metric_vals[name] = base + scale * signal

    # clip metadata
    directions = rng.choice(len(LANGUAGE_DIRECTIONS), size=n)
    durations = np.exp(rng.normal(1.5, 0.4, size=n))
    n_speakers = max(4, n // 30)
    speakers = rng.integers(0, n_speakers, size=n)
    backgrounds = ("quiet", "street", "music", "crowd")
    bg = rng.integers(0, len(backgrounds), size=n)

    # human ratings on a random subset of clips
    n_rated = int(round(spec.rated_fraction * n))
    rated_idx = set(rng.choice(n, size=n_rated, replace=False).tolist()) if n_rated else set()
    rater_ids = [f"r{j:02d}" for j in range(spec.n_raters)]
    per_clip = spec.raters_per_clip or spec.n_raters
    per_clip = min(per_clip, spec.n_raters)

    records = []
    truth: dict[str, float] = {}
    for i in range(n):
        clip_id = f"clip{i:05d}"
        truth[clip_id] = float(q[i])
        ratings: list[RaterScore] = []
        if i in rated_idx:
            if per_clip == spec.n_raters:
                chosen = range(spec.n_raters)
            else:
                chosen = sorted(rng.choice(spec.n_raters, size=per_clip, replace=False))
            for j in chosen:
                score = float(
                    np.clip(q[i] + spec.rater_noise_sigma * rng.normal(), 1.0, 5.0)
                )
                ratings.append(RaterScore(rater_id=rater_ids[j], score=score))
        records.append(
            ClipRecord(
                clip_id=clip_id,
                language_direction=LANGUAGE_DIRECTIONS[directions[i]],
                duration_s=float(durations[i]),
                speaker_id=f"spk{speakers[i]:03d}",
                background_label=backgrounds[bg[i]],
                is_ground_truth=bool(is_gt[i]),
                objective=ObjectiveVector(
                    **{name: float(metric_vals[name][i]) for name in METRIC_NAMES}
                ),
                human_ratings=tuple(ratings),
            )
        )

    # embedding streams: each modality sees a distorted copy of q
    nuisance = rng.normal(size=(n, spec.latent_dim))
    modality_q = {
        m: q_std + spec.modality_noise_sigma * rng.normal(size=n) for m in MODALITIES
    }
    streams = {}
    for name, (modality, dim) in STREAM_SPECS.items():
        a = rng.normal(size=dim)
        g = rng.normal(size=(spec.latent_dim, dim)) / np.sqrt(spec.latent_dim)
        h = (
            np.outer(modality_q[modality], a)
            + nuisance @ g
            + spec.embedding_noise_sigma * rng.normal(size=(n, dim))
        )
        streams[name] = h.astype(np.float32)

    return Manifest(records=records, streams=streams), truth


# ---------------------------------------------------------------------------
# serialization

def _record_to_json(rec: ClipRecord) -> dict:
    d = {
        "clip_id": rec.clip_id,
        "language_direction": rec.language_direction,
        "duration_s": rec.duration_s,
        "speaker_id": rec.speaker_id,
        "background_label": rec.background_label,
        "is_ground_truth": rec.is_ground_truth,
        "objective": {n: getattr(rec.objective, n) for n in METRIC_NAMES},
        "human_ratings": [
            {"rater_id": r.rater_id, "score": r.score}
            | ({"rubric": r.rubric} if r.rubric is not None else {})
            for r in rec.human_ratings
        ],
    }
    if rec.split is not None:
        d["split"] = rec.split
    return d


def _record_from_json(d: dict) -> ClipRecord:
    try:
        return ClipRecord(
            clip_id=d["clip_id"],
            language_direction=d["language_direction"],
            duration_s=float(d["duration_s"]),
            speaker_id=d["speaker_id"],
            background_label=d["background_label"],
            is_ground_truth=bool(d["is_ground_truth"]),
            objective=ObjectiveVector(**{k: float(v) for k, v in d["objective"].items()}),
            human_ratings=tuple(
                RaterScore(r["rater_id"], float(r["score"]), r.get("rubric"))
                for r in d.get("human_ratings", [])
            ),
            split=d.get("split"),
        )
    except KeyError as e:
        raise DataError(f"manifest record missing field {e}") from None


def write_stream(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    count, dim = arr.shape
    with open(path, "wb") as f:
        f.write(STREAM_MAGIC)
        f.write(struct.pack("<IIQ", FORMAT_VERSION, dim, count))
        f.write(arr.tobytes())


def read_stream(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing stream file: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != STREAM_MAGIC:
            raise DataError(f"bad magic in stream file {path}: {magic!r}")
        version, dim, count = struct.unpack("<IIQ", f.read(16))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported stream format_version {version} in {path}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * dim:
        raise DataError(f"truncated stream file {path}")
    return data.reshape(count, dim)


def write_manifest(manifest: Manifest, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "streams").mkdir(parents=True, exist_ok=True)
    stream_files = {name: f"streams/{name}.bin" for name in STREAM_NAMES}
    for name in STREAM_NAMES:
        write_stream(out_dir / stream_files[name], manifest.streams[name])
    path = out_dir / "manifest.jsonl"
    with open(path, "w") as f:
        header = {
            "format_version": manifest.format_version,
            "n_records": len(manifest.records),
            "stream_files": stream_files,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            f.write(json.dumps(_record_to_json(rec), sort_keys=True) + "\n")
    return path


def load_manifest(path: Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"manifest header parse error: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported manifest format_version: {version}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(_record_from_json(json.loads(line)))
        except json.JSONDecodeError as e:
            raise DataError(f"manifest parse error at line {ln}: {e}") from None
    if len(records) != header.get("n_records"):
        raise DataError(
            f"record count mismatch: header says {header.get('n_records')}, "
            f"found {len(records)}"
        )
    streams = {}
    for name, (_, dim) in STREAM_SPECS.items():
        rel = header.get("stream_files", {}).get(name)
        if rel is None:
            raise DataError(f"manifest header missing stream file for {name!r}")
        arr = read_stream(path.parent / rel)
        if arr.shape[1] != dim:
            raise DataError(
                f"dimension mismatch for stream {name!r}: "
                f"expected {dim}, got {arr.shape[1]}"
            )
        streams[name] = arr
    return Manifest(records=records, streams=streams, format_version=version)


def write_truth(truth: dict[str, float], out_dir: Path) -> Path:
    path = Path(out_dir) / "truth.jsonl"
    with open(path, "w") as f:
        f.write(json.dumps({"sidecar": "true-quality", "note": "oracle only, not training data"}) + "\n")
        for clip_id in sorted(truth):
            f.write(json.dumps({"clip_id": clip_id, "true_quality": truth[clip_id]}) + "\n")
    return path


def load_truth(path: Path) -> dict[str, float]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"truth sidecar not found: {path}")
    with open(path) as f:
        lines = f.read().splitlines()
    truth = {}
    for line in lines[1:]:
        if line.strip():
            d = json.loads(line)
            truth[d["clip_id"]] = float(d["true_quality"])
    return truth


# ---------------------------------------------------------------------------
# splits

def kfold_split(records: list, k: int, seed: int) -> list[tuple[list, list]]:
    """Disjoint, exhaustive folds with sizes differing by at most one."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(records):
        raise DataError(f"k={k} exceeds number of records ({len(records)})")
    order = np.random.default_rng(seed).permutation(len(records))
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        val = [records[j] for j in folds[i]]
        train = [records[j] for f in folds[:i] + folds[i + 1:] for j in f]
        out.append((train, val))
    return out


def holdout_split(records: list, fraction: float, seed: int) -> tuple[list, list]:
    if not records:
        raise DataError("cannot split an empty record list")
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    n = len(records)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test
