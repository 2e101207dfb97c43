"""On-disk feature format, dataset manifest, and synthetic data.

Feature file layout (little-endian):

    magic   4 bytes  b"WSVF"
    version u8       1
    dtype   u8       0 (float32)
    ndim    u8       3
    dims    3 x u32  (T, C, D)
    payload T*C*D float32, row-major

Manifest: JSON Lines, one video per line with fields ``video_id``,
``label`` (0|1), ``split`` ("train"|"test"), per-modality feature paths,
and optional ``frame_count`` and ``snippet_labels`` (per-snippet ground
truth used for frame-level evaluation of synthetic/test data).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FeatureIOError, FormatError, ValidationError

MAGIC = b"WSVF"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sBBB3I")

FRAMES_PER_SNIPPET = 16

MODALITIES = ("rgb_i3d", "clip", "flow_i3d", "audio_vggish")

# canonical per-modality widths at full scale; synthetic manifests override
MODALITY_DIMS = {"rgb_i3d": 1024, "clip": 512, "flow_i3d": 1024, "audio_vggish": 128}

VALID_CROPS = (1, 5)


@dataclass
class FeatureSequence:
    """Per-video, per-modality snippet features of shape (T, C, D)."""

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise FormatError(f"feature tensor must be 3-d (T, C, D), got {self.data.shape}")
        t, c, d = self.data.shape
        if t < 1 or d < 1:
            raise FormatError(f"feature extents must be positive, got {self.data.shape}")
        if c not in VALID_CROPS:
            raise FormatError(f"crop count must be 1 or 5, got {c}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)

    @property
    def snippets(self) -> int:
        return self.data.shape[0]

    @property
    def crops(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def snippet_count(frame_count: int) -> int:
    """Number of 16-frame snippets in a video; videos shorter than one
    snippet are rejected."""
    t = frame_count // FRAMES_PER_SNIPPET
    if t < 1:
        raise ValidationError(
            f"video of {frame_count} frames is shorter than one {FRAMES_PER_SNIPPET}-frame snippet")
    return t


# ----------------------------------------------------------------------
# binary round trip
# ----------------------------------------------------------------------

def write_features(seq: FeatureSequence, path) -> None:
    t, c, d = seq.data.shape
    header = HEADER.pack(MAGIC, VERSION, DTYPE_F32, 3, t, c, d)
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_header(path) -> tuple[int, int, int]:
    """Validate a feature-file header and return (T, C, D) without
    touching the payload."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read(HEADER.size)
    except OSError as exc:
        raise FeatureIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise FeatureIOError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, ndim, t, c, d = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if ndim != 3:
        raise FormatError(f"{path}: expected 3 dims, header says {ndim}")
    if t < 1 or d < 1 or c not in VALID_CROPS:
        raise FormatError(f"{path}: invalid extents (T={t}, C={c}, D={d})")
    return t, c, d


def read_features(path, modality: str = "unknown") -> FeatureSequence:
    t, c, d = read_header(path)
    expected = t * c * d * 4
    try:
        actual = Path(path).stat().st_size - HEADER.size
    except OSError as exc:
        raise FeatureIOError(f"cannot stat {path}: {exc}") from exc
    # size check before any allocation: corrupt dims must not trigger one
    if actual < expected:
        raise FeatureIOError(f"{path}: payload truncated ({actual} of {expected} bytes)")
    if actual > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    try:
        with open(path, "rb") as fh:
            fh.seek(HEADER.size)
            payload = fh.read(expected)
    except OSError as exc:
        raise FeatureIOError(f"cannot read {path}: {exc}") from exc
    if len(payload) != expected:
        raise FeatureIOError(f"{path}: payload truncated while reading")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, c, d).copy()
    return FeatureSequence(modality=modality, data=data)


# ----------------------------------------------------------------------
# video bags and the manifest
# ----------------------------------------------------------------------

@dataclass
class VideoBag:
    """One labeled video: a bag of snippet features across modalities.

    Features load lazily from ``paths`` unless ``sequences`` was filled
    in directly (synthetic data)."""

    video_id: str
    label: int
    split: str
    snippets: int
    frame_count: int | None = None
    paths: dict[str, Path] = field(default_factory=dict)
    sequences: dict[str, FeatureSequence] = field(default_factory=dict)
    snippet_labels: np.ndarray | None = None

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.sequences) | set(self.paths)))

    def features(self, modality: str) -> FeatureSequence:
        if modality not in self.sequences:
            if modality not in self.paths:
                raise ValidationError(f"{self.video_id}: no features for modality {modality!r}")
            self.sequences[modality] = read_features(self.paths[modality], modality)
        return self.sequences[modality]

    @property
    def frames(self) -> int:
        return self.frame_count if self.frame_count is not None else self.snippets * FRAMES_PER_SNIPPET


def load_manifest(path) -> list[VideoBag]:
    """Parse and validate a JSON-Lines manifest; features stay on disk."""
    base = Path(path).parent
    bags = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            bags.append(_validate_record(rec, base, f"{path}:{lineno}"))
    return bags


def _validate_record(rec: dict, base: Path, where: str) -> VideoBag:
    video_id = rec.get("video_id")
    if not isinstance(video_id, str) or not video_id:
        raise ValidationError(f"{where}: missing or empty video_id")
    label = rec.get("label")
    if label not in (0, 1):
        raise ValidationError(f"{video_id}: label must be 0 or 1, got {label!r}")
    split = rec.get("split")
    if split not in ("train", "test"):
        raise ValidationError(f"{video_id}: split must be 'train' or 'test', got {split!r}")

    paths: dict[str, Path] = {}
    snippet_counts: dict[str, int] = {}
    for modality in MODALITIES:
        if modality not in rec or rec[modality] is None:
            continue
        p = Path(rec[modality])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ValidationError(f"{video_id}: feature file missing: {p}")
        t, _, _ = read_header(p)
        paths[modality] = p
        snippet_counts[modality] = t
    if not paths:
        raise ValidationError(f"{video_id}: record carries no feature files")
    counts = set(snippet_counts.values())
    if len(counts) > 1:
        raise ValidationError(
            f"{video_id}: snippet counts differ across modalities: {snippet_counts}")
    t = counts.pop()

    frame_count = rec.get("frame_count")
    if frame_count is not None:
        if not isinstance(frame_count, int) or frame_count < 0:
            raise ValidationError(f"{video_id}: frame_count must be a non-negative integer")
        expected = snippet_count(frame_count)
        if expected != t:
            raise ValidationError(
                f"{video_id}: frame_count {frame_count} implies {expected} snippets, "
                f"features have {t}")

    snippet_labels = rec.get("snippet_labels")
    if snippet_labels is not None:
        arr = np.asarray(snippet_labels, dtype=np.int64)
        if arr.shape != (t,) or not np.isin(arr, (0, 1)).all():
            raise ValidationError(f"{video_id}: snippet_labels must be {t} values in {{0,1}}")
        if label == 0 and arr.any():
            raise ValidationError(f"{video_id}: normal video carries anomalous snippet labels")
        snippet_labels = arr

    return VideoBag(video_id=video_id, label=label, split=split, snippets=t,
                    frame_count=frame_count, paths=paths, snippet_labels=snippet_labels)


# ----------------------------------------------------------------------
# crop handling
# ----------------------------------------------------------------------

def collapse_crops(seq: FeatureSequence, mode: str):
    """``mean``: average crops to C=1.  ``flatten_as_batch``: split the C
    crops into independent (T, 1, D) sequences for training."""
    if mode == "mean":
        if seq.crops == 1:
            return seq
        return FeatureSequence(seq.modality, seq.data.mean(axis=1, keepdims=True,
                                                           dtype=np.float64).astype(np.float32))
    if mode == "flatten_as_batch":
        return [FeatureSequence(seq.modality, seq.data[:, c:c + 1, :].copy())
                for c in range(seq.crops)]
    raise ContractError(f"unknown crop mode {mode!r}")


# ----------------------------------------------------------------------
# synthetic data with a known separator
# ----------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Recipe for a desk-scale dataset with a known anomaly structure.

    Normal snippets are standard normal per dimension.  Each abnormal
    video carries one contiguous span whose snippets are mean-shifted on
    a fixed 10% subspace and scaled whole-vector by ``magnitude_gain``:
    anomalous x = gain * (draw + shift * subspace_mask).
    """

    n_normal: int
    n_abnormal: int
    t_range: tuple[int, int] = (8, 24)
    anomaly_span_fraction: float = 0.5
    mean_shift: float = 4.0
    magnitude_gain: float = 1.5
    dims: dict[str, int] = field(default_factory=lambda: {
        "rgb_i3d": 64, "clip": 32, "flow_i3d": 64, "audio_vggish": 16})
    crops: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_normal < 1 or self.n_abnormal < 1:
            raise ContractError("need at least one normal and one abnormal video")
        if not 0.0 < self.anomaly_span_fraction <= 1.0:
            raise ContractError("anomaly_span_fraction must be in (0, 1]")
        if self.t_range[0] < 1 or self.t_range[1] < self.t_range[0]:
            raise ContractError(f"bad t_range {self.t_range}")


@dataclass
class OracleScores:
    """Per-snippet squared distance to the normal mean (zero vector),
    summed over modalities: an adequate separator for the synthetic
    recipe, used to bound what a trained model can achieve."""

    scores: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        ids = sorted(self.scores)
        return (np.concatenate([self.scores[v] for v in ids]),
                np.concatenate([self.labels[v] for v in ids]))


def generate_synth(spec: SynthSpec) -> tuple[list[VideoBag], OracleScores]:
    """Deterministically generate labeled bags plus oracle scores."""
    rng = np.random.default_rng(spec.seed)
    subspaces = {m: rng.choice(d, size=max(1, round(0.1 * d)), replace=False)
                 for m, d in spec.dims.items()}

    bags: list[VideoBag] = []
    oracle_scores: dict[str, np.ndarray] = {}
    oracle_labels: dict[str, np.ndarray] = {}

    def make_video(idx: int, label: int) -> VideoBag:
        video_id = f"{'abn' if label else 'nrm'}_{idx:04d}"
        t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        snippet_labels = np.zeros(t, dtype=np.int64)
        if label == 1:
            span = max(1, round(spec.anomaly_span_fraction * t))
            start = int(rng.integers(0, t - span + 1))
            snippet_labels[start:start + span] = 1
        sequences = {}
        sq_dist = np.zeros(t, dtype=np.float64)
        for modality, d in spec.dims.items():
            data = rng.standard_normal((t, spec.crops, d)).astype(np.float32)
            if label == 1:
                anom = snippet_labels.astype(bool)
                shifted = data[anom].astype(np.float64)
                shifted[:, :, subspaces[modality]] += spec.mean_shift
                data[anom] = (spec.magnitude_gain * shifted).astype(np.float32)
            sequences[modality] = FeatureSequence(modality, data)
            sq_dist += (data.astype(np.float64) ** 2).sum(axis=2).mean(axis=1)
        oracle_scores[video_id] = sq_dist
        oracle_labels[video_id] = snippet_labels
        return VideoBag(video_id=video_id, label=label, split="train", snippets=t,
                        frame_count=t * FRAMES_PER_SNIPPET, sequences=sequences,
                        snippet_labels=snippet_labels)

    for i in range(spec.n_normal):
        bags.append(make_video(i, 0))
    for i in range(spec.n_abnormal):
        bags.append(make_video(i, 1))
    return bags, OracleScores(oracle_scores, oracle_labels)


def split_synth(bags: list[VideoBag], n_test_normal: int, n_test_abnormal: int) -> None:
    """Mark the last n videos of each label as the test split, in place."""
    normal = [b for b in bags if b.label == 0]
    abnormal = [b for b in bags if b.label == 1]
    if n_test_normal > len(normal) or n_test_abnormal > len(abnormal):
        raise ContractError("test split larger than the generated dataset")
    for b in normal[len(normal) - n_test_normal:]:
        b.split = "test"
    for b in abnormal[len(abnormal) - n_test_abnormal:]:
        b.split = "test"


def write_dataset(bags: list[VideoBag], oracle: OracleScores | None, out_dir) -> Path:
    """Write feature files plus ``manifest.jsonl`` (and oracle scores as
    CSV when available); returns the manifest path."""
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for bag in bags:
            rec = {"video_id": bag.video_id, "label": bag.label, "split": bag.split,
                   "frame_count": bag.frames}
            for modality in bag.modalities:
                p = feat_dir / f"{bag.video_id}.{modality}.wsvf"
                write_features(bag.features(modality), p)
                rec[modality] = str(p.relative_to(out))
            if bag.snippet_labels is not None:
                rec["snippet_labels"] = [int(v) for v in bag.snippet_labels]
            fh.write(json.dumps(rec) + "\n")
    if oracle is not None:
        with open(out / "oracle_scores.csv", "w", encoding="utf-8") as fh:
            fh.write("video_id,snippet,score,label\n")
            for vid in sorted(oracle.scores):
                for i, (s, l) in enumerate(zip(oracle.scores[vid], oracle.labels[vid])):
                    fh.write(f"{vid},{i},{s:.6f},{int(l)}\n")
    return manifest_path
