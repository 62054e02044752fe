"""Dataset ingestion, synthetic planted datasets, splits and frame sampling.

On-disk layout is a JSON manifest plus one binary tensor file per array.
Tensor files ("SVSF") are::

    offset 0   magic   b"SVSF"
           4   u32     version (1)
           8   u32     dtype (1 = float32, 2 = float64)
          12   u32     ndim
          16   u64 * ndim   dimension sizes
          ...  payload, row-major

All integers are little-endian.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError
from .tensor import Rng

MAGIC = b"SVSF"
FORMAT_VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIII")


# -- tensor files -----------------------------------------------------------

def encode_tensor(array, dtype: int = DTYPE_F32) -> bytes:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype code {dtype}")
    arr = np.asarray(array)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    arr = np.asarray(arr, dtype=_DTYPES[dtype])
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, dtype, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype code {dtype}", offset=8)
    dims_end = _HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dimension table", offset=len(buf))
    shape = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size)
    expected = math.prod(shape) * _DTYPES[dtype].itemsize
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {payload}", offset=dims_end + payload)
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", offset=dims_end + expected)
    return np.frombuffer(buf, dtype=_DTYPES[dtype], offset=dims_end, count=math.prod(shape)).reshape(shape).copy()


def write_feature_file(path, array, dtype: int = DTYPE_F32) -> None:
    data = encode_tensor(array, dtype)
    Path(path).write_bytes(data)


def read_feature_file(path) -> np.ndarray:
    """Read a tensor file; float32 payloads are widened to float64."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"no such tensor file: {path}") from None
    try:
        arr = decode_tensor(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return arr.astype(np.float64)


# -- dataset types ----------------------------------------------------------

@dataclass
class VideoSample:
    id: str
    frame_features: np.ndarray
    gt_scores: np.ndarray | None = None
    user_annotations: np.ndarray | None = None
    segments: list[tuple[int, int]] | None = None
    teacher_repr: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frame_features.shape[0]

    def validate(self, input_dim: int | None = None, teacher_dim: int | None = None) -> None:
        vid = self.id
        f = self.frame_features
        if f.ndim != 2 or f.shape[0] == 0:
            raise ValidationError(f"expected a nonempty n x d matrix, got shape {f.shape}", vid, "features")
        if input_dim is not None and f.shape[1] != input_dim:
            raise ValidationError(f"feature width {f.shape[1]} != input_dim {input_dim}", vid, "features")
        n = f.shape[0]
        if self.gt_scores is not None:
            _check_scores(self.gt_scores, (n,), vid, "gt_scores")
        if self.user_annotations is not None:
            ua = self.user_annotations
            if ua.ndim != 2 or ua.shape[1] != n or ua.shape[0] == 0:
                raise ValidationError(f"expected shape (U, {n}), got {ua.shape}", vid, "user_annotations")
            _check_scores(ua, ua.shape, vid, "user_annotations")
        if self.segments is not None:
            validate_segments(self.segments, n, vid)
        if self.teacher_repr is not None:
            t = self.teacher_repr
            if t.ndim != 1 or (teacher_dim is not None and t.shape[0] != teacher_dim):
                raise ValidationError(f"teacher_repr shape {t.shape} != ({teacher_dim},)", vid, "teacher_repr")


def _check_scores(arr, shape, vid, name):
    if arr.shape != tuple(shape):
        raise ValidationError(f"length mismatch: expected shape {tuple(shape)}, got {arr.shape}", vid, name)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("scores must lie in [0, 1]", vid, name)


def validate_segments(segments, n: int, video_id=None) -> None:
    """Segments must be sorted, disjoint, nonempty [start, end) pairs covering [0, n)."""
    expected_start = 0
    for k, seg in enumerate(segments):
        if len(seg) != 2:
            raise ValidationError(f"segment {k} is not a [start, end) pair", video_id, "segments")
        s, e = int(seg[0]), int(seg[1])
        if e <= s:
            raise ValidationError(f"segment {k} [{s}, {e}) is empty", video_id, "segments")
        if s < expected_start:
            raise ValidationError(f"segment {k} [{s}, {e}) overlaps its predecessor", video_id, "segments")
        if s > expected_start:
            raise ValidationError(f"gap before segment {k}: frames [{expected_start}, {s}) uncovered", video_id, "segments")
        expected_start = e
    if expected_start != n:
        raise ValidationError(f"segments cover [0, {expected_start}) but video has {n} frames", video_id, "segments")


@dataclass
class Dataset:
    name: str
    input_dim: int
    teacher_dim: int
    videos: list[VideoSample] = field(default_factory=list)

    def __post_init__(self):
        ids = [v.id for v in self.videos]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError("duplicate video id", dup, "id")

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    @property
    def ids(self) -> list[str]:
        return [v.id for v in self.videos]

    def get(self, video_id: str) -> VideoSample:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise KeyError(video_id)

    def subset(self, ids) -> list[VideoSample]:
        return [self.get(i) for i in ids]

    def validate(self) -> None:
        for v in self.videos:
            v.validate(self.input_dim, self.teacher_dim)


# -- manifests --------------------------------------------------------------

def load_manifest(path) -> Dataset:
    """Load and fully validate a dataset manifest; nothing is returned on failure."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("manifest must be a JSON object")
    for key in ("name", "input_dim", "teacher_dim", "videos"):
        if key not in doc:
            raise ValidationError(f"manifest missing key {key!r}")
    root = path.parent
    videos = []
    for entry in doc["videos"]:
        vid = entry.get("id")
        if vid is None:
            raise ValidationError("video entry without id")

        def load(field_name, required=False):
            rel = entry.get(field_name)
            if rel is None:
                if required:
                    raise ValidationError("missing file reference", vid, field_name)
                return None
            try:
                return read_feature_file(root / rel)
            except FormatError as exc:
                raise ValidationError(str(exc), vid, field_name) from None

        feats = load("features", required=True)
        sample = VideoSample(
            id=str(vid),
            frame_features=feats,
            gt_scores=load("gt_scores"),
            user_annotations=load("user_annotations"),
            segments=[(int(s), int(e)) for s, e in entry["segments"]] if entry.get("segments") is not None else None,
            teacher_repr=load("teacher_repr"),
        )
        n_decl = entry.get("n_frames")
        if n_decl is not None and int(n_decl) != sample.n_frames:
            raise ValidationError(f"n_frames {n_decl} != feature rows {sample.n_frames}", vid, "n_frames")
        sample.validate(int(doc["input_dim"]), int(doc["teacher_dim"]))
        videos.append(sample)
    return Dataset(str(doc["name"]), int(doc["input_dim"]), int(doc["teacher_dim"]), videos)


def save_dataset(dataset: Dataset, directory, manifest_name: str = "manifest.json") -> Path:
    """Write ``dataset`` as a manifest plus float32 tensor files; returns the manifest path."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.videos:
        stem = f"tensors/{v.id}"
        entry = {"id": v.id, "n_frames": v.n_frames, "features": stem + ".features.svsf"}
        write_feature_file(directory / entry["features"], v.frame_features)
        for key, arr in (("gt_scores", v.gt_scores), ("user_annotations", v.user_annotations), ("teacher_repr", v.teacher_repr)):
            if arr is None:
                entry[key] = None
            else:
                entry[key] = f"{stem}.{key}.svsf"
                write_feature_file(directory / entry[key], arr)
        entry["segments"] = [list(s) for s in v.segments] if v.segments is not None else None
        entries.append(entry)
    doc = {"name": dataset.name, "input_dim": dataset.input_dim, "teacher_dim": dataset.teacher_dim, "videos": entries}
    out = directory / manifest_name
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


# -- synthetic planted data -------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Planted-importance generator settings.

    Every frame gets an importance logit: ``saliency_gain`` times a standard
    normal draw, plus ``boost`` on a random ``sparsity`` fraction of frames.
    Planted weights are the softmax of the logits.  Frame features are
    Gaussian noise orthogonal to a dataset-wide saliency direction, plus
    ``saliency_scale`` times the logit along that direction, so importance
    is readable from the frame alone.  ``teacher_scale`` sets the spread of
    the teacher map and hence how peaked the teacher distributions are.
    """

    n_videos: int = 8
    n_frames: int = 32
    input_dim: int = 16
    teacher_dim: int = 16
    sparsity: float = 0.25
    noise: float = 0.0
    seed: int = 7
    n_annotators: int = 5
    annotator_noise: float = 0.1
    segment_length: int = 5
    saliency_gain: float = 1.0
    boost: float = 2.0
    teacher_scale: float = 1.0
    saliency_scale: float = 2.0

    def validate(self) -> None:
        if self.n_videos < 1 or self.n_frames < 1 or self.input_dim < 2 or self.teacher_dim < 1:
            raise ConfigurationError("n_videos, n_frames, teacher_dim must be >= 1 and input_dim >= 2")
        if not 0.0 < self.sparsity < 1.0:
            raise ConfigurationError(f"sparsity must be in (0, 1), got {self.sparsity}")
        if self.noise < 0 or self.annotator_noise < 0:
            raise ConfigurationError("noise scales must be nonnegative")
        if self.segment_length < 1 or self.n_annotators < 0:
            raise ConfigurationError("segment_length must be >= 1 and n_annotators >= 0")


@dataclass
class PlantedWorld:
    """Dataset-wide generating quantities, shared by every video."""

    transform: np.ndarray        # input_dim x teacher_dim
    saliency_direction: np.ndarray  # unit vector, length input_dim


def make_world(cfg: SynthConfig) -> PlantedWorld:
    rng = Rng(cfg.seed)
    transform = rng.normal(0.0, cfg.teacher_scale / math.sqrt(cfg.input_dim), (cfg.input_dim, cfg.teacher_dim))
    u = rng.normal(0.0, 1.0, cfg.input_dim)
    return PlantedWorld(transform, u / np.linalg.norm(u))


def teacher_from_weights(world: PlantedWorld, features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Noise-free teacher vector: the generating map applied to the weighted frame mean."""
    return (weights @ features) @ world.transform


def planted_logits(rng: Rng, cfg: SynthConfig) -> np.ndarray:
    """Per-frame importance logits: Gaussian jitter plus ``boost`` on a random sparse subset."""
    n = cfg.n_frames
    k = min(n, max(1, int(round(cfg.sparsity * n))))
    logits = cfg.saliency_gain * rng.normal(0.0, 1.0, n)
    logits[rng.choice(n, k)] += cfg.boost
    return logits


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def equal_segments(n: int, length: int) -> list[tuple[int, int]]:
    return [(s, min(s + length, n)) for s in range(0, n, length)]


def generate_synthetic(cfg: SynthConfig, name: str = "synthetic") -> tuple[Dataset, dict[str, np.ndarray]]:
    """Build a planted dataset.

    Returns the dataset and a mapping from video id to its planted weights.
    Features are float32-representable so that a save/load round trip
    reproduces them exactly.
    """
    cfg.validate()
    world = make_world(cfg)
    rng = Rng(cfg.seed + 1)
    u = world.saliency_direction
    videos, planted = [], {}
    for j in range(cfg.n_videos):
        vid = f"video_{j:03d}"
        base = rng.normal(0.0, 1.0, (cfg.n_frames, cfg.input_dim))
        base -= np.outer(base @ u, u)
        logits = planted_logits(rng, cfg)
        feats = (base + np.outer(cfg.saliency_scale * logits, u)).astype(np.float32).astype(np.float64)
        p = _softmax(logits)
        teacher = teacher_from_weights(world, feats, p)
        if cfg.noise > 0:
            teacher = teacher + rng.normal(0.0, cfg.noise, cfg.teacher_dim)
        span = p.max() - p.min()
        gt = (p - p.min()) / span if span > 0 else np.zeros_like(p)
        gt = gt.astype(np.float32).astype(np.float64)
        ann = None
        if cfg.n_annotators > 0:
            ann = np.clip(gt + rng.normal(0.0, cfg.annotator_noise, (cfg.n_annotators, cfg.n_frames)), 0.0, 1.0)
            ann = ann.astype(np.float32).astype(np.float64)
        videos.append(VideoSample(
            id=vid,
            frame_features=feats,
            gt_scores=gt,
            user_annotations=ann,
            segments=equal_segments(cfg.n_frames, cfg.segment_length),
            teacher_repr=teacher.astype(np.float32).astype(np.float64),
        ))
        planted[vid] = p
    return Dataset(name, cfg.input_dim, cfg.teacher_dim, videos), planted


# -- splits -----------------------------------------------------------------

@dataclass
class Split:
    train: list[str]
    test: list[str]


@dataclass
class Splits:
    splits: list[Split]

    @property
    def k(self) -> int:
        return len(self.splits)

    def __getitem__(self, i) -> Split:
        return self.splits[i]

    def __len__(self):
        return len(self.splits)

    def validate(self, ids) -> None:
        known = set(ids)
        for i, s in enumerate(self.splits):
            tr, te = set(s.train), set(s.test)
            if tr & te:
                raise ValidationError(f"split {i}: ids on both sides: {sorted(tr & te)[:3]}")
            unknown = (tr | te) - known
            if unknown:
                raise ValidationError(f"split {i}: unknown ids {sorted(unknown)[:3]}")

    def to_dict(self) -> dict:
        return {"k": self.k, "splits": [asdict(s) for s in self.splits]}


def make_splits(dataset_or_ids, k: int = 5, seed: int = 0) -> Splits:
    ids = dataset_or_ids.ids if isinstance(dataset_or_ids, Dataset) else list(dataset_or_ids)
    if k < 2:
        raise ConfigurationError(f"need k >= 2 splits, got {k}")
    if k > len(ids):
        raise ConfigurationError(f"k={k} exceeds the number of videos ({len(ids)})")
    order = [ids[i] for i in Rng(seed).permutation(len(ids))]
    folds = [order[i::k] for i in range(k)]
    out = []
    for i in range(k):
        test = set(folds[i])
        out.append(Split(train=[v for v in ids if v not in test], test=[v for v in ids if v in test]))
    return Splits(out)


def save_splits(splits: Splits, path) -> None:
    Path(path).write_text(json.dumps(splits.to_dict(), indent=2, sort_keys=True) + "\n")


def load_splits(path, ids=None) -> Splits:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"splits file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"splits file {path} is not valid JSON: {exc}") from None
    splits = Splits([Split(list(map(str, s["train"])), list(map(str, s["test"]))) for s in doc["splits"]])
    if "k" in doc and int(doc["k"]) != splits.k:
        raise ValidationError(f"splits file declares k={doc['k']} but lists {splits.k} splits")
    if ids is not None:
        splits.validate(ids)
    return splits


# -- frame sampling ---------------------------------------------------------

def downsample_indices(fps_in: float, fps_out: float, n_frames_in: int) -> list[int]:
    """Source frame indices floor(j * fps_in / fps_out) for j = 0, 1, ... below n_frames_in."""
    if fps_out <= 0 or fps_in <= 0:
        raise ConfigurationError("frame rates must be positive")
    if fps_out > fps_in:
        raise ConfigurationError(f"cannot upsample: fps_out {fps_out} > fps_in {fps_in}")
    step = Fraction(fps_in) / Fraction(fps_out)
    out = []
    j = 0
    while True:
        idx = math.floor(j * step)
        if idx >= n_frames_in:
            return out
        out.append(idx)
        j += 1
