"""Synthetic audio-visual data, AVF1/AVL1 feature files, windowing and masking.

File formats (all little-endian)::

    AVF1  b"AVF1" | uint32 L | uint32 D | L*D float32, clip-major
    AVL1  b"AVL1" | uint32 L | L * (float32 valence, float32 arousal)

A manifest is a CSV with columns ``id``, one or more ``audio_path*``, one or
more ``visual_path*``, ``label_path`` and ``split`` (train/val/test).  Paths
are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, FormatError
from .fusion import ModalFeatures

FEATURE_MAGIC = b"AVF1"
LABEL_MAGIC = b"AVL1"
SPLITS = ("train", "val", "test")


@dataclass
class AnnotationTrack:
    valence: np.ndarray
    arousal: np.ndarray
    clips_per_second: float = 1.0

    def __post_init__(self):
        self.valence = np.asarray(self.valence, dtype=np.float64).ravel()
        self.arousal = np.asarray(self.arousal, dtype=np.float64).ravel()
        if self.valence.shape != self.arousal.shape:
            raise AlignmentError("valence and arousal tracks differ in length")
        for name, t in (("valence", self.valence), ("arousal", self.arousal)):
            if not np.all(np.isfinite(t)) or np.any(np.abs(t) > 1.0):
                raise ValueError(f"{name} labels must be finite and lie in [-1, 1]")

    @property
    def L(self) -> int:
        return self.valence.size

    def as_matrix(self) -> np.ndarray:
        """``L x 2`` matrix, valence then arousal."""
        return np.stack([self.valence, self.arousal], axis=1)

    @classmethod
    def from_matrix(cls, m, clips_per_second: float = 1.0) -> "AnnotationTrack":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:, 0], m[:, 1], clips_per_second)


@dataclass
class SequenceRecord:
    id: str
    audio: list  # ModalFeatures, one per backbone
    visual: list
    labels: AnnotationTrack
    split: str = "train"

    def __post_init__(self):
        if not self.audio or not self.visual:
            raise ConfigError(f"{self.id}: needs at least one audio and one visual feature set")
        lengths = {f.L for f in self.audio} | {f.L for f in self.visual} | {self.labels.L}
        if len(lengths) != 1:
            raise AlignmentError(f"{self.id}: features and labels disagree on L: {sorted(lengths)}")

    @property
    def L(self) -> int:
        return self.labels.L


# --- synthetic generator --------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the complementary-modality generator.

    The first ``round(complementary_split * latent_dim)`` latent dimensions
    are seen only by audio, the rest only by visual.  ``label_lag`` makes the
    annotations trail the features by that many clips, as human raters do,
    so a model has to look across clips to predict them.
    """

    n_sequences: int = 64
    L: int = 16
    d_a: int = 16
    d_v: int = 16
    latent_dim: int = 8
    noise_std: float = 0.1
    complementary_split: float = 0.5
    smoothness: int = 4
    seed: int = 42
    n_backbones: int = 1
    label_gain: float = 1.0
    label_lag: int = 1
    clips_per_second: float = 1.0

    def validate(self) -> None:
        if self.n_sequences < 1:
            raise ConfigError("n_sequences must be at least 1")
        if min(self.L, self.d_a, self.d_v, self.latent_dim, self.smoothness, self.n_backbones) < 1:
            raise ConfigError("dimensions must be positive")
        if not 0.0 <= self.complementary_split <= 1.0:
            raise ConfigError("complementary_split must lie in [0, 1]")
        if self.noise_std < 0 or self.label_lag < 0:
            raise ConfigError("noise_std and label_lag must be non-negative")


@dataclass
class GeneratorTruth:
    """Everything the generator drew, for building oracles."""

    audio_dims: np.ndarray
    visual_dims: np.ndarray
    audio_maps: list
    visual_maps: list
    readout: np.ndarray  # latent_dim x 2
    latents: dict = field(default_factory=dict)  # id -> (L + lag) x latent_dim


def _f32(x: np.ndarray) -> np.ndarray:
    # stored datasets are float32; keep in-memory copies identical to what a reload returns
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _block_readout(rng, dims_a, dims_v, latent_dim) -> np.ndarray:
    w = np.zeros((latent_dim, 2))
    blocks = [b for b in (dims_a, dims_v) if b.size]
    for b in blocks:
        raw = rng.standard_normal((b.size, 2))
        w[b] = raw / np.linalg.norm(raw, axis=0) / math.sqrt(len(blocks))
    return w


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 train/val/test counts."""
    n_train = int(math.floor(0.70 * n + 0.5))
    n_val = int(math.floor(0.15 * n + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_synthetic(spec: SyntheticSpec) -> tuple[list[SequenceRecord], GeneratorTruth]:
    """Generate sequences whose labels need both modalities.

    Latents are moving averages of seeded Gaussian noise (unit variance);
    labels are ``tanh(gain * latent @ readout)``; each backbone of each
    modality observes its latent block through a random linear map plus
    Gaussian noise.  The readout gives the audio and visual blocks equal
    variance, and the label at clip ``t`` depends on the latent the features
    showed at clip ``t - label_lag``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_a = int(math.floor(spec.complementary_split * spec.latent_dim + 0.5))
    dims_a = np.arange(n_a)
    dims_v = np.arange(n_a, spec.latent_dim)
    readout = _block_readout(rng, dims_a, dims_v, spec.latent_dim)
    audio_maps = [rng.standard_normal((dims_a.size, spec.d_a)) / math.sqrt(max(dims_a.size, 1))
                  for _ in range(spec.n_backbones)]
    visual_maps = [rng.standard_normal((dims_v.size, spec.d_v)) / math.sqrt(max(dims_v.size, 1))
                   for _ in range(spec.n_backbones)]
    truth = GeneratorTruth(dims_a, dims_v, audio_maps, visual_maps, readout)

    n_train, n_val, _ = split_counts(spec.n_sequences)
    records = []
    total = spec.L + spec.label_lag
    w = spec.smoothness
    for i in range(spec.n_sequences):
        raw = rng.standard_normal((total + w - 1, spec.latent_dim))
        kernel = np.ones(w) / math.sqrt(w)
        z = np.stack([np.convolve(raw[:, j], kernel, mode="valid") for j in range(spec.latent_dim)], axis=1)
        sid = f"seq{i:04d}"
        truth.latents[sid] = z
        # features see z[lag:], labels follow z[:L]: labels trail the features by `lag` clips
        zf = z[spec.label_lag:]
        lab = _f32(np.tanh(spec.label_gain * (z[:spec.L] @ readout)))
        audio, visual = [], []
        for m in audio_maps:
            x = zf[:, dims_a] @ m if dims_a.size else np.zeros((spec.L, spec.d_a))
            x = x + spec.noise_std * rng.standard_normal(x.shape)
            audio.append(ModalFeatures(_f32(x), "audio", spec.clips_per_second))
        for m in visual_maps:
            x = zf[:, dims_v] @ m if dims_v.size else np.zeros((spec.L, spec.d_v))
            x = x + spec.noise_std * rng.standard_normal(x.shape)
            visual.append(ModalFeatures(_f32(x), "visual", spec.clips_per_second))
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        records.append(SequenceRecord(sid, audio, visual,
                                      AnnotationTrack.from_matrix(lab, spec.clips_per_second), split))
    return records, truth


# --- binary formats --------------------------------------------------------------

def _check_finite(payload: np.ndarray, header_len: int) -> None:
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise FormatError("non-finite entry in payload", header_len + 4 * int(bad[0]))


def save_features(path, features) -> None:
    """Write features as AVF1; values are stored as float32."""
    X = features.X if isinstance(features, ModalFeatures) else np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("refusing to save non-finite features")
    L, D = X.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", L, D))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def load_features(path, modality: str = "audio", clips_per_second: float = 1.0) -> ModalFeatures:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: header truncated, {len(data)} bytes", len(data))
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    L, D = struct.unpack_from("<II", data, 4)
    need = 12 + 4 * L * D
    if len(data) < need:
        raise FormatError(f"{path}: payload truncated, need {need} bytes for L={L}, D={D}, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes after payload", need)
    if L < 1 or D < 1:
        raise FormatError(f"{path}: empty matrix L={L}, D={D}", 4)
    payload = np.frombuffer(data, dtype="<f4", count=L * D, offset=12)
    _check_finite(payload, 12)
    return ModalFeatures(payload.astype(np.float64).reshape(L, D), modality, clips_per_second)


def save_labels(path, labels: AnnotationTrack) -> None:
    m = labels.as_matrix()
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<I", m.shape[0]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_labels(path, clips_per_second: float = 1.0) -> AnnotationTrack:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: header truncated, {len(data)} bytes", len(data))
    if data[:4] != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {LABEL_MAGIC!r}", 0)
    (L,) = struct.unpack_from("<I", data, 4)
    need = 8 + 8 * L
    if len(data) < need:
        raise FormatError(f"{path}: payload truncated, need {need} bytes for L={L}, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes after payload", need)
    payload = np.frombuffer(data, dtype="<f4", count=2 * L, offset=8)
    _check_finite(payload, 8)
    out_of_range = np.flatnonzero(np.abs(payload) > 1.0)
    if out_of_range.size:
        raise FormatError(f"{path}: label outside [-1, 1]", 8 + 4 * int(out_of_range[0]))
    return AnnotationTrack.from_matrix(payload.astype(np.float64).reshape(L, 2), clips_per_second)


# --- manifests ----------------------------------------------------------------------

def manifest_columns(n_audio: int, n_visual: int) -> list[str]:
    def names(base, n):
        return [base] + [f"{base}{i}" for i in range(2, n + 1)]
    return ["id", *names("audio_path", n_audio), *names("visual_path", n_visual), "label_path", "split"]


def write_dataset(records: Sequence[SequenceRecord], out_dir) -> Path:
    """Materialise records as AVF1/AVL1 files plus ``manifest.csv``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    n_a = max(len(r.audio) for r in records)
    n_v = max(len(r.visual) for r in records)
    rows = []
    for r in records:
        audio_paths, visual_paths = [], []
        for j, f in enumerate(r.audio):
            rel = f"features/{r.id}_audio{j}.avf"
            save_features(out / rel, f)
            audio_paths.append(rel)
        for j, f in enumerate(r.visual):
            rel = f"features/{r.id}_visual{j}.avf"
            save_features(out / rel, f)
            visual_paths.append(rel)
        label_rel = f"labels/{r.id}.avl"
        save_labels(out / label_rel, r.labels)
        audio_paths += [""] * (n_a - len(audio_paths))
        visual_paths += [""] * (n_v - len(visual_paths))
        rows.append([r.id, *audio_paths, *visual_paths, label_rel, r.split])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(manifest_columns(n_a, n_v))
        w.writerows(rows)
    return manifest


def read_manifest(path, clips_per_second: float = 1.0) -> list[SequenceRecord]:
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        audio_cols = [c for c in cols if c.startswith("audio_path")]
        visual_cols = [c for c in cols if c.startswith("visual_path")]
        missing = {"id", "label_path", "split"} - set(cols)
        if missing or not audio_cols or not visual_cols:
            raise ConfigError(f"{path}: manifest lacks columns {sorted(missing) or 'audio_path/visual_path'}")
        records = []
        for row in reader:
            if row["split"] not in SPLITS:
                raise ConfigError(f"{path}: sequence {row['id']} has unknown split {row['split']!r}")
            audio = [load_features(base / row[c], "audio", clips_per_second) for c in audio_cols if row[c]]
            visual = [load_features(base / row[c], "visual", clips_per_second) for c in visual_cols if row[c]]
            labels = load_labels(base / row["label_path"], clips_per_second)
            records.append(SequenceRecord(row["id"], audio, visual, labels, row["split"]))
    return records


# --- windowing and masking ----------------------------------------------------------

def window_sequence(record: SequenceRecord, sub_len: int, stride: int | None = None) -> list[SequenceRecord]:
    """Cut a sequence into fixed-size sub-sequences; a short tail is dropped."""
    stride = sub_len if stride is None else stride
    if sub_len < 1 or stride < 1:
        raise ConfigError("sub_len and stride must be positive")
    if sub_len > record.L:
        raise ConfigError(f"sub_len {sub_len} exceeds sequence length {record.L}")
    out = []
    lab = record.labels.as_matrix()
    cps = record.labels.clips_per_second
    for n, s in enumerate(range(0, record.L - sub_len + 1, stride)):
        sl = slice(s, s + sub_len)
        out.append(SequenceRecord(
            record.id if sub_len == record.L else f"{record.id}#w{n}",
            [ModalFeatures(f.X[sl], f.modality, f.clips_per_second) for f in record.audio],
            [ModalFeatures(f.X[sl], f.modality, f.clips_per_second) for f in record.visual],
            AnnotationTrack.from_matrix(lab[sl], cps),
            record.split,
        ))
    return out


@dataclass
class MaskSpec:
    fraction: float = 0.0
    fill: str = "zeros"
    seed: int = 0

    def n_masked(self, L: int) -> int:
        return int(math.floor(self.fraction * L + 0.5))


def mask_modality(record: SequenceRecord, which: str, mask: MaskSpec) -> SequenceRecord:
    """Replace a seeded random subset of one modality's clips with a fill pattern.

    Every backbone of the modality is masked at the same clips.  ``zeros``
    writes zeros; ``gaussian_noise`` writes noise with the sequence's own
    feature standard deviation.
    """
    if not 0.0 <= mask.fraction <= 1.0:
        raise ConfigError(f"mask fraction must lie in [0, 1], got {mask.fraction}")
    if which not in ("audio", "visual"):
        raise ConfigError(f"unknown modality {which!r}")
    if mask.fill not in ("zeros", "gaussian_noise"):
        raise ConfigError(f"unknown fill {mask.fill!r}")
    n = mask.n_masked(record.L)
    if n == 0:
        return record
    rng = np.random.default_rng(mask.seed)
    clips = np.sort(rng.choice(record.L, size=n, replace=False))
    masked = []
    for f in getattr(record, which):
        X = f.X.copy()
        if mask.fill == "zeros":
            X[clips] = 0.0
        else:
            X[clips] = X.std() * rng.standard_normal((n, X.shape[1]))
        masked.append(ModalFeatures(X, f.modality, f.clips_per_second))
    return replace(record, **{which: masked})


# --- stacked arrays for training -----------------------------------------------------

@dataclass
class ArraySplit:
    """Records of one split stacked into ``N x L x d`` arrays."""

    ids: list
    audio: list
    visual: list
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[SequenceRecord]) -> "ArraySplit | None":
        if not records:
            return None
        shapes = {(r.L, tuple(f.dim for f in r.audio), tuple(f.dim for f in r.visual)) for r in records}
        if len(shapes) != 1:
            raise AlignmentError(f"records disagree on (L, audio dims, visual dims): {sorted(shapes)}")
        n_a, n_v = len(records[0].audio), len(records[0].visual)
        audio = [np.stack([r.audio[j].X for r in records]) for j in range(n_a)]
        visual = [np.stack([r.visual[j].X for r in records]) for j in range(n_v)]
        labels = np.stack([r.labels.as_matrix() for r in records])
        return cls([r.id for r in records], audio, visual, labels)


@dataclass
class Dataset:
    train: ArraySplit | None
    val: ArraySplit | None
    test: ArraySplit | None = None

    @classmethod
    def from_records(cls, records: Sequence[SequenceRecord]) -> "Dataset":
        by = {s: [r for r in records if r.split == s] for s in SPLITS}
        return cls(*(ArraySplit.from_records(by[s]) for s in SPLITS))
