"""Series I/O, sliding-window samples, normalisation, splits and phantoms."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_SHAPE = (43, 51, 40)
SPLITS = ("train", "val", "test")

VOL4_MAGIC = b"VOL4"
VOL4_VERSION = 1
# header after magic: version u16, T D H W u32, label u8, id length u16
_VOL4_HEADER = struct.Struct("<HIIIIBH")
MAX_VOXELS = 2**34


class DataError(ValueError):
    """Invalid or degenerate input data."""


class Vol4Error(DataError):
    pass


class BadMagicError(Vol4Error):
    pass


class DimensionOverflowError(Vol4Error):
    pass


class TruncatedPayloadError(Vol4Error):
    pass


class LeakageError(DataError):
    pass


@dataclass
class Series4D:
    subject_id: str
    label: int
    frames: np.ndarray  # (T, D, H, W) float64

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise DataError(f"frames must be (T, D, H, W), got {self.frames.shape}")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def voxel_dims(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass
class Sample3D:
    subject_id: str
    label: int
    window_index: int
    voxels: np.ndarray  # (D, H, W)


@dataclass
class SampleSet:
    """Stacked samples: the array form the trainer consumes."""

    voxels: np.ndarray  # (n, D, H, W)
    labels: np.ndarray  # (n,) int
    subject_ids: np.ndarray  # (n,) str
    window_index: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample3D]) -> "SampleSet":
        if not samples:
            raise DataError("no samples")
        return cls(np.stack([s.voxels for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64),
                   np.array([s.subject_id for s in samples]),
                   np.array([s.window_index for s in samples], dtype=np.int64))

    def subjects(self) -> set[str]:
        return set(self.subject_ids.tolist())

    def subset(self, mask) -> "SampleSet":
        return SampleSet(self.voxels[mask], self.labels[mask], self.subject_ids[mask],
                         self.window_index[mask])


# ---------------------------------------------------------------------------
# VOL4 container
# ---------------------------------------------------------------------------

def write_vol4(path, frames: np.ndarray, label: int, subject_id: str) -> None:
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    T, D, H, W = frames.shape
    ident = subject_id.encode("utf-8")
    buf = io.BytesIO()
    buf.write(VOL4_MAGIC)
    buf.write(_VOL4_HEADER.pack(VOL4_VERSION, T, D, H, W, label, len(ident)))
    buf.write(ident)
    buf.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_vol4(path) -> tuple[np.ndarray, int, str]:
    """Returns ``(frames (T, D, H, W) float64, label, subject_id)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != VOL4_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + _VOL4_HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, T, D, H, W, label, id_len = _VOL4_HEADER.unpack_from(raw, 4)
    if version != VOL4_VERSION:
        raise Vol4Error(f"{path}: unsupported version {version}")
    n_vox = T * D * H * W
    if min(T, D, H, W) == 0 or n_vox > MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: dimensions {T}x{D}x{H}x{W} out of range")
    start = 4 + _VOL4_HEADER.size + id_len
    if len(raw) < start + 4 * n_vox:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - start} bytes, expected {4 * n_vox}")
    subject_id = raw[4 + _VOL4_HEADER.size: start].decode("utf-8")
    frames = np.frombuffer(raw, dtype="<f4", count=n_vox, offset=start).astype(np.float64)
    if not np.isfinite(frames).all():
        raise Vol4Error(f"{path}: payload contains non-finite values")
    return frames.reshape(T, D, H, W), label, subject_id


def expected_payload_bytes(T: int, D: int, H: int, W: int) -> int:
    return 4 * T * D * H * W


def save_series(series: Series4D, path) -> None:
    """Voxels are stored as float32; values must be float32-representable to round-trip."""
    write_vol4(path, series.frames, series.label, series.subject_id)


def load_series(path) -> Series4D:
    frames, label, subject_id = read_vol4(path)
    return Series4D(subject_id, label, frames)


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------

def window_count(T: int, m: int, s: int) -> int:
    return (T - m) // s + 1


def sliding_window_mean(series: Series4D, m: int = 2, s: int = 1) -> list[Sample3D]:
    """Voxelwise means of frames ``[k*s, k*s + m)`` for every full window."""
    T = series.n_frames
    if not 1 <= m <= T:
        raise DataError(f"window size {m} must be in [1, {T}]")
    if s < 1:
        raise DataError(f"stride must be >= 1, got {s}")
    return [Sample3D(series.subject_id, series.label, k,
                     series.frames[k * s: k * s + m].mean(axis=0))
            for k in range(window_count(T, m, s))]


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    mean_image: np.ndarray
    max_abs: float

    def apply(self, voxels: np.ndarray) -> np.ndarray:
        if voxels.shape[-3:] != self.mean_image.shape:
            raise DataError(f"sample shape {voxels.shape[-3:]} != normalizer shape {self.mean_image.shape}")
        return (voxels - self.mean_image) / self.max_abs

    def invert(self, voxels: np.ndarray) -> np.ndarray:
        return voxels * self.max_abs + self.mean_image


def _stack(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.voxels
    if isinstance(samples, np.ndarray):
        return samples
    samples = list(samples)
    if not samples:
        raise DataError("cannot fit a normalizer on an empty training set")
    return np.stack([s.voxels for s in samples])


def fit_normalizer(train_samples) -> Normalizer:
    """Mean image and max |voxel - mean| over the training samples only."""
    X = _stack(train_samples)
    if X.shape[0] == 0:
        raise DataError("cannot fit a normalizer on an empty training set")
    mean_image = X.mean(axis=0)
    max_abs = 0.0
    for start in range(0, X.shape[0], 64):
        max_abs = max(max_abs, float(np.abs(X[start:start + 64] - mean_image).max()))
    if max_abs == 0.0:
        raise DataError("degenerate training data: every sample equals the mean image (max_abs == 0)")
    return Normalizer(mean_image, max_abs)


def apply_normalizer(norm: Normalizer, sample: Sample3D) -> Sample3D:
    return Sample3D(sample.subject_id, sample.label, sample.window_index, norm.apply(sample.voxels))


def normalize_set(norm: Normalizer, samples: SampleSet) -> SampleSet:
    return SampleSet(norm.apply(samples.voxels), samples.labels, samples.subject_ids,
                     samples.window_index)


# ---------------------------------------------------------------------------
# Subject-level stratified split
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    seed: int
    assignment: dict[str, str]
    labels: dict[str, int]
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def subjects(self, split: str) -> list[str]:
        return sorted(s for s, a in self.assignment.items() if a == split)

    def counts(self) -> dict[tuple[int, str], int]:
        out = {(y, sp): 0 for y in (0, 1) for sp in SPLITS}
        for sid, sp in self.assignment.items():
            out[(self.labels[sid], sp)] += 1
        return out

    def to_text(self) -> str:
        lines = [f"#seed={self.seed}"]
        for sid in sorted(self.assignment):
            lines.append(f"{sid},{self.labels[sid]},{self.assignment[sid]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        seed = None
        assignment, labels = {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#seed="):
                    seed = int(line[len("#seed="):])
                continue
            sid, label, split = line.split(",")
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r} for subject {sid}")
            if sid in assignment:
                raise DataError(f"subject {sid} listed twice in manifest")
            assignment[sid] = split
            labels[sid] = int(label)
        if seed is None:
            raise DataError("manifest is missing its #seed= line")
        return cls(seed, assignment, labels)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text())


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n``; leftover units go to the largest
    fractional remainders, ties resolved toward later splits."""
    quotas = [n * r / sum(ratios) for r in ratios]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), -i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_subject_split(subjects: Iterable[tuple[str, int]],
                             ratios: Sequence[float] = (0.8, 0.1, 0.1),
                             seed: int = 0) -> SplitManifest:
    subjects = list(subjects)
    ids = [s for s, _ in subjects]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate subject ids")
    rng = np.random.default_rng(seed)
    assignment, labels = {}, dict(subjects)
    for label in (0, 1):
        members = sorted(s for s, y in subjects if y == label)
        counts = largest_remainder(len(members), ratios)
        if min(counts) < 1:
            raise DataError(f"class {label} has {len(members)} subjects, too few to fill "
                            f"every split at ratios {tuple(ratios)} (counts {counts})")
        shuffled = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for split, c in zip(SPLITS, counts):
            for sid in shuffled[start:start + c]:
                assignment[sid] = split
            start += c
    return SplitManifest(seed, assignment, labels, tuple(ratios))


def check_disjoint(*sets: SampleSet) -> None:
    seen: dict[str, int] = {}
    for i, s in enumerate(sets):
        for sid in s.subjects():
            if sid in seen and seen[sid] != i:
                raise LeakageError(f"subject {sid} appears in more than one split")
            seen[sid] = i


# ---------------------------------------------------------------------------
# Phantom cohorts
# ---------------------------------------------------------------------------

@dataclass
class Region:
    center: tuple[int, int, int]
    radius: float
    amplitudes: tuple[float, float]  # (younger, older)


@dataclass
class PhantomSpec:
    n_young: int = 30
    n_old: int = 45
    T: int = 30
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    regions: list[Region] = field(default_factory=lambda: [Region((21, 25, 20), 6.0, (0.0, 1.0))])
    noise_sigma: float = 0.5
    seed: int = 0
    envelope_depth: float = 0.5
    envelope_freq: tuple[float, float] = (0.01, 0.05)  # cycles per frame

    def validate(self) -> None:
        if self.n_young < 0 or self.n_old < 0 or self.n_young + self.n_old == 0:
            raise DataError("phantom cohort needs at least one subject")
        if self.T < 1:
            raise DataError("T must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if not 0 <= self.envelope_depth < 1:
            raise DataError("envelope_depth must be in [0, 1)")
        for r in self.regions:
            for c, n in zip(r.center, self.shape):
                if c - r.radius < 0 or c + r.radius > n - 1:
                    raise DataError(f"region at {r.center} radius {r.radius} leaves volume {self.shape}")

    @property
    def has_planted_signal(self) -> bool:
        return any(r.amplitudes[0] != r.amplitudes[1] for r in self.regions)


def sphere_mask(shape, center, radius) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return dist2 <= radius ** 2


def phantom_subject_ids(spec: PhantomSpec) -> list[tuple[str, int]]:
    return ([(f"young{i:03d}", 0) for i in range(spec.n_young)]
            + [(f"old{i:03d}", 1) for i in range(spec.n_old)])


def phantom_masks(spec: PhantomSpec) -> list[np.ndarray]:
    return [sphere_mask(spec.shape, r.center, r.radius) for r in spec.regions]


def iter_phantom_cohort(spec: PhantomSpec) -> Iterator[Series4D]:
    """Yields subjects one at a time; each draws from its own seeded stream."""
    spec.validate()
    masks = phantom_masks(spec)
    t = np.arange(spec.T, dtype=np.float64)
    for idx, (sid, label) in enumerate(phantom_subject_ids(spec)):
        rng = np.random.default_rng([spec.seed, idx])
        if spec.noise_sigma > 0:
            frames = rng.normal(0.0, spec.noise_sigma, size=(spec.T,) + tuple(spec.shape))
        else:
            frames = np.zeros((spec.T,) + tuple(spec.shape))
        for region, mask in zip(spec.regions, masks):
            freq = rng.uniform(*spec.envelope_freq)
            phase = rng.uniform(0, 2 * np.pi)
            envelope = 1.0 + spec.envelope_depth * np.sin(2 * np.pi * freq * t + phase)
            frames[:, mask] += (region.amplitudes[label] * envelope)[:, None]
        # float32-representable so the cohort round-trips through VOL4
        yield Series4D(sid, label, frames.astype(np.float32).astype(np.float64))


def generate_phantom_cohort(spec: PhantomSpec) -> tuple[list[Series4D], list[np.ndarray]]:
    """Noise plus spherical bumps whose group amplitude is modulated by a
    slow per-subject sinusoid.  Returns the cohort and one mask per region."""
    return list(iter_phantom_cohort(spec)), phantom_masks(spec)


def windowed_set(cohort: Iterable[Series4D], m: int = 2, s: int = 1,
                 subjects: set[str] | None = None) -> SampleSet:
    """Windows every series (optionally only ``subjects``) into one SampleSet."""
    parts, labels, ids, widx = [], [], [], []
    for series in cohort:
        if subjects is not None and series.subject_id not in subjects:
            continue
        samples = sliding_window_mean(series, m, s)
        parts.append(np.stack([x.voxels for x in samples]))
        labels += [series.label] * len(samples)
        ids += [series.subject_id] * len(samples)
        widx += [x.window_index for x in samples]
    if not parts:
        raise DataError("no subjects selected for windowing")
    return SampleSet(np.concatenate(parts), np.array(labels, dtype=np.int64), np.array(ids),
                     np.array(widx, dtype=np.int64))
