"""Squared input-gradient sensitivity maps and their group summaries."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import CnnConfig, CnnParams, probability_graph
from .volcore import ShapeError, Tape, Volume


@dataclass
class SensitivityMap:
    voxels: np.ndarray  # (D, H, W), non-negative
    subject_id: str
    window_index: int
    target_group: int


@dataclass
class GroupSensitivity:
    group: int
    mean_map: np.ndarray
    n_samples: int
    threshold_percentile: float
    region_mask: np.ndarray


Network = Callable[[Volume], Volume]


def _network(model, config: CnnConfig | None) -> Network:
    if callable(model):
        return model
    pool = config.pool if config else 2
    return lambda x: probability_graph(model, x, pool)


def input_gradients(model, voxels: np.ndarray, target_group: int = 1,
                    config: CnnConfig | None = None) -> np.ndarray:
    """d f_target / d x for a stack ``(n, D, H, W)`` in one forward/backward.

    ``f_1 = p(y=1|x)`` and ``f_0 = 1 - p``.  Samples in a batch are
    independent, so the gradient of the summed output is per-sample exact.
    """
    if target_group not in (0, 1):
        raise ValueError(f"target_group must be 0 or 1, got {target_group}")
    net = _network(model, config)
    x = Volume(np.asarray(voxels, dtype=np.float64)[:, None], requires_grad=True)
    with Tape() as tape:
        p = net(x)
    tape.backward(p, np.full(p.shape, 1.0 if target_group == 1 else -1.0))
    return x.grad[:, 0]


def sensitivity_map(model, sample, target_group: int, config: CnnConfig | None = None) -> SensitivityMap:
    """Per-voxel squared gradient of the target-group probability.

    ``model`` is trained :class:`CnnParams` or any callable mapping an input
    volume ``(N, 1, D, H, W)`` to probabilities on the active tape.
    """
    voxels = np.asarray(getattr(sample, "voxels", sample), dtype=np.float64)
    if voxels.ndim != 3:
        raise ShapeError(f"sample must be (D, H, W), got {voxels.shape}")
    if config is not None and voxels.shape != tuple(config.input_shape):
        raise ShapeError(f"sample {voxels.shape} does not match network input {config.input_shape}")
    g = input_gradients(model, voxels[None], target_group, config)[0]
    return SensitivityMap(g * g, getattr(sample, "subject_id", ""), getattr(sample, "window_index", 0),
                          target_group)


def sensitivity_maps(model, samples, target_group: int, config: CnnConfig,
                     chunk: int | None = None) -> np.ndarray:
    """Squared-gradient maps for a SampleSet-like stack, chunked for memory."""
    voxels = getattr(samples, "voxels", samples)
    chunk = chunk or config.chunk_size
    out = np.empty(voxels.shape)
    for start in range(0, voxels.shape[0], chunk):
        g = input_gradients(model, voxels[start:start + chunk], target_group, config)
        out[start:start + g.shape[0]] = g * g
    return out


def _pairwise_mean(stack: np.ndarray) -> np.ndarray:
    n = stack.shape[0]
    if n == 1:
        return stack[0].copy()
    half = n // 2
    return (_pairwise_mean(stack[:half]) * half + _pairwise_mean(stack[half:]) * (n - half)) / n


def threshold_regions(mean_map, percentile: float) -> np.ndarray:
    """Voxels whose score is >= the given percentile (linear interpolation; ties kept)."""
    values = getattr(mean_map, "mean_map", mean_map)
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    cut = np.percentile(values, percentile, method="linear")
    return values >= cut


def aggregate_group(maps: Sequence[SensitivityMap] | np.ndarray, group: int, percentile: float = 95.0,
                    subject_ids: Sequence[str] | None = None,
                    per_subject_first: bool = False) -> GroupSensitivity:
    """Voxelwise mean of a group's maps plus its percentile mask.

    ``per_subject_first`` averages within each subject before averaging
    subjects; ``subject_ids`` is then required when ``maps`` is an array.
    """
    if len(maps) == 0:
        raise ValueError("no sensitivity maps to aggregate")
    if isinstance(maps, np.ndarray):
        stack = maps
    else:
        stack = np.stack([m.voxels for m in maps])
        subject_ids = [m.subject_id for m in maps] if subject_ids is None else subject_ids
        if any(m.voxels.shape != stack.shape[1:] for m in maps):
            raise ShapeError("sensitivity maps differ in shape")
    if per_subject_first:
        if subject_ids is None:
            raise ValueError("per_subject_first needs subject ids")
        ids = np.asarray(subject_ids)
        stack = np.stack([_pairwise_mean(stack[ids == s]) for s in np.unique(ids)])
    mean_map = _pairwise_mean(stack)
    return GroupSensitivity(group, mean_map, len(maps), percentile, threshold_regions(mean_map, percentile))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else float(2.0 * np.logical_and(a, b).sum() / total)


def peak_voxel(volume: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(np.argmax(volume), volume.shape))


# ---------------------------------------------------------------------------
# Slice export (binary PGM / PPM)
# ---------------------------------------------------------------------------

def scale_to_bytes(volume: np.ndarray) -> np.ndarray:
    """Min-max scale to 0-255 over the whole volume; constant volumes map to 128."""
    lo, hi = float(volume.min()), float(volume.max())
    if hi == lo:
        return np.full(volume.shape, 128, dtype=np.uint8)
    return np.rint((volume - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    channels = {b"P5": 1, b"P6": 3}[magic]
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)


def export_slices(volume: np.ndarray, axis: int, path_prefix, overlay: np.ndarray | None = None) -> list[Path]:
    """One image per slice along ``axis``.

    Without ``overlay`` each slice is a grayscale PGM.  With a binary
    ``overlay`` mask the slices are PPM with masked voxels drawn in red.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    scaled = scale_to_bytes(np.asarray(volume))
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(scaled.shape[axis]):
        img = np.take(scaled, i, axis=axis)
        if overlay is None:
            path = prefix.parent / f"{prefix.name}_axis{axis}_{i:03d}.pgm"
            write_pgm(path, img)
        else:
            mask = np.take(np.asarray(overlay, bool), i, axis=axis)
            rgb = np.repeat(img[..., None], 3, axis=-1)
            rgb[mask] = (255, 0, 0)
            path = prefix.parent / f"{prefix.name}_axis{axis}_{i:03d}.ppm"
            write_ppm(path, rgb)
        paths.append(path)
    return paths
