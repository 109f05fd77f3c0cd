"""Two-conv-layer 3D CNN: construction, initialisation, SGD training, checkpoints.

Architecture: conv(k1) -> ReLU -> maxpool -> conv(k2) -> ReLU -> maxpool
-> flatten -> dense(1) -> sigmoid.  With the default 43x51x40 input the
feature map entering the dense layer is 32x8x10x8 = 20480.
"""
from __future__ import annotations

import copy
import io
import logging
import math
import struct
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kvtext
from .datapipe import DataError, Normalizer, SampleSet, check_disjoint
from .metrics import auc_roc, soft_vote
from .volcore import (LayerParams, Tape, Volume, binary_cross_entropy, conv3d, conv_output_shape,
                      dense, flatten, l2_penalty, maxpool3d, relu, sigmoid)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class CnnConfig:
    input_shape: tuple[int, int, int] = (43, 51, 40)
    conv1: tuple[int, int] = (16, 5)  # (out channels, kernel size)
    conv2: tuple[int, int] = (32, 3)
    pool: int = 2
    lr0: float = 0.1
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 7
    momentum: float = 0.8
    lam: float = 0.001
    batch_size: int = 128
    max_epochs: int = 30
    early_stop_patience: int = 3
    seed: int = 0
    # samples per tape within a mini-batch; bounds memory, not the maths
    chunk_size: int = 8

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.conv1 = tuple(self.conv1)
        self.conv2 = tuple(self.conv2)

    def validate(self) -> None:
        if not 0 < self.lr_decay_factor <= 1:
            raise kvtext.ConfigError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if not 0 <= self.momentum < 1:
            raise kvtext.ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lam < 0:
            raise kvtext.ConfigError(f"lam must be >= 0, got {self.lam}")
        for name in ("pool", "lr_decay_every", "batch_size", "max_epochs", "early_stop_patience", "chunk_size"):
            if getattr(self, name) < 1:
                raise kvtext.ConfigError(f"{name} must be >= 1")
        shapes = self.layer_shapes()
        if min(min(s) for s in shapes.values()) < 1:
            raise kvtext.ConfigError(f"architecture does not fit input {self.input_shape}: {shapes}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        (c1, k1), (c2, k2), p = self.conv1, self.conv2, self.pool
        s1 = conv_output_shape(self.input_shape, (k1,) * 3)
        p1 = tuple(n // p for n in s1)
        s2 = conv_output_shape(p1, (k2,) * 3)
        p2 = tuple(n // p for n in s2)
        return {"conv1": (c1,) + s1, "pool1": (c1,) + p1, "conv2": (c2,) + s2, "pool2": (c2,) + p2,
                "flatten": (c2 * math.prod(p2),)}

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        (c1, k1), (c2, k2) = self.conv1, self.conv2
        n_fc = self.layer_shapes()["flatten"][0]
        return {"conv1": ((c1, 1, k1, k1, k1), (c1,)),
                "conv2": ((c2, c1, k2, k2, k2), (c2,)),
                "fc": ((1, n_fc), (1,))}

    def to_text(self) -> str:
        return kvtext.dump(self)

    @classmethod
    def from_text(cls, text: str) -> "CnnConfig":
        return kvtext.load(cls, text)


LAYERS = ("conv1", "conv2", "fc")


@dataclass
class CnnParams:
    conv1: LayerParams
    conv2: LayerParams
    fc: LayerParams
    # momentum buffers keyed like "conv1.weights"
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def layers(self) -> list[LayerParams]:
        return [self.conv1, self.conv2, self.fc]

    def named_volumes(self) -> list[tuple[str, Volume]]:
        out = []
        for name in LAYERS:
            layer = getattr(self, name)
            out += [(f"{name}.weights", layer.weights), (f"{name}.bias", layer.bias)]
        return out

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    def copy(self) -> "CnnParams":
        return copy.deepcopy(self)


def init_params(config: CnnConfig, seed: int | None = None) -> CnnParams:
    """Uniform on (-sqrt(u), sqrt(u)) with u = 1 / (weight entries in the layer).

    Biases are excluded from the count and drawn with their layer's bound.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    layers = {}
    for name, (wshape, bshape) in config.param_shapes().items():
        bound = math.sqrt(1.0 / math.prod(wshape))
        layers[name] = LayerParams.from_arrays(rng.uniform(-bound, bound, wshape),
                                               rng.uniform(-bound, bound, bshape))
    params = CnnParams(**layers)
    params.velocity = {name: np.zeros_like(v.data) for name, v in params.named_volumes()}
    return params


def logits_graph(params: CnnParams, x: Volume, pool: int = 2) -> Volume:
    """``x`` is ``(1, D, H, W)`` or a batch ``(N, 1, D, H, W)``."""
    h = maxpool3d(relu(conv3d(x, params.conv1)), pool)
    h = maxpool3d(relu(conv3d(h, params.conv2)), pool)
    return dense(flatten(h, 1 if x.data.ndim == 5 else 0), params.fc)


def probability_graph(params: CnnParams, x: Volume, pool: int = 2) -> Volume:
    return sigmoid(logits_graph(params, x, pool))


def _as_input(sample) -> np.ndarray:
    voxels = getattr(sample, "voxels", sample)
    voxels = np.asarray(voxels, dtype=np.float64)
    return voxels if voxels.ndim == 4 else voxels[None]


def forward(params: CnnParams, sample, config: CnnConfig | None = None) -> float:
    """p(y = 1 | x) for one normalised sample ``(D, H, W)`` or ``(1, D, H, W)``."""
    x = _as_input(sample)
    pool = config.pool if config else 2
    expected = params.conv1.weights.shape[1:2] + (config.input_shape if config else x.shape[1:])
    if x.shape != expected:
        raise DataError(f"sample shape {x.shape} does not match network input {expected}")
    return probability_graph(params, Volume(x), pool).item()


def predict_proba(params: CnnParams, voxels: np.ndarray, config: CnnConfig) -> np.ndarray:
    """Probabilities for a stack of normalised samples ``(n, D, H, W)``."""
    voxels = np.asarray(voxels)
    if voxels.shape[1:] != tuple(config.input_shape):
        raise DataError(f"samples {voxels.shape[1:]} do not match config input {config.input_shape}")
    out = np.empty(voxels.shape[0])
    for start in range(0, voxels.shape[0], config.chunk_size):
        chunk = voxels[start:start + config.chunk_size, None]
        out[start:start + chunk.shape[0]] = probability_graph(params, Volume(chunk), config.pool).data[:, 0]
    return out


def lr_at_epoch(epoch: int, config: CnnConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    # decimal arithmetic so 0.1 * 0.2 records as 0.02, not 0.020000000000000004
    steps = epoch // config.lr_decay_every
    return float(Decimal(repr(config.lr0)) * Decimal(repr(config.lr_decay_factor)) ** steps)


def _accumulate_gradients(params: CnnParams, voxels: np.ndarray, labels: np.ndarray,
                          config: CnnConfig) -> tuple[float, np.ndarray]:
    # Gradient of mean BCE + lam*||theta||^2, built chunk by chunk so a full
    # mini-batch never sits on one tape.
    params.zero_grad()
    n = labels.shape[0]
    bce = 0.0
    probs = np.empty(n)
    for start in range(0, n, config.chunk_size):
        stop = min(start + config.chunk_size, n)
        with Tape() as tape:
            p = probability_graph(params, Volume(voxels[start:stop, None]), config.pool)
            loss = binary_cross_entropy(p, labels[start:stop], count=n)
        tape.backward(loss)
        bce += loss.item()
        probs[start:stop] = p.data[:, 0]
    if config.lam > 0:
        with Tape() as tape:
            reg = l2_penalty(params.layers(), config.lam)
        tape.backward(reg)
        bce += reg.item()
    return bce, probs


def _apply_momentum(params: CnnParams, lr: float, momentum: float) -> None:
    for name, vol in params.named_volumes():
        v = params.velocity[name]
        v *= momentum
        v += vol.grad
        vol.data -= lr * v


def _step(params, voxels, labels, lr, config) -> tuple[float, np.ndarray]:
    if labels.shape[0] == 0:
        raise DataError("empty mini-batch")
    loss, probs = _accumulate_gradients(params, voxels, labels, config)
    if not math.isfinite(loss) or not all(np.isfinite(v.grad).all() for _, v in params.named_volumes()):
        raise NumericalError(f"non-finite loss {loss} at lr={lr}: learning rate too high or data degenerate")
    _apply_momentum(params, lr, config.momentum)
    return loss, probs


def train_step(params: CnnParams, voxels: np.ndarray, labels, lr: float, config: CnnConfig) -> float:
    """One SGD-with-momentum update (v <- mu v + g; theta <- theta - lr v).

    Returns the loss evaluated before the update.
    """
    labels = np.asarray(labels, dtype=np.float64)
    return _step(params, np.asarray(voxels, dtype=np.float64), labels, lr, config)[0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float  # from pre-update predictions during the epoch
    val_loss: float
    val_auc: float

    def row(self) -> str:
        return ",".join([str(self.epoch)] + [repr(float(getattr(self, k))) for k in
                                             ("lr", "train_loss", "train_acc", "val_loss", "val_auc")])

    @classmethod
    def from_row(cls, row: str) -> "EpochRecord":
        e, *rest = row.split(",")
        return cls(int(e), *map(float, rest))


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_csv(self) -> str:
        lines = [f"# best_epoch={self.best_epoch} stop_reason={self.stop_reason}",
                 "epoch,lr,train_loss,train_acc,val_loss,val_auc"]
        lines += [r.row() for r in self.epochs]
        return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    params: CnnParams
    history: TrainHistory
    next_epoch: int = 0
    best_params: CnnParams | None = None
    best_auc: float = -math.inf
    best_val_loss: float = math.inf
    stale: int = 0


def _val_scores(params, val: SampleSet, config) -> tuple[float, float]:
    probs = predict_proba(params, val.voxels, config)
    pc = np.clip(probs, 1e-12, 1 - 1e-12)
    y = val.labels
    val_loss = float(-(y * np.log(pc) + (1 - y) * np.log1p(-pc)).mean())
    votes = soft_vote(val.subject_ids, val.labels, probs)
    return val_loss, auc_roc(votes.subject_labels, votes.subject_probs)


def train(config: CnnConfig, train_set: SampleSet, val_set: SampleSet, *,
          resume: TrainState | None = None,
          on_epoch_end: Callable[[TrainState], None] | None = None) -> tuple[CnnParams, TrainHistory]:
    """Mini-batch SGD with step-decayed learning rate and early stopping.

    Patience counts epochs whose subject-level validation AUC is not
    strictly higher than the best so far; training stops after
    ``early_stop_patience`` such epochs or at ``max_epochs``.  The returned
    parameters come from the best epoch, ranked by validation AUC and then
    by lower validation loss, so a saturated AUC still keeps the
    better-fitted model.
    """
    config.validate()
    check_disjoint(train_set, val_set)
    if len(np.unique(val_set.labels)) < 2:
        raise DataError("validation set needs subjects from both groups")
    state = resume or TrainState(init_params(config), TrainHistory())
    params = state.params
    n = len(train_set)
    labels = train_set.labels.astype(np.float64)
    for epoch in range(state.next_epoch, config.max_epochs):
        lr = lr_at_epoch(epoch, config)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, probs = _step(params, train_set.voxels[idx], labels[idx], lr, config)
            loss_sum += loss * idx.size
            correct += int(np.sum((probs >= 0.5) == (labels[idx] == 1)))
        val_loss, val_auc = _val_scores(params, val_set, config)
        record = EpochRecord(epoch, lr, loss_sum / n, correct / n, val_loss, val_auc)
        state.history.epochs.append(record)
        log.info("epoch %d lr=%g train_loss=%.5f train_acc=%.3f val_loss=%.5f val_auc=%.3f",
                 epoch, lr, record.train_loss, record.train_acc, val_loss, val_auc)
        auc_improved = val_auc > state.best_auc
        if auc_improved or (val_auc == state.best_auc and val_loss < state.best_val_loss):
            state.best_auc, state.best_val_loss = val_auc, val_loss
            state.best_params = params.copy()
            state.history.best_epoch = epoch
        state.stale = 0 if auc_improved else state.stale + 1
        state.next_epoch = epoch + 1
        stop = state.stale >= config.early_stop_patience
        state.history.stop_reason = "early_stop" if stop else (
            "max_epochs" if state.next_epoch >= config.max_epochs else "running")
        if on_epoch_end is not None:
            on_epoch_end(state)
        if stop:
            break
    if state.best_params is None:
        raise NumericalError("training ran no epochs")
    return state.best_params, state.history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: CnnParams
    config: CnnConfig
    normalizer: Normalizer | None
    state: TrainState | None = None


def _write_text(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _param_arrays(prefix: str, params: CnnParams, with_velocity: bool) -> list[tuple[str, np.ndarray]]:
    out = [(prefix + name, v.data) for name, v in params.named_volumes()]
    if with_velocity:
        out += [(prefix + name + ".velocity", params.velocity[name]) for name, _ in params.named_volumes()]
    return out


def _state_text(state: TrainState) -> str:
    h = state.history
    lines = [f"next_epoch = {state.next_epoch}", f"best_auc = {state.best_auc!r}",
             f"best_val_loss = {state.best_val_loss!r}", f"stale = {state.stale}",
             f"best_epoch = {h.best_epoch}", f"stop_reason = {h.stop_reason}"]
    lines += [f"history.{i} = {r.row()}" for i, r in enumerate(h.epochs)]
    return "\n".join(lines) + "\n"


def save_checkpoint(params: CnnParams, config: CnnConfig, normalizer: Normalizer | None, path,
                    state: TrainState | None = None) -> None:
    """Version-tagged binary: config text, normaliser, then named f64 arrays.

    ``params`` are written with their momentum buffers; when ``state`` is
    given its best parameters and loop counters are stored too.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    _write_text(buf, config.to_text())
    buf.write(struct.pack("<B", normalizer is not None))
    if normalizer is not None:
        _write_array(buf, "normalizer.mean_image", normalizer.mean_image)
        buf.write(struct.pack("<d", normalizer.max_abs))
    arrays = _param_arrays("", params, True)
    if state is not None and state.best_params is not None:
        arrays += _param_arrays("best.", state.best_params, False)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    _write_text(buf, _state_text(state) if state is not None else "")
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: corrupt checkpoint (truncated at byte {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.path}: corrupt checkpoint text") from exc

    def array(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8", errors="replace")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = math.prod(shape)
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, data


def _params_from(arrays: dict[str, np.ndarray], prefix: str, with_velocity: bool) -> CnnParams:
    layers = {name: LayerParams.from_arrays(arrays[f"{prefix}{name}.weights"], arrays[f"{prefix}{name}.bias"])
              for name in LAYERS}
    params = CnnParams(**layers)
    for name, v in params.named_volumes():
        key = f"{prefix}{name}.velocity"
        params.velocity[name] = arrays[key] if with_velocity and key in arrays else np.zeros_like(v.data)
    return params


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        config = CnnConfig.from_text(r.text())
    except kvtext.ConfigError as exc:
        raise CheckpointError(f"{path}: corrupt config section: {exc}") from exc
    normalizer = None
    (has_norm,) = r.unpack("<B")
    if has_norm:
        _, mean_image = r.array()
        (max_abs,) = r.unpack("<d")
        normalizer = Normalizer(mean_image, max_abs)
    (n_arrays,) = r.unpack("<I")
    arrays = dict(r.array() for _ in range(n_arrays))
    state_text = r.text()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(raw) - r.pos} trailing bytes)")
    try:
        params = _params_from(arrays, "", True)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    expected = config.param_shapes()
    for name in LAYERS:
        layer = getattr(params, name)
        if (layer.weights.shape, layer.bias.shape) != expected[name]:
            raise CheckpointError(f"{path}: {name} shape does not match stored config")
    state = None
    if state_text:
        kv = kvtext.parse_lines(state_text)
        history = TrainHistory(
            [EpochRecord.from_row(kv[f"history.{i}"]) for i in range(sum(k.startswith("history.") for k in kv))],
            int(kv["best_epoch"]), kv["stop_reason"])
        best = _params_from(arrays, "best.", False) if "best.fc.weights" in arrays else None
        state = TrainState(params, history, int(kv["next_epoch"]), best, float(kv["best_auc"]),
                           float(kv["best_val_loss"]), int(kv["stale"]))
    return Checkpoint(params, config, normalizer, state)
