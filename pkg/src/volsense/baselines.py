"""Comparison classifiers: Fisher-z connectivity and PCA features with L2 logistic regression."""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datapipe import DataError, Series4D, SplitManifest, sliding_window_mean
from .metrics import EvalReport, PredictionSet, auc_roc, evaluate, soft_vote


# ---------------------------------------------------------------------------
# Parcellation and connectivity
# ---------------------------------------------------------------------------

@dataclass
class Parcellation:
    labels: np.ndarray  # (D, H, W) ints, 0 = background
    n_regions: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64)
        ids = np.unique(self.labels)
        if ids.min() < 0 or ids.max() > self.n_regions:
            raise DataError(f"parcellation ids must lie in 0..{self.n_regions}")
        missing = sorted(set(range(1, self.n_regions + 1)) - set(ids.tolist()))
        if missing:
            raise DataError(f"parcellation regions without voxels: {missing[:10]}")


def grid_parcellation(shape, n_regions: int = 100) -> Parcellation:
    """Split the volume into an a x b x c grid of near-equal blocks, a*b*c = n_regions."""
    best = None
    for a in range(1, n_regions + 1):
        for b in range(1, n_regions // a + 1):
            if n_regions % (a * b):
                continue
            c = n_regions // (a * b)
            if a > shape[0] or b > shape[1] or c > shape[2]:
                continue
            sizes = (shape[0] / a, shape[1] / b, shape[2] / c)
            spread = max(sizes) / min(sizes)
            if best is None or spread < best[0]:
                best = (spread, (a, b, c))
    if best is None:
        raise DataError(f"cannot tile {shape} into {n_regions} blocks")
    grid = best[1]
    coords = [np.minimum((np.arange(n) * g) // n, g - 1) for n, g in zip(shape, grid)]
    ii, jj, kk = np.meshgrid(*coords, indexing="ij")
    return Parcellation(1 + (ii * grid[1] + jj) * grid[2] + kk, n_regions)


def region_time_series(series: Series4D, parc: Parcellation) -> np.ndarray:
    """(R, T) matrix of region-mean signals."""
    if series.voxel_dims != parc.labels.shape:
        raise DataError(f"series {series.voxel_dims} and parcellation {parc.labels.shape} differ")
    flat = parc.labels.reshape(-1)
    counts = np.bincount(flat, minlength=parc.n_regions + 1)[1:]
    if np.any(counts == 0):
        raise DataError("parcellation has an empty region")
    frames = series.frames.reshape(series.n_frames, -1)
    sums = np.stack([np.bincount(flat, weights=f, minlength=parc.n_regions + 1)[1:] for f in frames], axis=1)
    return sums / counts[:, None]


R_CLAMP = 1.0 - 1e-7


@dataclass
class ConnectivityMatrix:
    z: np.ndarray  # (R, R) symmetric, zero diagonal
    degenerate: np.ndarray  # (R,) bool: rows with zero variance

    def upper_triangle(self) -> np.ndarray:
        """Row-major upper triangle without the diagonal: R(R-1)/2 features."""
        return self.z[np.triu_indices(self.z.shape[0], k=1)]


def fisher_z(ts: np.ndarray) -> ConnectivityMatrix:
    """atanh of clamped Pearson correlations between rows of ``ts``."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.shape[1] < 3:
        raise DataError("need at least 3 time points for correlations")
    centered = ts - ts.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    degenerate = norms == 0
    unit = np.divide(centered, norms[:, None], out=np.zeros_like(centered), where=~degenerate[:, None])
    r = np.clip(unit @ unit.T, -R_CLAMP, R_CLAMP)
    z = np.arctanh(r)
    z = (z + z.T) / 2
    np.fill_diagonal(z, 0.0)
    z[degenerate, :] = 0.0
    z[:, degenerate] = 0.0
    return ConnectivityMatrix(z, degenerate)


# ---------------------------------------------------------------------------
# Zero-column removal and PCA
# ---------------------------------------------------------------------------

@dataclass
class ColumnFilter:
    keep: np.ndarray  # retained column indices
    n_columns: int

    def transform(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.keep]

    def restore(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros((X.shape[0], self.n_columns))
        out[:, self.keep] = X
        return out


def remove_zero_columns(X: np.ndarray) -> tuple[np.ndarray, ColumnFilter]:
    """Drop columns that are exactly zero in every row; the filter is reused for val/test."""
    nonzero = np.any(X != 0, axis=0)
    if not nonzero.any():
        raise DataError("every column is zero")
    filt = ColumnFilter(np.flatnonzero(nonzero), X.shape[1])
    return filt.transform(X), filt


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray
    column_filter: ColumnFilter | None = None

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.column_filter is not None:
            X = self.column_filter.transform(X)
        return (X - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        X = Z @ self.components + self.mean
        return self.column_filter.restore(X) if self.column_filter is not None else X


def pca_fit(X: np.ndarray, k: int = 100, column_filter: ColumnFilter | None = None) -> PcaModel:
    """Top-k right singular directions of the centred training matrix.

    Each component is signed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if column_filter is not None:
        X = column_filter.transform(X)
    n, d = X.shape
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} must be in [1, min(n-1, d)] = [1, {min(n - 1, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k]
    lead = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(k), lead])[:, None]
    return PcaModel(mean, comps, s[:k] ** 2 / (n - 1), column_filter)


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    return model.transform(X)


# ---------------------------------------------------------------------------
# L2-regularised logistic regression
# ---------------------------------------------------------------------------

@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    l2: float
    converged: bool = True
    grad_norm: float = 0.0
    n_iter: int = 0
    objective_trace: list[float] = field(default_factory=list)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logreg_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean BCE + l2 * ||w||^2 (bias unpenalised) and its gradient; theta = [w, b]."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    # log(1 + e^z) - y z, stable for large |z|
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + l2 * (w @ w)
    resid = (_sigmoid(z) - y) / y.size
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ resid + 2 * l2 * w
    grad[-1] = resid.sum()
    return float(loss), grad


def logreg_train(features: np.ndarray, labels, l2: float = 1.0, max_iters: int = 5000,
                 tol: float = 1e-8, history: int = 10) -> LogRegModel:
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    Only gradients are used (no factorisations).  Stops when the gradient
    norm falls below ``tol``; otherwise warns and returns the last iterate.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.isfinite(X).all():
        raise DataError("non-finite features")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    theta = np.zeros(X.shape[1] + 1)
    f, g = logreg_objective(theta, X, y, l2)
    trace = [f]
    s_hist, y_hist = [], []
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) < tol:
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv in reversed(list(zip(s_hist, y_hist))):
            a = (s @ q) / (yv @ s)
            alphas.append(a)
            q -= a * yv
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, yv), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            q += s * (a - (yv @ q) / (yv @ s))
        direction = -q
        slope = g @ direction
        if slope >= 0:
            direction, slope = -g, -(g @ g)
            s_hist.clear()
            y_hist.clear()
        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        while True:
            cand = theta + step * direction
            f_new, g_new = logreg_objective(cand, X, y, l2)
            if f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if f_new > f:
            # no decrease possible at machine precision
            break
        s_vec, y_vec = cand - theta, g_new - g
        if s_vec @ y_vec > 1e-16 * (y_vec @ y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
        theta, f, g = cand, f_new, g_new
        trace.append(f)
    gnorm = float(np.linalg.norm(g))
    converged = gnorm < tol
    if not converged:
        warnings.warn(f"logistic regression stopped with gradient norm {gnorm:.3g} after {it} iterations",
                      RuntimeWarning, stacklevel=2)
    return LogRegModel(theta[:-1], float(theta[-1]), l2, converged, gnorm, it, trace)


def logreg_predict(model: LogRegModel, features: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(features, dtype=np.float64) @ model.weights + model.bias)


def connectivity_features(series: Series4D, parc: Parcellation) -> np.ndarray:
    return fisher_z(region_time_series(series, parc)).upper_triangle()


# ---------------------------------------------------------------------------
# End-to-end pipelines
# ---------------------------------------------------------------------------

KINDS = ("pca-lr", "fisherz-lr")


@dataclass
class BaselineConfig:
    k: int = 100
    l2_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    n_regions: int = 100
    max_iters: int = 5000
    tol: float = 1e-8


@dataclass
class BaselineResult:
    kind: str
    report: EvalReport
    predictions: PredictionSet
    l2: float
    k: int | None
    model: LogRegModel
    pca: PcaModel | None = None


def _windowed_rows(series: Sequence[Series4D], m: int, s: int):
    rows, ids, labels = [], [], []
    for ser in series:
        for w in sliding_window_mean(ser, m, s):
            rows.append(w.voxels.reshape(-1))
            ids.append(ser.subject_id)
            labels.append(ser.label)
    return np.stack(rows), np.array(ids), np.array(labels)


def _fit_and_score(X_tr, y_tr, X_val, val_ids, y_val, cfg: BaselineConfig):
    """Validation-AUC selection of the L2 strength; ties keep the first grid entry."""
    best = None
    for l2 in cfg.l2_grid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model = logreg_train(X_tr, y_tr, l2=l2, max_iters=cfg.max_iters, tol=cfg.tol)
        votes = soft_vote(val_ids, y_val, logreg_predict(model, X_val))
        score = auc_roc(votes.subject_labels, votes.subject_probs)
        if best is None or score > best[1]:
            best = (model, score)
    if not best[0].converged:
        warnings.warn(f"selected model (l2={best[0].l2}) did not reach tol={cfg.tol}", RuntimeWarning,
                      stacklevel=3)
    return best[0]


def run_baseline(kind: str, cohort: dict[str, Series4D], manifest: SplitManifest,
                 cfg: BaselineConfig | None = None, window: int = 2, stride: int = 1,
                 parcellation: Parcellation | None = None) -> BaselineResult:
    """Fit on the manifest's train split, select l2 on val, report on test.

    ``pca-lr`` uses flattened window means (zero columns dropped, PCA,
    logistic regression, soft vote per subject).  ``fisherz-lr`` uses one
    connectivity vector per subject.
    """
    cfg = cfg or BaselineConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {KINDS}")
    split = {name: [cohort[s] for s in manifest.subjects(name)] for name in ("train", "val", "test")}
    if not split["test"]:
        raise DataError("test split is empty")
    if kind == "fisherz-lr":
        if parcellation is None:
            raise DataError("fisherz-lr needs a parcellation")

        def feats(series):
            X = np.stack([connectivity_features(s, parcellation) for s in series])
            ids = np.array([s.subject_id for s in series])
            return X, ids, np.array([s.label for s in series])

        (X_tr, _, y_tr), (X_va, id_va, y_va), (X_te, id_te, y_te) = (feats(split[n]) for n in
                                                                      ("train", "val", "test"))
        model = _fit_and_score(X_tr, y_tr, X_va, id_va, y_va, cfg)
        probs = logreg_predict(model, X_te)
        preds = soft_vote(id_te, y_te, probs)
        return BaselineResult(kind, evaluate(preds), preds, model.l2, None, model)

    X_tr, _, y_tr = _windowed_rows(split["train"], window, stride)
    X_va, id_va, y_va = _windowed_rows(split["val"], window, stride)
    X_te, id_te, y_te = _windowed_rows(split["test"], window, stride)
    _, filt = remove_zero_columns(X_tr)
    k = min(cfg.k, X_tr.shape[0] - 1, filt.keep.size)
    pca = pca_fit(X_tr, k, filt)
    model = _fit_and_score(pca.transform(X_tr), y_tr, pca.transform(X_va), id_va, y_va, cfg)
    preds = soft_vote(id_te, y_te, logreg_predict(model, pca.transform(X_te)))
    return BaselineResult(kind, evaluate(preds), preds, model.l2, k, model, pca)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

BASELINE_MAGIC = b"VBSL"


def save_baseline(result: BaselineResult, path) -> None:
    """Named f64 arrays, each prefixed by its shape, after a small header."""
    arrays = [("weights", result.model.weights), ("bias", np.array([result.model.bias])),
              ("l2", np.array([result.model.l2]))]
    if result.pca is not None:
        arrays += [("pca.mean", result.pca.mean), ("pca.components", result.pca.components),
                   ("pca.explained_variance", result.pca.explained_variance),
                   ("pca.keep", result.pca.column_filter.keep.astype(np.float64)),
                   ("pca.n_columns", np.array([result.pca.column_filter.n_columns], dtype=np.float64))]
    buf = io.BytesIO()
    buf.write(BASELINE_MAGIC)
    kind = result.kind.encode()
    buf.write(struct.pack("<B", len(kind)) + kind)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_baseline(path) -> tuple[str, LogRegModel, PcaModel | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != BASELINE_MAGIC:
        raise DataError(f"{path}: not a baseline model file")
    pos = 4
    (n,) = struct.unpack_from("<B", raw, pos)
    kind = raw[pos + 1:pos + 1 + n].decode()
    pos += 1 + n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise DataError(f"{path}: truncated baseline model file")
            arrays[name] = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise DataError(f"{path}: truncated baseline model file") from exc
    model = LogRegModel(arrays["weights"], float(arrays["bias"][0]), float(arrays["l2"][0]))
    pca = None
    if "pca.mean" in arrays:
        filt = ColumnFilter(arrays["pca.keep"].astype(np.int64), int(arrays["pca.n_columns"][0]))
        pca = PcaModel(arrays["pca.mean"], arrays["pca.components"], arrays["pca.explained_variance"], filt)
    return kind, model, pca
