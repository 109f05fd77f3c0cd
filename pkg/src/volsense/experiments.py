"""In-memory protocols on phantom cohorts: split, window, normalise, train, evaluate."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import datapipe as dp
from . import interpret as it
from . import metrics as mt
from . import model as md

log = logging.getLogger(__name__)


@dataclass
class PhantomRun:
    seed: int
    manifest: dp.SplitManifest
    params: md.CnnParams
    history: md.TrainHistory
    report: mt.EvalReport
    predictions: mt.PredictionSet
    normalizer: dp.Normalizer
    test: dp.SampleSet


def split_windows(spec: dp.PhantomSpec, manifest: dp.SplitManifest, m: int = 2,
                  s: int = 1) -> dict[str, dp.SampleSet]:
    """One pass over the generated cohort; only windowed samples are kept."""
    buckets: dict[str, list] = {name: [] for name in dp.SPLITS}
    for series in dp.iter_phantom_cohort(spec):
        buckets[manifest.assignment[series.subject_id]].append(
            dp.windowed_set([series], m, s))
    out = {}
    for name, parts in buckets.items():
        if not parts:
            raise dp.DataError(f"{name} split is empty")
        out[name] = dp.SampleSet(np.concatenate([p.voxels for p in parts]),
                                 np.concatenate([p.labels for p in parts]),
                                 np.concatenate([p.subject_ids for p in parts]),
                                 np.concatenate([p.window_index for p in parts]))
    return out


def run_phantom(spec: dp.PhantomSpec, config: md.CnnConfig, seed: int,
                ratios=(0.8, 0.1, 0.1), m: int = 2, s: int = 1) -> PhantomRun:
    """Split with ``seed``, train with ``config`` reseeded to ``seed``, report on test."""
    manifest = dp.stratified_subject_split(dp.phantom_subject_ids(spec), ratios, seed)
    sets = split_windows(spec, manifest, m, s)
    norm = dp.fit_normalizer(sets["train"])
    for name in dp.SPLITS:
        sets[name].voxels = norm.apply(sets[name].voxels)
    cfg = md.CnnConfig(**{**config.__dict__, "seed": seed})
    params, history = md.train(cfg, sets["train"], sets["val"])
    test = sets["test"]
    preds = mt.soft_vote(test.subject_ids, test.labels, md.predict_proba(params, test.voxels, cfg))
    report = mt.evaluate(preds)
    log.info("seed %d: test auc %.4f f1 %.4f after %d epochs", seed, report.auc, report.f1,
             len(history.epochs))
    return PhantomRun(seed, manifest, params, history, report, preds, norm, test)


@dataclass
class SensitivityResult:
    dice: dict[int, float]
    locality: dict[int, float]  # max |grad| outside region / max |grad| inside
    groups: dict[int, it.GroupSensitivity]


def sensitivity_recovery(run: PhantomRun, config: md.CnnConfig, truth: np.ndarray,
                         percentile: float = 95.0) -> SensitivityResult:
    """Group maps over the test split scored against a planted-region mask."""
    dice, locality, groups = {}, {}, {}
    for group in (0, 1):
        members = run.test.labels == group
        maps = it.sensitivity_maps(run.params, run.test.voxels[members], group, config)
        agg = it.aggregate_group(maps, group, percentile)
        groups[group] = agg
        dice[group] = it.dice(agg.region_mask, truth)
        # squared gradients, so the magnitude ratio is the square root of the map ratio
        peak_in = np.sqrt(maps[:, truth].max())
        peak_out = np.sqrt(maps[:, ~truth].max())
        locality[group] = float(peak_out / peak_in) if peak_in > 0 else float("inf")
    return SensitivityResult(dice, locality, groups)
