"""Command-line driver: synth, prepare, train, eval, interpret, baseline.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import baselines as bl
from . import datapipe as dp
from . import interpret as it
from . import kvtext
from . import metrics as mt
from . import model as md

log = logging.getLogger("volsense")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TABLE_ROWS = {  # file stem -> (method, features), in table order
    "cnn": ("CNN", "fMRI windows"),
    "pca-lr": ("LR", "PCA of fMRI windows"),
    "fisherz-lr": ("LR", "Fisher z connectivity"),
}


@dataclass
class RunConfig(md.CnnConfig):
    data_dir: str = "data"
    out_dir: str = "runs"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    window: int = 2
    stride: int = 1
    n_runs: int = 10
    pca_k: int = 100
    l2_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    parcellation: str = ""  # defaults to <data_dir>/parcellation.vol4
    percentile: float = 95.0
    slice_axis: int = 0

    def __post_init__(self):
        super().__post_init__()
        self.ratios = tuple(self.ratios)
        self.l2_grid = tuple(self.l2_grid)

    def to_text(self) -> str:
        return kvtext.dump(self)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return kvtext.load(cls, text)

    def cnn(self, seed: int) -> md.CnnConfig:
        names = [f.name for f in dataclasses.fields(md.CnnConfig)]
        return md.CnnConfig(**{**{n: getattr(self, n) for n in names}, "seed": seed})

    def validate(self) -> None:
        super().validate()
        if self.n_runs < 1:
            raise kvtext.ConfigError("n_runs must be >= 1")
        if self.window < 1 or self.stride < 1:
            raise kvtext.ConfigError("window and stride must be >= 1")
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise kvtext.ConfigError(f"ratios must be three positive numbers, got {self.ratios}")
        if not 0 < self.percentile < 100:
            raise kvtext.ConfigError("percentile must be in (0, 100)")
        if self.slice_axis not in (0, 1, 2):
            raise kvtext.ConfigError("slice_axis must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# Phantom spec text: flat keys plus one "region.N = cx,cy,cz,radius,a_young,a_old" per region
# ---------------------------------------------------------------------------

def parse_phantom_spec(text: str) -> dp.PhantomSpec:
    raw = kvtext.parse_lines(text)
    regions = []
    for key in sorted((k for k in raw if k.startswith("region.")), key=lambda k: int(k.split(".", 1)[1])):
        vals = [float(v) for v in raw.pop(key).split(",")]
        if len(vals) != 6:
            raise kvtext.ConfigError(f"{key}: expected cx,cy,cz,radius,a_young,a_old")
        regions.append(dp.Region(tuple(int(v) for v in vals[:3]), vals[3], (vals[4], vals[5])))
    flat = "".join(f"{k} = {v}\n" for k, v in raw.items())
    spec = kvtext.load(dp.PhantomSpec, flat, regions=regions) if regions else kvtext.load(dp.PhantomSpec, flat)
    spec.shape = tuple(spec.shape)
    return spec


def format_phantom_spec(spec: dp.PhantomSpec) -> str:
    lines = [line for line in kvtext.dump(spec).splitlines() if not line.startswith("regions")]
    for i, r in enumerate(spec.regions):
        lines.append(f"region.{i} = {','.join(str(c) for c in r.center)},{r.radius!r},"
                     f"{r.amplitudes[0]!r},{r.amplitudes[1]!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Cohort on disk
# ---------------------------------------------------------------------------

COHORT_FILE = "cohort.csv"


def read_cohort_index(data_dir: Path) -> dict[str, tuple[int, Path]]:
    index_path = data_dir / COHORT_FILE
    if not index_path.exists():
        raise dp.DataError(f"{index_path} not found; run `volsense synth` or provide a cohort index")
    out = {}
    for line in index_path.read_text().splitlines()[1:]:
        sid, label, rel = line.split(",")
        out[sid] = (int(label), data_dir / rel)
    if not out:
        raise dp.DataError(f"{index_path} lists no subjects")
    return out


def iter_series(index: dict[str, tuple[int, Path]], subjects) -> Iterator[dp.Series4D]:
    for sid in sorted(subjects):
        series = dp.load_series(index[sid][1])
        if series.subject_id != sid or series.label != index[sid][0]:
            raise dp.DataError(f"{index[sid][1]} header does not match cohort index entry {sid}")
        yield series


def split_sets(cfg: RunConfig, index, manifest: dp.SplitManifest) -> dict[str, dp.SampleSet]:
    sets = {}
    for split in dp.SPLITS:
        ids = manifest.subjects(split)
        if not ids:
            raise dp.DataError(f"{split} split is empty")
        sets[split] = dp.windowed_set(iter_series(index, ids), cfg.window, cfg.stride)
        if sets[split].voxels.shape[1:] != tuple(cfg.input_shape):
            raise kvtext.ConfigError(f"data volumes {sets[split].voxels.shape[1:]} do not match "
                                     f"input_shape {cfg.input_shape}")
    return sets


def run_manifest(cfg: RunConfig, index, run: int) -> dp.SplitManifest:
    subjects = [(sid, label) for sid, (label, _) in sorted(index.items())]
    return dp.stratified_subject_split(subjects, cfg.ratios, cfg.seed + run)


# ---------------------------------------------------------------------------
# Aggregate table
# ---------------------------------------------------------------------------

def write_table(out: Path, key: str, reports: list[mt.EvalReport]) -> str:
    """Store this method's summary row, then rebuild table.csv from every stored row."""
    summary = mt.aggregate_runs(reports)
    method, features = TABLE_ROWS[key]
    row_text = mt.format_table([(method, features, summary)]).splitlines()[1]
    (out / f"row_{key}.csv").write_text(row_text + "\n")
    rows = [(out / f"row_{k}.csv").read_text().strip() for k in TABLE_ROWS if (out / f"row_{k}.csv").exists()]
    table = "method,features,n_runs,f1,auc\n" + "".join(r + "\n" for r in rows)
    (out / "table.csv").write_text(table)
    return table


def write_run_outputs(run_dir: Path, manifest: dp.SplitManifest, preds: mt.PredictionSet,
                      report: mt.EvalReport) -> None:
    manifest.save(run_dir / "manifest.csv")
    (run_dir / "predictions.csv").write_text(preds.subject_table())
    (run_dir / "report.txt").write_text(report.to_text())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = parse_phantom_spec(Path(args.spec).read_text())
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    out = Path(args.out)
    (out / "subjects").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    lines = ["subject_id,label,path"]
    for series in dp.iter_phantom_cohort(spec):
        rel = f"subjects/{series.subject_id}.vol4"
        dp.save_series(series, out / rel)
        lines.append(f"{series.subject_id},{series.label},{rel}")
    (out / COHORT_FILE).write_text("\n".join(lines) + "\n")
    for i, mask in enumerate(dp.phantom_masks(spec)):
        dp.write_vol4(out / "truth" / f"region_{i}.vol4", mask.astype(np.float32), 1, f"region_{i}")
    parc = bl.grid_parcellation(spec.shape, args.regions)
    dp.write_vol4(out / "parcellation.vol4", parc.labels.astype(np.float32), 0, f"grid{args.regions}")
    (out / "spec.txt").write_text(format_phantom_spec(spec))
    log.info("wrote %d subjects to %s", len(lines) - 1, out)
    print(f"synth: {len(lines) - 1} subjects, {len(spec.regions)} regions -> {out}")
    return EXIT_OK


def cmd_prepare(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    index = read_cohort_index(Path(cfg.data_dir))
    lines = ["run,seed,split,subjects,samples"]
    for run in range(cfg.n_runs):
        manifest = run_manifest(cfg, index, run)
        run_dir = out / "splits" / f"run_{run:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest.save(run_dir / "manifest.csv")
        for split in dp.SPLITS:
            ids = manifest.subjects(split)
            n = sum(dp.window_count(dp.load_series(index[s][1]).n_frames, cfg.window, cfg.stride) for s in ids)
            lines.append(f"{run},{cfg.seed + run},{split},{len(ids)},{n}")
    (out / "prepare.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    index = read_cohort_index(Path(cfg.data_dir))
    reports = []
    for run in range(cfg.n_runs):
        seed = cfg.seed + run
        run_dir = out / "cnn" / f"run_{run:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = run_manifest(cfg, index, run)
        sets = split_sets(cfg, index, manifest)
        norm = dp.fit_normalizer(sets["train"])
        sets = {k: dp.normalize_set(norm, v) for k, v in sets.items()}
        ccfg = cfg.cnn(seed)
        state_path = run_dir / "train_state.ckpt"
        resume = md.load_checkpoint(state_path).state if args.resume and state_path.exists() else None

        def save_state(state, ccfg=ccfg, norm=norm, state_path=state_path):
            md.save_checkpoint(state.params, ccfg, norm, state_path, state)

        log.info("run %d (seed %d): %d train / %d val / %d test samples", run, seed,
                 len(sets["train"]), len(sets["val"]), len(sets["test"]))
        params, history = md.train(ccfg, sets["train"], sets["val"], resume=resume, on_epoch_end=save_state)
        md.save_checkpoint(params, ccfg, norm, run_dir / "model.ckpt")
        (run_dir / "history.csv").write_text(history.to_csv())
        preds = mt.soft_vote(sets["test"].subject_ids, sets["test"].labels,
                             md.predict_proba(params, sets["test"].voxels, ccfg))
        report = mt.evaluate(preds)
        write_run_outputs(run_dir, manifest, preds, report)
        reports.append(report)
        print(f"run {run}: f1={report.f1:.4f} auc={report.auc:.4f} best_epoch={history.best_epoch}")
    print(write_table(out, "cnn", reports), end="")
    return EXIT_OK


def _checkpoint_and_test_set(cfg: RunConfig, args):
    ck = md.load_checkpoint(args.checkpoint)
    if ck.normalizer is None:
        raise md.CheckpointError(f"{args.checkpoint} has no normalizer")
    manifest = dp.SplitManifest.load(args.manifest)
    ids = manifest.subjects("test")
    if not ids:
        raise dp.DataError("test split is empty")
    index = read_cohort_index(Path(cfg.data_dir))
    test = dp.windowed_set(iter_series(index, ids), cfg.window, cfg.stride)
    if test.voxels.shape[1:] != ck.normalizer.mean_image.shape or \
            tuple(ck.config.input_shape) != test.voxels.shape[1:]:
        raise dp.DataError(f"test volumes {test.voxels.shape[1:]} do not match checkpoint input "
                           f"{ck.config.input_shape}")
    return ck, manifest, dp.normalize_set(ck.normalizer, test)


def cmd_eval(cfg: RunConfig, args) -> int:
    ck, _, test = _checkpoint_and_test_set(cfg, args)
    preds = mt.soft_vote(test.subject_ids, test.labels, md.predict_proba(ck.params, test.voxels, ck.config))
    report = mt.evaluate(preds)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "predictions.csv").write_text(preds.subject_table())
    print(report.to_text(), end="")
    return EXIT_OK


def _load_truth(path: Path | None, shape) -> np.ndarray | None:
    if path is None:
        return None
    files = sorted(path.glob("*.vol4")) if path.is_dir() else [path]
    if not files:
        raise dp.DataError(f"no truth masks under {path}")
    truth = np.zeros(shape, bool)
    for f in files:
        frames, _, _ = dp.read_vol4(f)
        if frames.shape[1:] != tuple(shape):
            raise dp.DataError(f"truth mask {f} has shape {frames.shape[1:]}, expected {shape}")
        truth |= frames[0] > 0
    return truth


def cmd_interpret(cfg: RunConfig, args) -> int:
    ck, _, test = _checkpoint_and_test_set(cfg, args)
    percentile = cfg.percentile
    truth = _load_truth(Path(args.truth) if args.truth else None, ck.normalizer.mean_image.shape)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["group,n_samples,n_subjects,percentile,mask_voxels,peak_d,peak_h,peak_w,dice"]
    for group in (0, 1):
        members = test.labels == group
        if not members.any():
            raise dp.DataError(f"group {group} absent from the test split")
        maps = it.sensitivity_maps(ck.params, test.voxels[members], group, ck.config)
        agg = it.aggregate_group(maps, group, percentile)
        dp.write_vol4(out / f"mean_map_group{group}.vol4", agg.mean_map, group, f"mean_map_group{group}")
        dp.write_vol4(out / f"mask_group{group}.vol4", agg.region_mask.astype(np.float32), group,
                      f"mask_group{group}")
        it.export_slices(agg.mean_map, cfg.slice_axis, out / "slices" / f"group{group}", overlay=agg.region_mask)
        score = "" if truth is None else f"{it.dice(agg.region_mask, truth)!r}"
        peak = it.peak_voxel(agg.mean_map)
        lines.append(f"{group},{agg.n_samples},{len(np.unique(test.subject_ids[members]))},{percentile!r},"
                     f"{int(agg.region_mask.sum())},{peak[0]},{peak[1]},{peak[2]},{score}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    data_dir = Path(cfg.data_dir)
    index = read_cohort_index(data_dir)
    parc = None
    if args.kind == "fisherz-lr":
        parc_path = Path(cfg.parcellation) if cfg.parcellation else data_dir / "parcellation.vol4"
        if not parc_path.exists():
            raise dp.DataError(f"fisherz-lr needs a parcellation; {parc_path} not found")
        frames, _, _ = dp.read_vol4(parc_path)
        labels = np.rint(frames[0]).astype(np.int64)
        parc = bl.Parcellation(labels, int(labels.max()))
    bcfg = bl.BaselineConfig(k=cfg.pca_k, l2_grid=cfg.l2_grid)
    cohort = {s.subject_id: s for s in iter_series(index, index)}
    reports = []
    for run in range(cfg.n_runs):
        manifest = run_manifest(cfg, index, run)
        result = bl.run_baseline(args.kind, cohort, manifest, bcfg, cfg.window, cfg.stride, parc)
        run_dir = out / args.kind / f"run_{run:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_run_outputs(run_dir, manifest, result.predictions, result.report)
        bl.save_baseline(result, run_dir / "model.bin")
        reports.append(result.report)
        print(f"run {run}: f1={result.report.f1:.4f} auc={result.report.auc:.4f} l2={result.l2}")
    print(write_table(out, args.kind, reports), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volsense", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a phantom cohort")
    synth.add_argument("--spec", required=True, help="phantom spec file (key = value)")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--regions", type=int, default=100, help="grid parcellation size")

    def common(p):
        p.add_argument("--config", help="run config file (key = value)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--window", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--runs", type=int)
        p.add_argument("--data", help="cohort directory")
        return p

    common(sub.add_parser("prepare", help="write per-run split manifests and sample counts"))
    common(sub.add_parser("train", help="train and evaluate the CNN over n_runs seeds")).add_argument(
        "--resume", action="store_true", help="continue runs from their saved training state")
    for name, helptext in (("eval", "evaluate a checkpoint on a manifest's test split"),
                           ("interpret", "group sensitivity maps on a manifest's test split")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        if name == "interpret":
            p.add_argument("--percentile", type=float)
            p.add_argument("--truth", help="mask file or directory of masks for Dice")
    common(sub.add_parser("baseline", help="PCA or Fisher-z features with logistic regression")).add_argument(
        "--kind", required=True, choices=bl.KINDS)
    return parser


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
    overrides = {"seed": args.seed, "out_dir": args.out, "window": args.window, "stride": args.stride,
                 "n_runs": args.runs, "data_dir": args.data, "percentile": getattr(args, "percentile", None)}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "interpret": cmd_interpret, "baseline": cmd_baseline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return COMMANDS[args.command](load_run_config(args), args)
    except kvtext.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except md.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dp.DataError, md.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
