"""Train the default CNN on strong-signal and null phantom cohorts over several seeds.

    python3 scripts/phantom_benchmark.py --seeds 0 1 2
    python3 scripts/phantom_benchmark.py --null --shape 16 16 16 --radius 4 --subjects 200 --T 6 --seeds 0 1 2 3 4
"""
import argparse
import logging

from volsense import datapipe as dp
from volsense import metrics as mt
from volsense import model as md
from volsense.experiments import run_phantom


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--subjects", type=int, default=20, help="subjects per group")
    ap.add_argument("--T", type=int, default=30)
    ap.add_argument("--shape", type=int, nargs=3, default=list(dp.DEFAULT_SHAPE))
    ap.add_argument("--radius", type=float, default=6.0)
    ap.add_argument("--noise", type=float, default=0.5)
    ap.add_argument("--null", action="store_true", help="identical group amplitudes")
    ap.add_argument("--max-epochs", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    center = tuple(n // 2 for n in args.shape)
    amplitudes = (1.0, 1.0) if args.null else (0.0, 1.0)
    config = md.CnnConfig(input_shape=tuple(args.shape), max_epochs=args.max_epochs)
    reports = []
    print("seed,epochs,first_full_train_acc_epoch,best_epoch,test_auc,test_f1")
    for seed in args.seeds:
        spec = dp.PhantomSpec(n_young=args.subjects, n_old=args.subjects, T=args.T, shape=tuple(args.shape),
                              regions=[dp.Region(center, args.radius, amplitudes)],
                              noise_sigma=args.noise, seed=1000 + seed)
        run = run_phantom(spec, config, seed)
        full = [e.epoch for e in run.history.epochs if e.train_acc == 1.0]
        reports.append(run.report)
        print(f"{seed},{len(run.history.epochs)},{full[0] if full else ''},{run.history.best_epoch},"
              f"{run.report.auc:.4f},{run.report.f1:.4f}", flush=True)
    summary = mt.aggregate_runs(reports)
    print(mt.format_table([("CNN", "null phantom" if args.null else "phantom", summary)]), end="")


if __name__ == "__main__":
    main()
