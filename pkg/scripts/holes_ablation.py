"""Centralisation and Fourier-feature ablations on plates with two holes.

Each row is one trained decoder scored on the same held-out plates.

    python3 scripts/holes_ablation.py --variants plain central central+m4 central+m8
"""

import argparse
import csv
import sys

from sdf_surrogate.config import load_config
from sdf_surrogate.experiments import ShapeStudy, fit_and_score

HOLES = dict(family="PlateWithHoles", hole_counts="2", n_train=100, n_test=20, exclude_outer="true", k=5,
             loss="L1", sdf_adam_epochs=1000, points_per_shape=256, lbfgs_points_per_shape=500,
             sdf_lbfgs_max_iter=1500, restarts=5, infer_points=2225)

VARIANTS = {
    "plain": dict(centralize="false", fourier_m=0),
    "central": dict(centralize="true", fourier_m=0),
    "central+m4": dict(centralize="true", fourier_m=4, fourier_sigma=0.5),
    "central+m8": dict(centralize="true", fourier_m=8, fourier_sigma=0.5),
    "plain+m4": dict(centralize="false", fourier_m=4, fourier_sigma=0.5),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=["plain", "central", "central+m4"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    study = ShapeStudy.build(load_config(None, {**HOLES, **dict(s.split("=", 1) for s in args.set)}))
    out = csv.writer(sys.stdout)
    out.writerow(["variant", "seed", "mean_cd", "max_cd", "n_failed", "train_seconds"])
    for name in args.variants:
        for seed in args.seeds:
            res = fit_and_score(study, seed, **VARIANTS[name])
            worst = max(c for c, f in zip(res.report.cd, res.report.failed) if not f)
            out.writerow([name, seed, f"{res.mean_cd:.6e}", f"{worst:.6e}", res.report.n_failed, f"{res.seconds:.0f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
