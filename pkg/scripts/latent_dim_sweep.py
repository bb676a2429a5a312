"""Mean held-out Chamfer distance against latent size on the disk family.

    python3 scripts/latent_dim_sweep.py --ks 1 2 3 5 --set n_train=60
"""

import argparse
import csv
import sys

from sdf_surrogate.config import load_config
from sdf_surrogate.experiments import ShapeStudy, fit_and_score

DISK = dict(family="Disk", n_train=60, n_test=20, loss="L1", sdf_adam_epochs=1000, points_per_shape=256,
            lbfgs_points_per_shape=500, sdf_lbfgs_max_iter=1000, restarts=5, infer_points=2225)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ks", type=int, nargs="+", default=[1, 2, 3, 5])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    study = ShapeStudy.build(load_config(None, {**DISK, **dict(s.split("=", 1) for s in args.set)}))
    out = csv.writer(sys.stdout)
    out.writerow(["k", "seed", "mean_cd", "n_failed", "train_seconds"])
    for k in args.ks:
        for seed in args.seeds:
            res = fit_and_score(study, seed, k=k)
            out.writerow([k, seed, f"{res.mean_cd:.6e}", res.report.n_failed, f"{res.seconds:.0f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
