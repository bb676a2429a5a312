"""Physics-surrogate error on held-out disks with and without the distance feature.

Trains one shape decoder, then several surrogates on its codes.

    python3 scripts/surrogate_features.py --seeds 0 1 2
"""

import argparse
import csv
import sys

from sdf_surrogate import pipeline
from sdf_surrogate.config import load_config
from sdf_surrogate.experiments import PhysStudy, ShapeStudy, fit_and_evaluate_phys, fit_and_score

DISK = dict(family="Disk", n_train=60, n_phys=60, n_test=20, k=3, loss="L1", sdf_adam_epochs=1000,
            points_per_shape=256, lbfgs_points_per_shape=500, sdf_lbfgs_max_iter=1000, restarts=5,
            infer_points=2225, h=1 / 128, phys_hidden="20,15,10,5", phys_points=1000)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    cfg = load_config(None, {**DISK, **dict(s.split("=", 1) for s in args.set)})
    shapes = ShapeStudy.build(cfg)
    decoder = fit_and_score(shapes, 0)
    phys = PhysStudy.build(cfg, shapes.train_shapes[: cfg.n_phys], shapes.test_shapes)
    train_codes = pipeline.phys_codes(cfg, decoder.model, phys.train_shapes)
    out = csv.writer(sys.stdout)
    out.writerow(["use_df", "seed", "test_rel_l2", "train_rel_l2", "train_seconds"])
    for use_df in (True, False):
        for seed in args.seeds:
            res = fit_and_evaluate_phys(phys, decoder.model, train_codes, decoder.codes, seed, use_df=str(use_df))
            out.writerow([use_df, seed, f"{res.rel_l2:.6f}", f"{res.surrogate.history['train_rel_l2']:.6f}",
                          f"{res.seconds:.0f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
