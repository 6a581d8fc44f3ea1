"""Seeded classical-registration trials on fresh phantoms.

    python scripts/classical_trials.py --n 50 --seed 20240
"""
import argparse

from f2vreg.experiments import CLASSICAL_SEED, classical_trials
from f2vreg.registrar import OptimizerConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=CLASSICAL_SEED)
    ap.add_argument("--trans", type=float, default=4.0, help="max |t| in mm")
    ap.add_argument("--rot", type=float, default=8.0, help="max |angle| in degrees")
    ap.add_argument("--max-evals", type=int, default=2000)
    ap.add_argument("--restarts", type=int, default=0)
    args = ap.parse_args()

    cfg = OptimizerConfig(max_evals=args.max_evals, restarts=args.restarts)
    rep = classical_trials(args.n, args.seed, cfg, args.trans, args.rot)
    print("trial\tdist_err_mm\tncc\tseconds\texhausted")
    for r in rep.rows:
        print(f"{r.index}\t{r.dist_err:.4f}\t{r.img_ncc:.5f}\t{r.seconds:.2f}\t{int(r.exhausted)}")
    print(f"# DistErr<1mm {rep.success_rate:.1%}  mean NCC {rep.mean_ncc:.4f}  max {rep.max_seconds:.2f} s/case")


if __name__ == "__main__":
    main()
