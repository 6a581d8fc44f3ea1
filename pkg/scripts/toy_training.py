"""Toy training run: loss descent and held-out DistErr against the identity predictor.

    python scripts/toy_training.py --steps 200 --seed 0
"""
import argparse

from f2vreg.experiments import toy_training_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--loss-log", help="write the per-step loss here")
    args = ap.parse_args()

    rep = toy_training_run(args.seed, args.steps, args.batch_size, args.lr)
    if args.loss_log:
        with open(args.loss_log, "w") as fh:
            fh.write("step\tloss\n")
            fh.writelines(f"{i}\t{v:.6f}\n" for i, v in enumerate(rep.history))
    print(f"train {rep.n_train} / test {rep.n_test} samples, {rep.seconds:.0f} s")
    print(f"loss first-20 mean {rep.first_mean:.4f}  last-20 mean {rep.last_mean:.4f}  ratio {rep.loss_ratio:.3f}")
    print(f"held-out DistErr  nn {rep.nn_dist_err:.3f} mm  identity {rep.identity_dist_err:.3f} mm")


if __name__ == "__main__":
    main()
