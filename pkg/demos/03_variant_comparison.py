"""Compare decoupled training against the two coupled controls.

    python demos/03_variant_comparison.py --iterations 200 --out runs/variants

NICE: the discriminator's encoder is trained only by the discriminator loss.
JOINT: the encoder also receives generator gradients.
GEN_COUPLED: the encoder is trained only by the generator loss.
"""
import argparse
import os

from nicegan import desk_config, train
from nicegan.analysis import evaluate_model, plot_curves
from nicegan.data import datasets_for_config
from nicegan.losses import NonFiniteLossError


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--out", default="runs/variants")
    args = ap.parse_args()

    logs = []
    for variant in ("NICE", "JOINT", "GEN_COUPLED"):
        cfg = desk_config(variant=variant, iterations=args.iterations,
                          out_dir=os.path.join(args.out, variant))
        try:
            state, _ = train(cfg)
        except NonFiniteLossError as exc:
            # coupled variants can blow up; that is a result, not a crash
            print(f"{variant}: aborted ({exc})")
            continue
        logs.append(os.path.join(cfg.out_dir, "log.jsonl"))
        test_x, test_y = datasets_for_config(cfg, "test")
        reports = evaluate_model(state, test_x, test_y, metrics=("kid", "cycle"))
        row = ", ".join(f"{r.name}[{r.extra['direction']}]={r.value:.4f}" for r in reports)
        print(f"{variant}: {row}")

    written = plot_curves(logs, os.path.join(args.out, "plots"),
                          labels=[os.path.basename(os.path.dirname(p)) for p in logs])
    print(f"{len(written)} overlay plots in {args.out}/plots")


if __name__ == "__main__":
    main()
