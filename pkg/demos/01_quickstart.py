"""Train a small model on the synthetic hue-swap task, then score it.

    python demos/01_quickstart.py --iterations 300 --out runs/quickstart

X images hold shapes tinted red, Y images the same kind of shapes tinted
blue-ish. A working translator has to change the tint and keep the shapes.
"""
import argparse

from nicegan import desk_config, train
from nicegan.analysis import evaluate_model, image_grid, translate_all
from nicegan.data import datasets_for_config, save_image, stack_dataset
from nicegan.training import init_state


def summarize(tag, reports):
    for r in reports:
        where = r.extra.get("direction", "")
        print(f"  {tag:8s} {r.name:10s} {where:4s} {r.value:.5f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--out", default="runs/quickstart")
    args = ap.parse_args()

    cfg = desk_config(iterations=args.iterations, out_dir=args.out, log_every=max(1, args.iterations // 20))
    test_x, test_y = datasets_for_config(cfg, "test")
    wanted = ("kid", "cycle", "mmd")

    # untrained baseline, same seed as the run below
    summarize("init", evaluate_model(init_state(cfg), test_x, test_y, metrics=wanted))

    state, log = train(cfg)
    last = f", last total_g={log[-1]['total_g']:.3f}" if log else ""
    print(f"trained {state.iteration} iterations{last}")
    summarize("trained", evaluate_model(state, test_x, test_y, metrics=wanted))

    # first row: inputs, second row: their x->y translations
    x = stack_dataset(test_x, cfg.image_size, limit=8)
    fake = translate_all(state, x, "x2y")
    save_image(image_grid([list(x), list(fake)]), f"{args.out}/x2y_samples.png")
    print(f"samples -> {args.out}/x2y_samples.png, log -> {args.out}/log.jsonl")


if __name__ == "__main__":
    main()
