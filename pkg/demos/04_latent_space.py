"""Inspect the shared latent space of a trained checkpoint.

    python demos/04_latent_space.py --checkpoint runs/quickstart/checkpoints/latest

Writes an interpolation strip, attention-style heatmaps of the latent
code, and a CSV of pooled latent vectors for both domains.
"""
import argparse
import os

import numpy as np

from nicegan import load_checkpoint
from nicegan.analysis import (export_latents, image_grid, interpolate, latent_heatmap,
                              read_latents, translate)
from nicegan.data import datasets_for_config, resize_bilinear, save_image, stack_dataset
from nicegan.metrics import mmd2_unbiased


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="runs/latent_space")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    state = load_checkpoint(args.checkpoint)
    size = state.cfg.image_size
    test_x, test_y = datasets_for_config(state.cfg, "test")
    x = stack_dataset(test_x, size, limit=4)
    y = stack_dataset(test_y, size, limit=4)

    # t=0 is E_x(x), t=1 is E_y(y); top row decodes to X, bottom to Y
    grid = interpolate(state, x[0], y[0], np.linspace(0, 1, 6))
    save_image(image_grid([[g[1] for g in grid], [g[2] for g in grid]]),
               os.path.join(args.out, "interpolation.png"))

    # heatmaps are at latent resolution; upsample so they line up with inputs
    latent = translate(state, x, "x2y").latent
    heat = latent_heatmap(latent)
    heat_rgb = [np.repeat(resize_bilinear(h[..., None].astype(np.float32), size), 3, axis=2) * 2 - 1
                for h in heat]
    save_image(image_grid([list(x), heat_rgb]), os.path.join(args.out, "heatmaps.png"))

    path = export_latents(state, {"x": test_x, "y": test_y}, os.path.join(args.out, "latents.csv"))
    groups = read_latents(path)
    print(f"latents: {', '.join(f'{k}={v.shape}' for k, v in groups.items())}")
    print(f"pooled latent MMD^2 between domains: {mmd2_unbiased(groups['x'], groups['y']):.5f}")
    print(f"outputs in {args.out}")


if __name__ == "__main__":
    main()
