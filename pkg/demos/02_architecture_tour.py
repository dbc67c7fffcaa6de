"""Walk through the discriminator-as-encoder layout at full and desk scale.

    python demos/02_architecture_tour.py

Prints tensor shapes along the trunk, the multi-scale logits, parameter
counts and the measured receptive field of each classifier scale.
"""
import torch

from nicegan.config import default_paper_config, desk_config
from nicegan.networks import (build_discriminator, build_generator, count_parameters, discriminate,
                              probe_receptive_field)


def tour(cfg, label):
    print(f"== {label}: {cfg.image_size}px, base_filters={cfg.base_filters}, "
          f"scales={list(cfg.scales_enabled)}")
    d = build_discriminator(cfg).eval()
    g = build_generator(cfg).eval()
    x = torch.randn(1, cfg.channels, cfg.image_size, cfg.image_size)
    with torch.no_grad():
        latent, cam = d.encode(x)
        logits = discriminate(d, x)
        out = g(latent)
    print(f"  latent {tuple(latent.shape)}  cam logit {tuple(cam.shape)}")
    for name, v in logits.items():
        print(f"  {name} logits {tuple(v.shape)}")
    print(f"  generator output {tuple(out.shape)}")
    print(f"  params: discriminator {count_parameters(d) / 1e6:.2f}M, "
          f"generator {count_parameters(g) / 1e6:.2f}M")
    # the field is a property of the layers, not the input; c2 needs more than 256px
    for s in cfg.scales_enabled:
        print(f"  receptive field {s}: {probe_receptive_field(d, s, probe_size=320)}px")


if __name__ == "__main__":
    tour(desk_config(), "desk")
    # the full-size model is ~110M parameters; this takes a few seconds
    tour(default_paper_config(), "full")
