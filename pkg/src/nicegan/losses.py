"""Least-squares adversarial, L1 cycle/reconstruction losses and their weighting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

LOSS_KEYS = ("d_adv_x", "d_adv_y", "g_adv_x", "g_adv_y",
             "cycle_x", "cycle_y", "recon_x", "recon_y", "total_d", "total_g")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, name: str, iteration=None):
        self.name = name
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite loss {name!r}{where}")


class ScaleMismatchError(ValueError):
    pass


def _as_tensor(v):
    return v if torch.is_tensor(v) else torch.as_tensor(v, dtype=torch.float64)


def lsgan_d(real_logits: dict, fake_logits: dict):
    """Sum over scales of mean((real - 1)^2) + mean(fake^2)."""
    if set(real_logits) != set(fake_logits):
        raise ScaleMismatchError(f"real scales {sorted(real_logits)} != fake scales {sorted(fake_logits)}")
    total = 0.0
    for k in sorted(real_logits):
        r, f = _as_tensor(real_logits[k]), _as_tensor(fake_logits[k])
        total = total + torch.mean((r - 1) ** 2) + torch.mean(f ** 2)
    return total


def lsgan_g(fake_logits: dict):
    """Sum over scales of mean((fake - 1)^2)."""
    total = 0.0
    for k in sorted(fake_logits):
        total = total + torch.mean((_as_tensor(fake_logits[k]) - 1) ** 2)
    return total


def l1_loss(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


@dataclass
class LossBundle:
    d_adv_x: float = 0.0
    d_adv_y: float = 0.0
    g_adv_x: float = 0.0
    g_adv_y: float = 0.0
    cycle_x: float = 0.0
    cycle_y: float = 0.0
    recon_x: float = 0.0
    recon_y: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def check_finite(parts: dict, iteration=None) -> None:
    for name, v in parts.items():
        v = v.detach() if torch.is_tensor(v) else v
        if not math.isfinite(float(v)):
            raise NonFiniteLossError(name, iteration)


def compose_objectives(parts, cfg, iteration=None):
    """``(total_d, total_g)`` from the eight loss terms and the config weights.

    ``parts`` may be a :class:`LossBundle` or a mapping; any non-finite term
    raises :class:`NonFiniteLossError` naming it.
    """
    if isinstance(parts, LossBundle):
        parts = parts.to_dict()
    terms = {k: parts[k] for k in LOSS_KEYS[:8] if k in parts}
    check_finite(terms, iteration)
    get = lambda k: terms.get(k, 0.0)
    total_d = cfg.lambda_gan * (get("d_adv_x") + get("d_adv_y"))
    total_g = (cfg.lambda_gan * (get("g_adv_x") + get("g_adv_y"))
               + cfg.lambda_cycle * (get("cycle_x") + get("cycle_y"))
               + cfg.lambda_recon * (get("recon_x") + get("recon_y")))
    return total_d, total_g
