"""Decoupled adversarial training loop, parameter routing and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import os
import time
import warnings
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import networks as nets
from .config import ExperimentConfig, parse_dict
from .data import BatchIterator, UnpairedBatch, datasets_for_config, to_tensor
from .losses import LossBundle, compose_objectives, l1_loss, lsgan_d, lsgan_g

FORMAT_VERSION = 1
GROUPS = ("E_x", "C_x", "E_y", "C_y", "G_xy", "G_yx", "A_x", "A_y")

_ROUTING = {
    ("NICE", "D"): {"E_x", "C_x", "E_y", "C_y"},
    ("NICE", "G"): {"G_xy", "G_yx"},
    ("JOINT", "D"): {"E_x", "C_x", "E_y", "C_y"},
    ("JOINT", "G"): {"E_x", "E_y", "G_xy", "G_yx"},
    ("GEN_COUPLED", "D"): {"C_x", "C_y"},
    ("GEN_COUPLED", "G"): {"E_x", "E_y", "G_xy", "G_yx"},
}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TrainingIOError(OSError):
    pass


def parameter_routing(variant: str, step: str, nice: bool = True) -> frozenset:
    """Names of the parameter groups updated by the ``D`` or ``G`` step.

    ``E_*``/``C_*`` are the encoder and classifier halves of each
    discriminator, ``G_*`` the generators. With ``nice=False`` translation
    uses independent encoders ``A_*`` trained alongside the generators.
    """
    if step not in ("D", "G"):
        raise ValueError(f"step must be 'D' or 'G', got {step!r}")
    if not nice:
        return frozenset({"E_x", "C_x", "E_y", "C_y"} if step == "D" else {"A_x", "A_y", "G_xy", "G_yx"})
    try:
        return frozenset(_ROUTING[(variant, step)])
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}") from None


def _no_decay_ids(modules: Iterable[nn.Module]) -> set:
    ids = set()
    for root in modules:
        for m in root.modules():
            if isinstance(m, (nets.LayerInstanceNorm, nets.AdaptiveLayerInstanceNorm)):
                ids.update(id(p) for p in m.parameters(recurse=False))
            elif isinstance(m, nets.ResidualAttention):
                ids.add(id(m.gamma))
    return ids


class ModelState:
    """Both domains' discriminators and generators plus optimiser and data state."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.disc_x = nets.build_discriminator(cfg)
        self.disc_y = nets.build_discriminator(cfg)
        self.gen_xy = nets.build_generator(cfg)
        self.gen_yx = nets.build_generator(cfg)
        self.enc_x = nets.build_encoder(cfg) if not cfg.nice else None
        self.enc_y = nets.build_encoder(cfg) if not cfg.nice else None
        no_decay = _no_decay_ids(self.modules().values())
        params = [p for m in self.modules().values() for p in m.parameters()]
        self.optimizer = torch.optim.Adam(
            [{"params": [p for p in params if id(p) not in no_decay], "weight_decay": cfg.weight_decay},
             {"params": [p for p in params if id(p) in no_decay], "weight_decay": 0.0}],
            lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.iteration = 0
        self.batches: Optional[BatchIterator] = None

    def modules(self) -> dict:
        mods = {"disc_x": self.disc_x, "disc_y": self.disc_y,
                "gen_xy": self.gen_xy, "gen_yx": self.gen_yx}
        if self.enc_x is not None:
            mods["enc_x"] = self.enc_x
            mods["enc_y"] = self.enc_y
        return mods

    def groups(self) -> dict:
        g = {"E_x": self.disc_x.encoder_parameters(), "C_x": self.disc_x.classifier_parameters(),
             "E_y": self.disc_y.encoder_parameters(), "C_y": self.disc_y.classifier_parameters(),
             "G_xy": list(self.gen_xy.parameters()), "G_yx": list(self.gen_yx.parameters())}
        if self.enc_x is not None:
            g["A_x"] = list(self.enc_x.parameters())
            g["A_y"] = list(self.enc_y.parameters())
        return g

    def translation_encoder_group(self, domain: str) -> str:
        return ("E_" if self.cfg.nice else "A_") + domain

    def encode(self, images: torch.Tensor, domain: str):
        """Latent code used for translation out of ``domain``."""
        if self.cfg.nice:
            disc = self.disc_x if domain == "x" else self.disc_y
            return disc.encode(images)
        enc = self.enc_x if domain == "x" else self.enc_y
        return enc(images)

    def generator(self, src: str) -> nn.Module:
        return self.gen_xy if src == "x" else self.gen_yx

    def discriminator(self, domain: str) -> nn.Module:
        return self.disc_x if domain == "x" else self.disc_y

    def set_trainable(self, names) -> None:
        for name, params in self.groups().items():
            flag = name in names
            for p in params:
                p.requires_grad_(flag)

    def train(self, mode: bool = True) -> "ModelState":
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self) -> "ModelState":
        return self.train(False)

    def state_dict(self) -> dict:
        return {"modules": {k: m.state_dict() for k, m in self.modules().items()},
                "optimizer": self.optimizer.state_dict(),
                "iteration": self.iteration,
                "batches": None if self.batches is None else self.batches.state_dict(),
                "torch_rng": torch.get_rng_state()}

    def load_state_dict(self, state: dict) -> None:
        for k, m in self.modules().items():
            m.load_state_dict(state["modules"][k])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = int(state["iteration"])
        self._pending_batches = state.get("batches")
        if state.get("torch_rng") is not None:
            torch.set_rng_state(state["torch_rng"])

    def attach_data(self, dx, dy) -> BatchIterator:
        rng = np.random.default_rng(self.cfg.seed)
        self.batches = BatchIterator(dx, dy, self.cfg, rng)
        pending = getattr(self, "_pending_batches", None)
        if pending is not None:
            self.batches.load_state_dict(pending)
            self._pending_batches = None
        return self.batches


def init_state(cfg: ExperimentConfig) -> ModelState:
    return ModelState(cfg)


def _to_batch_tensors(batch):
    if isinstance(batch, UnpairedBatch):
        return to_tensor(batch.x), to_tensor(batch.y)
    x, y = batch
    return (x if torch.is_tensor(x) else to_tensor(x)), (y if torch.is_tensor(y) else to_tensor(y))


def discriminator_losses(state: ModelState, x, y) -> dict:
    """D-step terms; fakes are produced without building a generator graph."""
    with torch.no_grad():
        fake_y = state.gen_xy(state.encode(x, "x")[0])
        fake_x = state.gen_yx(state.encode(y, "y")[0])
    real_x_logits = state.disc_x(x)[0]
    fake_x_logits = state.disc_x(fake_x)[0]
    real_y_logits = state.disc_y(y)[0]
    fake_y_logits = state.disc_y(fake_y)[0]
    return {"d_adv_x": lsgan_d(real_x_logits, fake_x_logits),
            "d_adv_y": lsgan_d(real_y_logits, fake_y_logits)}


def generator_losses(state: ModelState, x, y, routed=None) -> dict:
    """G-step terms: adversarial, cycle and latent reconstruction, both directions.

    Encoder outputs are detached whenever the encoder group is not routed,
    so the generator objective has no path into encoder parameters.
    """
    routed = parameter_routing(state.cfg.variant, "G", state.cfg.nice) if routed is None else routed

    def encode(images, domain):
        latent = state.encode(images, domain)[0]
        if state.translation_encoder_group(domain) not in routed:
            latent = latent.detach()
        return latent

    lat_x, lat_y = encode(x, "x"), encode(y, "y")
    fake_y = state.gen_xy(lat_x)
    fake_x = state.gen_yx(lat_y)

    logits_fy, enc_fy, _ = state.disc_y(fake_y)
    logits_fx, enc_fx, _ = state.disc_x(fake_x)
    if not state.cfg.nice:
        enc_fy = state.enc_y(fake_y)[0]
        enc_fx = state.enc_x(fake_x)[0]
    x_cycle = state.gen_yx(enc_fy)
    y_cycle = state.gen_xy(enc_fx)
    return {"g_adv_x": lsgan_g(logits_fx), "g_adv_y": lsgan_g(logits_fy),
            "cycle_x": l1_loss(x, x_cycle), "cycle_y": l1_loss(y, y_cycle),
            "recon_x": l1_loss(x, state.gen_yx(lat_x)),
            "recon_y": l1_loss(y, state.gen_xy(lat_y))}


def train_step(state: ModelState, batch, cfg: Optional[ExperimentConfig] = None):
    """One D-step followed by one G-step; returns ``(state, LossBundle)``."""
    cfg = cfg or state.cfg
    x, y = _to_batch_tensors(batch)
    it = state.iteration + 1
    state.train()
    opt = state.optimizer

    d_routed = parameter_routing(cfg.variant, "D", cfg.nice)
    state.set_trainable(d_routed)
    d_parts = discriminator_losses(state, x, y)
    total_d, _ = compose_objectives(d_parts, cfg, iteration=it)
    opt.zero_grad(set_to_none=True)
    total_d.backward()
    opt.step()

    g_routed = parameter_routing(cfg.variant, "G", cfg.nice)
    state.set_trainable(g_routed)
    g_parts = generator_losses(state, x, y, g_routed)
    _, total_g = compose_objectives(g_parts, cfg, iteration=it)
    opt.zero_grad(set_to_none=True)
    total_g.backward()
    opt.step()
    opt.zero_grad(set_to_none=True)

    state.set_trainable(GROUPS)
    state.iteration = it
    values = {k: float(v.detach()) for k, v in {**d_parts, **g_parts}.items()}
    return state, LossBundle(**values, total_d=float(total_d.detach()), total_g=float(total_g.detach()))


# -- checkpoints ---------------------------------------------------------------

def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise TrainingIOError(f"cannot write {path}: {exc}") from exc


def save_checkpoint(state: ModelState, path: str) -> str:
    """Write ``path/model.pt`` and ``path/manifest.json``."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise TrainingIOError(f"cannot create checkpoint directory {path}: {exc}") from exc
    buf = io.BytesIO()
    torch.save(state.state_dict(), buf)
    blob = buf.getvalue()
    _atomic_write(os.path.join(path, "model.pt"), blob)
    rng = state.batches.state_dict()["rng"] if state.batches is not None else None
    manifest = {"format_version": FORMAT_VERSION,
                "iteration": state.iteration,
                "config_hash": state.cfg.hash(),
                "config": state.cfg.to_dict(),
                "rng_state": rng,
                "sha256": hashlib.sha256(blob).hexdigest()}
    _atomic_write(os.path.join(path, "manifest.json"),
                  json.dumps(manifest, indent=2, default=str).encode())
    return path


def read_manifest(path: str) -> dict:
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"corrupt manifest in {path}: {exc}") from exc


def load_checkpoint(path: str, cfg: Optional[ExperimentConfig] = None,
                    allow_config_mismatch: bool = False) -> ModelState:
    """Rebuild a :class:`ModelState` from :func:`save_checkpoint` output.

    Passing a ``cfg`` whose hash differs from the stored one warns and then
    raises unless ``allow_config_mismatch`` is set.
    """
    manifest = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, this build reads "
            f"version {FORMAT_VERSION}; migrate it before loading")
    blob_path = os.path.join(path, "model.pt")
    try:
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {blob_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointIntegrityError(f"checksum mismatch for {blob_path}")
    stored_cfg = parse_dict(manifest["config"])
    if cfg is None:
        cfg = stored_cfg
    elif cfg.hash() != manifest.get("config_hash"):
        msg = (f"config hash {cfg.hash()} differs from checkpoint hash "
               f"{manifest.get('config_hash')} ({path})")
        warnings.warn(msg)
        if not allow_config_mismatch:
            raise ConfigMismatchError(msg + "; pass allow_config_mismatch=True to override")
    state = ModelState(cfg)
    state.load_state_dict(torch.load(io.BytesIO(blob), weights_only=False))
    return state


# -- loop --------------------------------------------------------------------------

def _append_jsonl(path: str, record: dict) -> None:
    try:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    except OSError as exc:
        raise TrainingIOError(f"cannot append to {path}: {exc}") from exc


def train(cfg: ExperimentConfig, hooks=None, resume: Optional[str] = None,
          datasets=None, state: Optional[ModelState] = None):
    """Run ``cfg.iterations`` iterations (counting from any resumed state).

    ``hooks`` is a callable or list of callables ``hook(state, losses)`` run
    after every step. When ``cfg.out_dir`` is set the loss log goes to
    ``out_dir/log.jsonl`` and checkpoints to ``out_dir/checkpoints``.
    Returns ``(state, log)`` where ``log`` holds this call's records.
    """
    if callable(hooks):
        hooks = [hooks]
    hooks = list(hooks or [])
    if state is None:
        state = load_checkpoint(resume, cfg, allow_config_mismatch=False) if resume else init_state(cfg)
    if state.batches is None:
        dx, dy = datasets if datasets is not None else datasets_for_config(cfg, "train")
        state.attach_data(dx, dy)

    log_path = ckpt_dir = None
    if cfg.out_dir:
        try:
            os.makedirs(cfg.out_dir, exist_ok=True)
            with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
                fh.write(cfg.to_json())
        except OSError as exc:
            raise TrainingIOError(f"cannot write run directory {cfg.out_dir}: {exc}") from exc
        log_path = os.path.join(cfg.out_dir, "log.jsonl")
        ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
        if not resume and os.path.exists(log_path):
            os.remove(log_path)

    log = []
    start = time.perf_counter()
    while state.iteration < cfg.iterations:
        batch = next(state.batches)
        state, losses = train_step(state, batch, cfg)
        if cfg.log_every and state.iteration % cfg.log_every == 0:
            record = {"iter": state.iteration, **losses.to_dict(),
                      "wall_time_s": round(time.perf_counter() - start, 3)}
            log.append(record)
            if log_path:
                _append_jsonl(log_path, record)
        if ckpt_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(ckpt_dir, f"iter_{state.iteration:07d}"))
        for hook in hooks:
            hook(state, losses)
    if ckpt_dir:
        save_checkpoint(state, os.path.join(ckpt_dir, "latest"))
    return state, log
