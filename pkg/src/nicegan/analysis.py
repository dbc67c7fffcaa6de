"""Inference-time utilities: translation, cycles, latent interpolation and plots."""
from __future__ import annotations

import contextlib
import csv
import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import prepare_eval, to_numpy, to_tensor
from .losses import l1_loss
from .metrics import latent_vectors

OTHER = {"x": "y", "y": "x"}
DIRECTIONS = {"x2y": ("x", "y"), "y2x": ("y", "x")}


@contextlib.contextmanager
def evaluating(model):
    """Put every sub-network in eval mode (frozen spectral-norm vectors) and restore."""
    mods = list(model.modules().values())
    modes = [m.training for m in mods]
    for m in mods:
        m.eval()
    try:
        yield model
    finally:
        for m, mode in zip(mods, modes):
            m.train(mode)


@dataclass
class TranslationResult:
    translated: np.ndarray
    latent: np.ndarray
    cam_logit: Optional[np.ndarray] = None
    reconstructed: Optional[np.ndarray] = None
    cycle_l1: Optional[float] = None


def _as_batch(image, size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    batch = image[None] if image.ndim == 3 else image
    if batch.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {batch.shape[1:3]}")
    return batch


def _squeeze_like(out: np.ndarray, image) -> np.ndarray:
    return out[0] if np.asarray(image).ndim == 3 else out


def _direction(direction: str):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'x2y' or 'y2x', got {direction!r}")
    return DIRECTIONS[direction]


def translate(model, image, direction: str = "x2y") -> TranslationResult:
    """Encode with the source domain's encoder and decode with its generator.

    ``image`` is ``(H, W, 3)`` or ``(N, H, W, 3)`` in [-1, 1].
    """
    src, _ = _direction(direction)
    batch = _as_batch(image, model.cfg.image_size)
    with evaluating(model), torch.no_grad():
        latent, cam = model.encode(to_tensor(batch), src)
        out = model.generator(src)(latent)
    return TranslationResult(
        translated=_squeeze_like(to_numpy(out), image),
        latent=_squeeze_like(latent.numpy(), image),
        cam_logit=None if cam is None else _squeeze_like(cam.numpy(), image))


def cycle(model, image, direction: str = "x2y") -> TranslationResult:
    src, dst = _direction(direction)
    batch = _as_batch(image, model.cfg.image_size)
    result = translate(model, batch, direction)
    with evaluating(model), torch.no_grad():
        latent = model.encode(to_tensor(result.translated), dst)[0]
        rec = to_numpy(model.generator(dst)(latent))
    result.reconstructed = rec
    result.cycle_l1 = float(l1_loss(torch.from_numpy(batch), torch.from_numpy(rec)))
    if np.asarray(image).ndim == 3:
        result.translated = result.translated[0]
        result.latent = result.latent[0]
        result.reconstructed = rec[0]
    return result


def interpolate(model, image_x, image_y, ts: Sequence[float]):
    """Decode linear blends of the two domains' latent codes.

    Returns a list of ``(t, generated_x, generated_y)``: the mixed code
    ``(1 - t) * E_x(image_x) + t * E_y(image_y)`` decoded by the y->x and
    x->y generators respectively.
    """
    ts = [float(t) for t in ts]
    bad = [t for t in ts if not 0.0 <= t <= 1.0]
    if bad:
        raise ValueError(f"interpolation weights must lie in [0, 1], got {bad}")
    bx = _as_batch(image_x, model.cfg.image_size)
    by = _as_batch(image_y, model.cfg.image_size)
    grid = []
    with evaluating(model), torch.no_grad():
        zx = model.encode(to_tensor(bx), "x")[0]
        zy = model.encode(to_tensor(by), "y")[0]
        for t in ts:
            if t == 0.0:
                z = zx
            elif t == 1.0:
                z = zy
            else:
                z = (1 - t) * zx + t * zy
            gx = to_numpy(model.gen_yx(z))
            gy = to_numpy(model.gen_xy(z))
            grid.append((t, _squeeze_like(gx, image_x), _squeeze_like(gy, image_x)))
    return grid


def latent_heatmap(latent) -> np.ndarray:
    """Channel-mean |activation| scaled to [0, 1]; constant maps become zeros.

    Accepts ``(C, h, w)`` or ``(N, C, h, w)``.
    """
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim == 3:
        return _heat(z)
    return np.stack([_heat(zi) for zi in z])


def _heat(z):
    m = np.abs(z).mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def export_latents(model, datasets, out_path: str, domain: str = "x") -> str:
    """CSV of pooled latent vectors, one row per image, with a ``domain`` column.

    ``datasets`` is a single dataset (labelled ``domain``) or a mapping
    ``{"x": ds_x, "y": ds_y}``.
    """
    if not isinstance(datasets, dict):
        datasets = {domain: datasets}
    size = model.cfg.image_size
    rows = []
    for label, ds in datasets.items():
        if len(ds) == 0:
            raise ValueError(f"dataset for domain {label} is empty")
        images = np.stack([prepare_eval(ds[i], size) for i in range(len(ds))])
        for vec in latent_vectors(model, images, label):
            rows.append([repr(float(v)) for v in vec] + [label])
    dim = len(rows[0]) - 1
    try:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(dim)] + ["domain"])
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write latent export {out_path}: {exc}") from exc
    return out_path


def read_latents(path: str) -> dict:
    """Inverse of :func:`export_latents`: ``{label: (n, dim) array}``."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            groups.setdefault(row[-1], []).append([float(v) for v in row[:-1]])
    return {k: np.asarray(v) for k, v in groups.items()}


class LogFormatError(ValueError):
    pass


def read_log(path: str) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"{path}:{lineno}: malformed log line ({exc.msg})") from exc
            if not isinstance(rec, dict) or "iter" not in rec:
                raise LogFormatError(f"{path}:{lineno}: record lacks an 'iter' field")
            records.append(rec)
    return records


def _loss_keys(records):
    keys = []
    for r in records:
        for k, v in r.items():
            if k not in ("iter", "wall_time_s") and isinstance(v, (int, float)) and k not in keys:
                keys.append(k)
    return keys


def plot_curves(log_paths, out_dir: str, labels: Optional[Sequence[str]] = None) -> list:
    """PNG loss curves: one per key for a single log, overlays for several.

    Returns the written file paths; an empty log yields no files and a
    printed notice.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(log_paths, (str, os.PathLike)):
        log_paths = [log_paths]
    labels = list(labels) if labels else [os.path.basename(os.path.dirname(os.path.abspath(p))) or p
                                          for p in log_paths]
    runs = [(lab, read_log(p)) for lab, p in zip(labels, log_paths)]
    runs = [(lab, recs) for lab, recs in runs if recs]
    if not runs:
        print("plot_curves: no log records found; nothing plotted")
        return []
    os.makedirs(out_dir, exist_ok=True)
    key_sets = [_loss_keys(recs) for _, recs in runs]
    keys = [k for k in key_sets[0] if all(k in ks for ks in key_sets)]
    prefix = "overlay_" if len(runs) > 1 else "curve_"
    written = []
    for key in keys:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for lab, recs in runs:
            pts = [(r["iter"], r[key]) for r in recs if key in r]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=lab, linewidth=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
        if len(runs) > 1:
            ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}{key}.png")
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written


def image_grid(rows, pad: int = 2) -> np.ndarray:
    """Tile a list of rows of (H, W, 3) images into one image."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    grid = np.ones(((h + pad) * len(rows) - pad, (w + pad) * ncol - pad, 3), dtype=np.float32)
    for i, r in enumerate(rows):
        for j, im in enumerate(r):
            grid[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = im
    return grid


def translate_all(model, images: np.ndarray, direction: str, batch_size: int = 16) -> np.ndarray:
    return np.concatenate([translate(model, images[i:i + batch_size], direction).translated
                           for i in range(0, len(images), batch_size)])


def mean_cycle_l1(model, images: np.ndarray, direction: str, batch_size: int = 16) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        total += cycle(model, chunk, direction).cycle_l1 * len(chunk)
    return total / len(images)


def evaluate_model(model, ds_x, ds_y, metrics=("kid", "fid"), extractor=None,
                   iteration: Optional[int] = None, kernel: str = "polynomial") -> list:
    """Metric reports for both translation directions on the given datasets.

    ``kid``/``fid`` compare translated source images with real target
    images; ``cycle`` is the mean cycle L1; ``mmd`` the latent domain MMD.
    """
    from .metrics import (MetricReport, extract_features, fid, get_extractor, kid,
                          latent_domain_mmd)

    cfg = model.cfg
    it = model.iteration if iteration is None else iteration
    if extractor is None:
        extractor = get_extractor(cfg.extractor, command=cfg.extractor_command)
    size = cfg.image_size
    images = {"x": np.stack([prepare_eval(ds_x[i], size) for i in range(len(ds_x))]),
              "y": np.stack([prepare_eval(ds_y[i], size) for i in range(len(ds_y))])}
    reports = []
    for direction, (src, dst) in DIRECTIONS.items():
        if "kid" in metrics or "fid" in metrics:
            fake = translate_all(model, images[src], direction)
            f_fake = extract_features(extractor, fake)
            f_real = extract_features(extractor, images[dst])
            if "kid" in metrics:
                mean, std = kid(f_real, f_fake, cfg.kid_subset_size, cfg.kid_n_subsets,
                                np.random.default_rng(cfg.seed))
                reports.append(MetricReport("kid", mean, std, it, extractor.id, {"direction": direction}))
            if "fid" in metrics:
                reports.append(MetricReport("fid", fid(f_real, f_fake), None, it, extractor.id,
                                            {"direction": direction}))
        if "cycle" in metrics:
            reports.append(MetricReport("cycle_l1", mean_cycle_l1(model, images[src], direction),
                                        None, it, "", {"direction": direction}))
    if "mmd" in metrics:
        reports.append(MetricReport("latent_mmd", latent_domain_mmd(model, images["x"], images["y"], kernel),
                                    None, it, "", {"kernel": kernel}))
    return reports
