"""KID, FID and latent-space MMD over pluggable feature extractors.

Feature matrices are ``(n_samples, dim)`` float64 arrays. Images handed to
extractors are ``(N, H, W, 3)`` arrays in ``[-1, 1]``.
"""
from __future__ import annotations

import json
import os
import shlex
import shutil
import subprocess
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import prepare_eval, to_tensor


class CapabilityError(RuntimeError):
    """A requested feature extractor is not available."""


class FIDNumericError(ArithmeticError):
    pass


def _as_features(a, name="features") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (samples, dim) matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _check_pair(x, y, min_rows=2):
    x, y = _as_features(x, "X"), _as_features(y, "Y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < min_rows or len(y) < min_rows:
        raise ValueError(f"need at least {min_rows} samples per set, got {len(x)} and {len(y)}")
    return x, y


# -- kernels ---------------------------------------------------------------------

def polynomial_kernel(x, y, degree: int = 3, coef0: float = 1.0, dim: Optional[int] = None):
    """``(x.y / d + coef0) ** degree`` with ``d`` the feature dimension."""
    d = x.shape[1] if dim is None else dim
    return (x @ y.T / d + coef0) ** degree


def gaussian_kernel(x, y, sigma: Optional[float] = None):
    """RBF kernel; ``sigma`` defaults to the median pairwise distance of the pooled sets."""
    sq = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2 * x @ y.T
    sq = np.maximum(sq, 0.0)
    if sigma is None:
        z = np.concatenate([x, y])
        dz = np.sqrt(np.maximum((z * z).sum(1)[:, None] + (z * z).sum(1)[None] - 2 * z @ z.T, 0))
        off = dz[~np.eye(len(z), dtype=bool)]
        sigma = float(np.median(off)) or 1.0
    return np.exp(-sq / (2 * sigma ** 2))


KERNELS = {"polynomial": polynomial_kernel, "gaussian": gaussian_kernel}


def mmd2_unbiased(x, y, kernel: Callable = polynomial_kernel) -> float:
    """Unbiased squared MMD; diagonal terms are dropped from the within-set sums."""
    if isinstance(kernel, str):
        kernel = KERNELS[kernel]
    x, y = _check_pair(x, y)
    m, n = len(x), len(y)
    kxx, kyy, kxy = kernel(x, x), kernel(y, y), kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid(feat_real, feat_gen, subset_size: int = 1000, n_subsets: int = 1, rng=None):
    """Kernel Inception Distance: mean and std of MMD^2 over random subset pairs.

    When ``n_subsets == 1`` and the subset covers both sets, the full-set
    estimate is returned unchanged.
    """
    x, y = _check_pair(feat_real, feat_gen)
    if n_subsets == 1 and subset_size >= max(len(x), len(y)):
        return mmd2_unbiased(x, y), 0.0
    limit = min(len(x), len(y))
    if subset_size > limit:
        if n_subsets > 1:
            warnings.warn(f"KID subset size {subset_size} clamped to {limit}")
        subset_size = limit
    if subset_size < 2:
        raise ValueError("KID subsets need at least 2 samples")
    rng = np.random.default_rng(0) if rng is None else rng
    vals = []
    for _ in range(n_subsets):
        ix = rng.choice(len(x), subset_size, replace=False)
        iy = rng.choice(len(y), subset_size, replace=False)
        vals.append(mmd2_unbiased(x[ix], y[iy]))
    return float(np.mean(vals)), float(np.std(vals))


# -- FID ------------------------------------------------------------------------

def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((s1 s2)^{1/2}) through the symmetric form s1^{1/2} s2 s1^{1/2}."""
    r = _sqrtm_psd(s1)
    m = r @ s2 @ r
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -1e-6 * scale or not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("product of covariances is not positive semi-definite")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2, jitter: float = 1e-6) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1 = np.atleast_2d(sigma1).astype(np.float64)
    s2 = np.atleast_2d(sigma2).astype(np.float64)
    diff = mu1 - mu2
    try:
        tr = _trace_sqrt_product(s1, s2)
    except np.linalg.LinAlgError:
        eye = np.eye(len(s1)) * jitter
        try:
            tr = _trace_sqrt_product(s1 + eye, s2 + eye)
        except np.linalg.LinAlgError as exc:
            raise FIDNumericError(f"covariance square root failed after jitter {jitter}: {exc}") from exc
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr)


def feature_moments(feats):
    f = _as_features(feats)
    return f.mean(0), np.atleast_2d(np.cov(f, rowvar=False, ddof=1))


def fid(feat_real, feat_gen, jitter: float = 1e-6) -> float:
    x, y = _check_pair(feat_real, feat_gen)
    return frechet_distance(*feature_moments(x), *feature_moments(y), jitter=jitter)


# -- extractors -------------------------------------------------------------------

class IdentityExtractor:
    id = "identity"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(len(images), -1)


class RandomConvExtractor:
    """Fixed random 4-layer strided conv stack + global average pooling.

    A cheap, deterministic stand-in for Inception features; numbers computed
    with it are not comparable to published Inception-based scores.
    """

    def __init__(self, seed: int = 0, dim: int = 256, batch_size: int = 64):
        self.seed = seed
        self.batch_size = batch_size
        self.id = f"random_conv(seed={seed},dim={dim})"
        g = torch.Generator().manual_seed(seed)
        widths = [3, dim // 8, dim // 4, dim // 2, dim]
        self.weights, self.biases = [], []
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = torch.randn(cout, cin, 4, 4, generator=g, dtype=torch.float64)
            self.weights.append(w * np.sqrt(2.0 / (cin * 16)))
            self.biases.append(torch.randn(cout, generator=g, dtype=torch.float64) * 0.1)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(images), self.batch_size):
                h = to_tensor(images[i:i + self.batch_size]).double()
                for w, b in zip(self.weights, self.biases):
                    h = F.leaky_relu(F.conv2d(h, w, b, stride=2, padding=1), 0.2)
                out.append(h.mean(dim=(2, 3)).numpy())
        return np.concatenate(out).astype(np.float64)


def write_feature_file(path: str, matrix: np.ndarray) -> None:
    """Raw little-endian float32 rows plus a ``path + '.json'`` sidecar {rows, dim}."""
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4").reshape(len(matrix), -1))
    m.tofile(path)
    with open(path + ".json", "w") as fh:
        json.dump({"rows": int(m.shape[0]), "dim": int(m.shape[1])}, fh)


def read_feature_file(path: str) -> np.ndarray:
    with open(path + ".json") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4")
    rows, dim = int(meta["rows"]), int(meta["dim"])
    if data.size != rows * dim:
        raise ValueError(f"{path}: expected {rows}x{dim} floats, found {data.size}")
    return data.reshape(rows, dim).astype(np.float64)


class ExternalAdapter:
    """Delegates feature extraction to an external command.

    The command is called as ``COMMAND IMAGES_FILE FEATURES_FILE``. The
    images file holds the flattened images as float32 in [-1, 1] with a JSON
    sidecar ``{rows, dim, shape}``; the command must write FEATURES_FILE in
    the same format (sidecar ``{rows, dim}``).
    """

    def __init__(self, command: Optional[str] = None):
        self.command = command
        self.id = f"external({command})"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        if not self.command:
            raise CapabilityError("external_adapter extractor selected but no extractor_command configured")
        argv = shlex.split(self.command)
        if shutil.which(argv[0]) is None and not os.path.exists(argv[0]):
            raise CapabilityError(f"external feature extractor not found: {argv[0]}")
        images = np.asarray(images, dtype=np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            img_path = os.path.join(tmp, "images.f32")
            feat_path = os.path.join(tmp, "features.f32")
            write_feature_file(img_path, images.reshape(len(images), -1))
            with open(img_path + ".json", "w") as fh:
                json.dump({"rows": len(images), "dim": int(np.prod(images.shape[1:])),
                           "shape": list(images.shape)}, fh)
            proc = subprocess.run(argv + [img_path, feat_path], capture_output=True, text=True)
            if proc.returncode != 0:
                raise CapabilityError(f"external extractor failed ({proc.returncode}): {proc.stderr.strip()}")
            if not os.path.exists(feat_path):
                raise CapabilityError(f"external extractor wrote no features to {feat_path}")
            return read_feature_file(feat_path)


def get_extractor(name: str, seed: int = 0, command: Optional[str] = None):
    if name == "identity":
        return IdentityExtractor()
    if name == "random_conv":
        return RandomConvExtractor(seed=seed)
    if name == "external_adapter":
        return ExternalAdapter(command)
    raise ValueError(f"unknown extractor {name!r}")


def extract_features(extractor, images) -> np.ndarray:
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    feats = extractor(np.asarray(images, dtype=np.float32))
    return _as_features(feats)


# -- latent-space MMD --------------------------------------------------------------

def latent_vectors(model, images: np.ndarray, domain: str, batch_size: int = 32) -> np.ndarray:
    """Globally average-pooled latent codes of ``images`` under the domain's encoder."""
    from .analysis import evaluating

    out = []
    with evaluating(model), torch.no_grad():
        for i in range(0, len(images), batch_size):
            lat = model.encode(to_tensor(images[i:i + batch_size]), domain)[0]
            out.append(lat.mean(dim=(2, 3)).double().numpy())
    return np.concatenate(out)


def _images_of(ds, size):
    if isinstance(ds, np.ndarray):
        return ds
    return np.stack([prepare_eval(ds[i], size) for i in range(len(ds))])


def latent_domain_mmd(model, ds_x, ds_y, kernel="polynomial") -> float:
    size = model.cfg.image_size
    zx = latent_vectors(model, _images_of(ds_x, size), "x")
    zy = latent_vectors(model, _images_of(ds_y, size), "y")
    return mmd2_unbiased(zx, zy, kernel)


# -- reports -----------------------------------------------------------------------

@dataclass
class MetricReport:
    name: str
    value: float
    std: Optional[float] = None
    iter: int = 0
    extractor_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


def append_reports(path: str, reports) -> None:
    with open(path, "a") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict()) + "\n")
