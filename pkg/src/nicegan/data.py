"""Unpaired two-domain datasets, augmentation and a synthetic hue-swap corpus.

Images travel as float32 ``(H, W, 3)`` arrays in ``[-1, 1]``; batches are
stacked to ``(B, H, W, 3)``. Conversion to channels-first tensors happens at
the model boundary (:func:`to_tensor`).
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DatasetError(RuntimeError):
    pass


class DatasetEmptyError(DatasetError):
    pass


class ImageSizeError(ValueError):
    pass


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, C) or (H, W, C) array -> (B, C, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    """(B, C, H, W) tensor -> (B, H, W, C) float32 array."""
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return to_unit_range(pixels)


def save_image(image: np.ndarray, path: str) -> None:
    Image.fromarray(to_uint8(image)).save(path)


class FolderDataset:
    """Lazily decoded images from one directory, in lexicographic order."""

    def __init__(self, directory: str):
        if not os.path.isdir(directory):
            raise DatasetError(f"missing dataset directory: {directory}")
        names = sorted(n for n in os.listdir(directory)
                       if n.lower().endswith(IMAGE_EXTENSIONS))
        if not names:
            raise DatasetEmptyError(f"dataset directory has no PNG/JPEG images: {directory}")
        self.directory = directory
        self.paths = [os.path.join(directory, n) for n in names]

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> np.ndarray:
        return load_image(self.paths[i])

    def source_path(self, i: int) -> Optional[str]:
        return self.paths[i]


class ArrayDataset:
    """In-memory images, stored as uint8 to keep the footprint small."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 4 or pixels.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) pixels, got {pixels.shape}")
        if len(pixels) == 0:
            raise DatasetEmptyError("array dataset is empty")
        self.pixels = pixels.astype(np.uint8)

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> np.ndarray:
        return to_unit_range(self.pixels[i])

    def source_path(self, i: int) -> Optional[str]:
        return None

    def stack(self) -> np.ndarray:
        return to_unit_range(self.pixels)


def open_unpaired_dataset(root: str, split: str = "train"):
    """Open ``root/{split}A`` and ``root/{split}B`` as (X, Y) datasets."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not os.path.isdir(root):
        raise DatasetError(f"missing dataset root: {root}")
    return (FolderDataset(os.path.join(root, split + "A")),
            FolderDataset(os.path.join(root, split + "B")))


def resize_bilinear(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no antialiasing).

    ``size`` is a square edge or an ``(height, width)`` pair.
    """
    hw = (size, size) if isinstance(size, int) else tuple(size)
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float()
    out = F.interpolate(t, size=hw, mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def augment(image: np.ndarray, cfg, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, resize to ``cfg.resize_edge``, random crop.

    Draw order from ``rng``: flip coin, crop row, crop column.
    """
    size, edge = cfg.image_size, cfg.resize_edge
    if edge < size:
        raise ImageSizeError(f"resize edge {edge} is smaller than crop size {size}")
    if rng.random() < cfg.hflip_prob:
        image = image[:, ::-1]
    image = resize_bilinear(image, edge)
    top = int(rng.integers(0, edge - size + 1))
    left = int(rng.integers(0, edge - size + 1))
    out = image[top:top + size, left:left + size]
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def prepare_eval(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic test-time preprocessing: plain resize to ``size``."""
    if image.shape[0] == size and image.shape[1] == size:
        return image.astype(np.float32)
    return np.clip(resize_bilinear(image, size), -1.0, 1.0).astype(np.float32)


@dataclass
class UnpairedBatch:
    x: np.ndarray
    y: np.ndarray


class _EpochSampler:
    """Walks a fresh permutation of ``range(n)`` per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> int:
        if self.pos == self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i

    def state_dict(self) -> dict:
        return {"order": self.order.tolist(), "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])


class BatchIterator:
    """Endless stream of :class:`UnpairedBatch`.

    Each domain is drawn from its own epoch shuffle, so no pairing between
    X and Y indices is ever implied. The whole stream is a function of the
    generator's state, which :meth:`state_dict` captures for resuming.
    """

    def __init__(self, dx, dy, cfg, rng: np.random.Generator):
        if len(dx) == 0 or len(dy) == 0:
            raise DatasetEmptyError("both domains must be non-empty")
        self.dx, self.dy, self.cfg, self.rng = dx, dy, cfg, rng
        self.sx = _EpochSampler(len(dx), rng)
        self.sy = _EpochSampler(len(dy), rng)
        self.last_indices = ([], [])

    def __iter__(self) -> Iterator[UnpairedBatch]:
        return self

    def __next__(self) -> UnpairedBatch:
        xs, ys, ix, iy = [], [], [], []
        for _ in range(self.cfg.batch_size):
            i = self.sx.next()
            ix.append(i)
            xs.append(augment(self.dx[i], self.cfg, self.rng))
        for _ in range(self.cfg.batch_size):
            j = self.sy.next()
            iy.append(j)
            ys.append(augment(self.dy[j], self.cfg, self.rng))
        self.last_indices = (ix, iy)
        return UnpairedBatch(np.stack(xs), np.stack(ys))

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state,
                "x": self.sx.state_dict(), "y": self.sy.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.sx.load_state_dict(state["x"])
        self.sy.load_state_dict(state["y"])


def batch_iterator(dx, dy, cfg, rng: np.random.Generator) -> BatchIterator:
    return BatchIterator(dx, dy, cfg, rng)


# -- synthetic corpus --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 100
    size: int = 64
    hue_x: float = 0.0
    hue_y: float = 0.6


def _hue_rgb(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val), dtype=np.float64)


def _render(rng: np.random.Generator, size: int, hue: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    # grey textured background: smooth gradient + stripes + grain
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(2, 6)
    base = rng.uniform(0.3, 0.6)
    bg = base + 0.08 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    bg = bg + 0.1 * (xx - 0.5) * rng.uniform(-1, 1)
    img = np.repeat(bg[..., None], 3, axis=2)
    img += rng.normal(0, 0.03, size=img.shape)

    for _ in range(int(rng.integers(1, 4))):
        color = _hue_rgb(hue + rng.normal(0, 0.02), rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0))
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.1, 0.25)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
        else:
            w, h = rng.uniform(0.1, 0.3, size=2)
            mask = (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= h)
        shade = 1.0 + 0.1 * (yy - cy)
        img[mask] = color * shade[mask][:, None]
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_synthetic_domains(spec: SyntheticSpec, seed: int):
    """Two domains of shapes on grey texture, tinted ``hue_x`` / ``hue_y``.

    Both domains use the same shape distribution; only the tint differs.
    Output is byte-identical for a given ``(spec, seed)``.
    """
    if spec.n < 1:
        raise ValueError(f"synthetic domains need n >= 1 (got {spec.n})")
    if spec.size < 16:
        raise ValueError(f"synthetic domains need size >= 16 (got {spec.size})")
    rx = np.random.default_rng([seed, 0])
    ry = np.random.default_rng([seed, 1])
    px = np.stack([_render(rx, spec.size, spec.hue_x) for _ in range(spec.n)])
    py = np.stack([_render(ry, spec.size, spec.hue_y) for _ in range(spec.n)])
    return ArrayDataset(px), ArrayDataset(py)


def write_dataset(root: str, split: str, dx, dy) -> None:
    """Write two datasets as PNGs in the ``{split}A`` / ``{split}B`` layout."""
    for suffix, ds in (("A", dx), ("B", dy)):
        d = os.path.join(root, split + suffix)
        os.makedirs(d, exist_ok=True)
        width = max(4, len(str(len(ds))))
        for i in range(len(ds)):
            save_image(ds[i], os.path.join(d, f"{i:0{width}d}.png"))


def synthetic_for_config(cfg, split: str = "train"):
    n = cfg.synthetic_n if split == "train" else cfg.synthetic_n_test
    seed = cfg.seed if split == "train" else cfg.seed + 10_007
    spec = SyntheticSpec(n=n, size=cfg.image_size,
                         hue_x=cfg.synthetic_hue_x, hue_y=cfg.synthetic_hue_y)
    return make_synthetic_domains(spec, seed)


def datasets_for_config(cfg, split: str = "train"):
    if cfg.dataset_root:
        return open_unpaired_dataset(cfg.dataset_root, split)
    return synthetic_for_config(cfg, split)


def stack_dataset(ds, size: int, limit: Optional[int] = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    return np.stack([prepare_eval(ds[i], size) for i in range(n)])
