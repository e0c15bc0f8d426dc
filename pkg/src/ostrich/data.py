"""Image/mask I/O, patching, splits, the latent prior, and a synthetic H&E generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .autodiff import RngState
from .errors import DataError, IoError, SizeError
from .stain import RUIFROK_HED, StainMatrix, hed_to_rgb


@dataclass
class Item:
    stem: str
    image: np.ndarray  # [3,H,W] in [0,1]
    mask: np.ndarray | None = None  # [H,W] bool


@dataclass
class Dataset:
    items: list[Item]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)

    def __post_init__(self):
        shapes = {it.image.shape for it in self.items}
        if len(shapes) > 1:
            raise SizeError(f"images in one split must share a shape, got {sorted(shapes)}")

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def masks(self) -> np.ndarray:
        if any(it.mask is None for it in self.items):
            raise DataError(f"{self.split} split has items without masks")
        return np.stack([it.mask for it in self.items])


# ------------------------------------------------------------------- I/O


def _check_even(h: int, w: int, path) -> None:
    if h % 2 or w % 2:
        raise SizeError(f"{path}: odd dimensions {h}x{w}; the flow needs even H and W")


def load_image(path) -> np.ndarray:
    """8-bit RGB file -> float [3,H,W] scaled by 1/255."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise IoError(f"{path}: unsupported mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"cannot read image {path}: {exc}") from exc
    _check_even(arr.shape[0], arr.shape[1], path)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    """8-bit grayscale file -> bool [H,W], thresholded at 128."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read mask {path}: {exc}") from exc
    _check_even(arr.shape[0], arr.shape[1], path)
    return arr >= 128


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    """float [3,H,W] in [0,1] -> 8-bit RGB PNG."""
    Image.fromarray(to_uint8(np.asarray(img).transpose(1, 2, 0)), mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------- patching


def _starts(n: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def extract_patches(img: np.ndarray, size: int, stride: int | None = None) -> list[np.ndarray]:
    """Raster-order tiles of [C,H,W] (or [H,W]); remainders are anchored to the far edge."""
    stride = size if stride is None else stride
    h, w = img.shape[-2:]
    if size > h or size > w:
        raise SizeError(f"patch size {size} exceeds image {h}x{w}")
    if stride < 1:
        raise SizeError("stride must be positive")
    return [img[..., r:r + size, c:c + size] for r in _starts(h, size, stride) for c in _starts(w, size, stride)]


# ----------------------------------------------------------------- splits


def split_dataset(items: list, ratio=(5, 1, 4), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle then proportional split (largest-remainder rounding)."""
    if not items:
        raise DataError("cannot split an empty dataset")
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or (ratio <= 0).any():
        raise DataError("ratio must be three positive numbers")
    n = len(items)
    exact = ratio / ratio.sum() * n
    counts = np.floor(exact).astype(int)
    for k in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def write_manifest(path, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(["stem", "split"])
        wr.writerows(rows)


def read_manifest(path) -> list[tuple[str, str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0] != ["stem", "split"]:
        raise DataError(f"{path}: missing 'stem\\tsplit' header")
    return [(r[0], r[1]) for r in rows[1:] if r]


def load_split(root, split: str) -> Dataset:
    """Load images/<stem>.png and masks/<stem>.png listed under ``split`` in manifest.tsv."""
    root = Path(root)
    stems = [s for s, tag in read_manifest(root / "manifest.tsv") if tag == split]
    if not stems:
        raise DataError(f"no '{split}' items in {root / 'manifest.tsv'}")
    items = []
    for stem in stems:
        mpath = root / "masks" / f"{stem}.png"
        mask = load_mask(mpath) if mpath.exists() else None
        items.append(Item(stem, load_image(root / "images" / f"{stem}.png"), mask))
    return Dataset(items, split)


def save_dataset(root, datasets: dict[str, Dataset]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, ds in datasets.items():
        for it in ds.items:
            save_image(root / "images" / f"{it.stem}.png", it.image)
            if it.mask is not None:
                save_mask(root / "masks" / f"{it.stem}.png", it.mask)
            rows.append((it.stem, split))
    write_manifest(root / "manifest.tsv", rows)


# ------------------------------------------------------------------ prior


@dataclass
class PriorSampler:
    """i.i.d. standard-normal draws for the embedding prior."""

    rng: RngState
    shape: tuple[int, int, int, int]

    def sample(self, n: int | None = None) -> np.ndarray:
        shape = self.shape if n is None else (n,) + tuple(self.shape[1:])
        return self.rng.normal(shape)


def sample_prior(sampler: PriorSampler) -> np.ndarray:
    return sampler.sample()


# ---------------------------------------------------------- synthetic H&E


@dataclass
class SynthConfig:
    nuclei: tuple[int, int] = (3, 12)
    radius: tuple[float, float] = (3.0, 7.0)  # semi-axes at 64x64, scaled with patch size
    gap: float = 2.0
    mask_fraction: tuple[float, float] = (0.05, 0.4)
    hema_nucleus: float = 0.75
    hema_background: float = 0.04
    eosin_nucleus: float = 0.12
    eosin_background: float = 0.3
    texture: float = 0.08
    blur_sigma: float = 0.6
    noise: float = 0.01
    stains: StainMatrix = field(default=RUIFROK_HED)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _layout(rng: np.random.Generator, h: int, w: int, cfg: SynthConfig):
    scale = min(h, w) / 64.0
    rr, cc = np.mgrid[0:h, 0:w]
    k = int(rng.integers(cfg.nuclei[0], cfg.nuclei[1] + 1))
    mask = np.zeros((h, w), dtype=bool)
    grown = np.zeros((h, w), dtype=bool)
    placed = 0
    for _ in range(50 * k):
        if placed == k:
            break
        a = rng.uniform(*cfg.radius) * scale
        b = rng.uniform(*cfg.radius) * scale
        theta = rng.uniform(0, math.pi)
        r0 = rng.uniform(0, h)
        c0 = rng.uniform(0, w)
        ct, st = math.cos(theta), math.sin(theta)
        dr, dc = rr - r0, cc - c0
        u = (dr * ct + dc * st) / a
        v = (-dr * st + dc * ct) / b
        ell = u * u + v * v <= 1.0
        if not ell.any() or (ell & grown).any():
            continue
        mask |= ell
        halo = ((np.abs(dr * ct + dc * st) / (a + cfg.gap)) ** 2 + (np.abs(-dr * st + dc * ct) / (b + cfg.gap)) ** 2) <= 1.0
        grown |= halo
        placed += 1
    return mask, placed


def synth_sample(rng: np.random.Generator, h: int, w: int, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = cfg.mask_fraction
    for _ in range(200):
        mask, placed = _layout(rng, h, w, cfg)
        if placed >= cfg.nuclei[0] and lo <= mask.mean() <= hi:
            break
    else:  # pragma: no cover - the default config always succeeds quickly
        raise DataError("could not place nuclei within the mask-fraction bounds")
    scale = min(h, w) / 64.0
    tex_bg = _smooth_noise(rng, h, w, 3.0 * scale)
    tex_nuc = _smooth_noise(rng, h, w, 1.0 * scale)
    m = mask.astype(np.float64)
    hema = np.where(mask, cfg.hema_nucleus * (1 + cfg.texture * tex_nuc), cfg.hema_background * (1 + 0.5 * tex_bg))
    eosin = np.where(mask, cfg.eosin_nucleus, cfg.eosin_background) * (1 + cfg.texture * tex_bg)
    conc = np.stack([np.maximum(hema, 0.0), np.maximum(eosin, 0.0), np.zeros_like(m)])
    rgb = hed_to_rgb(conc, cfg.stains)
    if cfg.blur_sigma > 0:
        rgb = np.stack([ndimage.gaussian_filter(ch, cfg.blur_sigma, mode="reflect") for ch in rgb])
    rgb = rgb + cfg.noise * rng.standard_normal(rgb.shape)
    return np.clip(rgb, 0.0, 1.0), mask


def synth_histology(n: int, h: int = 64, w: int = 64, seed: int = 0, cfg: SynthConfig | None = None, split: str = "train", prefix: str = "synth") -> Dataset:
    """Deterministic synthetic H&E-like patches with exact nucleus masks."""
    if h < 32 or w < 32 or h % 2 or w % 2:
        raise SizeError("synthetic patches need even H, W >= 32")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        img, mask = synth_sample(rng, h, w, cfg)
        items.append(Item(f"{prefix}_{i:05d}", img, mask))
    return Dataset(items, split)


def synth_splits(n_train: int, n_val: int, n_test: int, h: int = 64, w: int = 64, seed: int = 42, cfg: SynthConfig | None = None) -> dict[str, Dataset]:
    """One seeded stream, cut into train/val/test in that order."""
    full = synth_histology(n_train + n_val + n_test, h, w, seed, cfg)
    its = full.items
    return {
        "train": Dataset(its[:n_train], "train"),
        "val": Dataset(its[n_train:n_train + n_val], "val"),
        "test": Dataset(its[n_train + n_val:], "test"),
    }
