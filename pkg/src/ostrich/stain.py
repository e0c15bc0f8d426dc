"""Stain deconvolution, Otsu thresholding, Voronoi labelling and SSIM.

Together these build the weak target used by the SSIM regulariser: the
hematoxylin concentration map is Otsu-thresholded, split into Voronoi cells
around seed points and binarised with the cell borders kept at zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _accel
from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateHistogramError, SeedError, SizeError

log = logging.getLogger(__name__)

OD_EPS = 1e-6

# Ruifrok & Johnston optical-density vectors (rows: hematoxylin, eosin, DAB).
_RUIFROK = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)


@dataclass(frozen=True)
class StainMatrix:
    """Unit-norm stain OD vectors as rows; ``od = conc @ M`` per pixel."""

    M: np.ndarray
    M_inv: np.ndarray

    @classmethod
    def from_vectors(cls, vectors) -> "StainMatrix":
        m = np.asarray(vectors, dtype=np.float64)
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ValueError("stain vectors are (nearly) linearly dependent")
        return cls(m, np.linalg.inv(m))


RUIFROK_HED = StainMatrix.from_vectors(_RUIFROK)


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    return -np.log10(np.maximum(img, OD_EPS))


def rgb_to_hed(img, stains: StainMatrix = RUIFROK_HED) -> np.ndarray:
    """[3,H,W] RGB in [0,1] -> [3,H,W] stain concentrations (channel 0 = hematoxylin)."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise SizeError(f"rgb_to_hed expects [3,H,W], got {arr.shape}")
    od = rgb_to_od(arr)
    conc = np.tensordot(stains.M_inv.T, od, axes=(1, 0))
    return conc


def hed_to_rgb(conc: np.ndarray, stains: StainMatrix = RUIFROK_HED) -> np.ndarray:
    """Beer-Lambert forward model: [3,H,W] concentrations -> RGB."""
    od = np.tensordot(stains.M.T, np.asarray(conc, dtype=np.float64), axes=(1, 0))
    return np.power(10.0, -od)


# -------------------------------------------------------------------- Otsu


def _quantize(channel: np.ndarray, bins: int = 256):
    lo, hi = float(channel.min()), float(channel.max())
    if not hi > lo:
        raise DegenerateHistogramError("constant channel has no Otsu threshold")
    idx = np.floor((channel - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    return idx, lo, hi


def otsu_threshold(channel, bins: int = 256) -> float:
    """Bin-centre threshold maximising the between-class variance.

    Bins split as ``<= k`` versus ``> k``; the comparison is done in exact
    integer arithmetic so ties always resolve to the lowest bin.
    """
    arr = np.asarray(channel.data if isinstance(channel, Tensor) else channel, dtype=np.float64)
    idx, lo, hi = _quantize(arr, bins)
    counts = np.bincount(idx.ravel(), minlength=bins).astype(np.int64)
    sums = counts * np.arange(bins, dtype=np.int64)
    n0 = np.cumsum(counts)[:-1].tolist()
    s0 = np.cumsum(sums)[:-1].tolist()
    n, s = int(counts.sum()), int(sums.sum())
    best_k, best_num, best_den = -1, -1, 1
    for k in range(bins - 1):
        a, sa = n0[k], s0[k]
        b, sb = n - a, s - sa
        if a == 0 or b == 0:
            continue
        # between-class variance is proportional to (b*sa - a*sb)^2 / (a*b)
        num = (b * sa - a * sb) ** 2
        den = a * b
        if best_k < 0 or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    width = (hi - lo) / bins
    return lo + (best_k + 0.5) * width


# --------------------------------------------------- labelling primitives


def connected_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labelling; labels 1..L numbered in raster-scan order."""
    return _accel.connected_components_8(np.asarray(mask, dtype=bool))


def component_centroids(labels: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros((0, 2))
    idx = np.arange(1, count + 1)
    return np.array(ndimage.center_of_mass(np.ones(labels.shape), labels, idx), dtype=np.float64).reshape(-1, 2)


def distance_maxima_seeds(mask, min_distance: int = 2) -> np.ndarray:
    """Seeds at plateau centroids of the Euclidean distance transform's local maxima."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, 2))
    dist = ndimage.distance_transform_edt(mask)
    size = 2 * min_distance + 1
    peaks = (dist == ndimage.maximum_filter(dist, size=size, mode="constant")) & mask
    lab, count = connected_components(peaks)
    seeds = component_centroids(lab, count)
    # components too thin to host a peak still need a seed
    comp, ncomp = connected_components(mask)
    covered = set(np.unique(comp[peaks]).tolist())
    missing = [k for k in range(1, ncomp + 1) if k not in covered]
    if missing:
        extra = component_centroids(comp, ncomp)[np.array(missing) - 1]
        seeds = np.vstack([seeds, extra])
    return seeds


def voronoi_labeling(mask, seeds) -> np.ndarray:
    """Assign foreground pixels to their nearest seed and cut 1-pixel borders between cells.

    Distances are Euclidean with ties going to the lower seed index.  A
    pixel whose 4-neighbour carries a smaller, different label is set to 0,
    which leaves a single-pixel background ridge wherever two cells touch.
    Surviving labels are renumbered to 1..L in seed order.
    """
    mask = np.asarray(mask, dtype=bool)
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 2)
    if mask.any() and len(seeds) == 0:
        raise SeedError("non-empty mask needs at least one seed")
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.int64)
    lab = _accel.nearest_seed(mask, seeds)
    ridge = np.zeros(mask.shape, dtype=bool)
    for axis in (0, 1):
        for shift in (1, -1):
            nb = np.roll(lab, shift, axis=axis)
            # exclude wrap-around neighbours
            edge = [slice(None)] * 2
            edge[axis] = slice(0, 1) if shift == 1 else slice(-1, None)
            nb[tuple(edge)] = 0
            ridge |= (nb > 0) & (nb < lab)
    lab[ridge] = 0
    present = np.unique(lab[lab > 0])
    remap = np.zeros(len(seeds) + 1, dtype=np.int64)
    remap[present] = np.arange(1, len(present) + 1)
    return remap[lab]


def vo_target(x, stains: StainMatrix = RUIFROK_HED, seeding: str = "centroid", min_distance: int = 2) -> np.ndarray:
    """Weak segmentation target [1,H,W] in {0,1} from one RGB patch [3,H,W]."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    hema = rgb_to_hed(arr, stains)[0]
    try:
        t = otsu_threshold(hema)
    except DegenerateHistogramError:
        log.warning("blank patch: Otsu histogram is degenerate, using an empty target")
        return np.zeros((1,) + hema.shape)
    mask = hema > t
    if seeding == "centroid":
        comp, count = connected_components(mask)
        seeds = component_centroids(comp, count)
    elif seeding == "distance":
        seeds = distance_maxima_seeds(mask, min_distance)
    else:
        raise ValueError(f"unknown seeding {seeding!r}")
    labels = voronoi_labeling(mask, seeds)
    return (labels > 0).astype(np.float64)[None]


# -------------------------------------------------------------------- SSIM

SSIM_WIN = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


_G = gaussian_window()
_GV = Tensor(_G.reshape(1, 1, SSIM_WIN, 1))
_GH = Tensor(_G.reshape(1, 1, 1, SSIM_WIN))


def _filt(t: Tensor) -> Tensor:
    return ad.conv2d(ad.conv2d(t, _GV), _GH)


def ssim_map(a, b, data_range: float = 1.0) -> Tensor:
    """Per-window SSIM over valid 11x11 Gaussian windows, [N,1,H-10,W-10]."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise SizeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.reshape((1,) + a.shape), b.reshape((1,) + b.shape)
    if a.ndim != 4 or a.shape[1] != 1:
        raise SizeError(f"ssim expects [1,H,W] or [N,1,H,W], got {a.shape}")
    if a.shape[2] < SSIM_WIN or a.shape[3] < SSIM_WIN:
        raise SizeError(f"ssim needs H, W >= {SSIM_WIN}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filt(a), _filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _filt(a * a) - mu_aa
    var_b = _filt(b * b) - mu_bb
    cov = _filt(a * b) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return num / den


def ssim_batch(a, b, data_range: float = 1.0) -> Tensor:
    """Mean SSIM per sample, shape [N]."""
    return ssim_map(a, b, data_range).mean(axis=(1, 2, 3))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM between two single-channel images [1,H,W]."""
    with ad.no_grad():
        return float(ssim_map(a, b, data_range).data.mean())
