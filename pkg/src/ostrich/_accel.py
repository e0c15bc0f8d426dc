"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results.  The numba path
is used unless ``OSTRICH_NUMBA=0`` is set in the environment (or numba is
not importable); ``set_backend`` switches at runtime, mainly for the
benchmark and the equivalence tests.
"""
from __future__ import annotations

import ctypes
import os
import sys

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _keep_heap_pages() -> None:
    # Conv temporaries are tens of MB; glibc would mmap/munmap each one and the
    # page faults cost more than the copies themselves.
    if not sys.platform.startswith("linux") or os.environ.get("OSTRICH_MALLOPT", "1") == "0":
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 31)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_keep_heap_pages()


def _env_wants_numba() -> bool:
    return os.environ.get("OSTRICH_NUMBA", "1").strip().lower() not in {"0", "false", "no", "off"}


_USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    global _USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _USE_NUMBA = name == "numba"


# ---------------------------------------------------------------- im2col


@njit(cache=True)
def _im2col_nb(xp, kh, kw, stride, ho, wo, cols):
    n, c, hp, wp = xp.shape
    src = xp.ravel()
    dst = cols.ravel()
    idx = 0
    for ch in range(c):
        for u in range(kh):
            for v in range(kw):
                for b in range(n):
                    for i in range(ho):
                        off = ((b * c + ch) * hp + i * stride + u) * wp + v
                        for j in range(wo):
                            dst[idx] = src[off + j * stride]
                            idx += 1


def _im2col_np(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (c, kh, kw, n, ho, wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded NCHW array into a (C*kh*kw, N*Ho*Wo) column matrix."""
    if _USE_NUMBA:
        # allocate outside numba: its allocator page-faults far slower than numpy's
        cols = np.empty((xp.shape[1] * kh * kw, xp.shape[0] * ho * wo))
        _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo, cols)
        return cols
    return _im2col_np(xp, kh, kw, stride, ho, wo)


@njit(cache=True)
def _col2im_nb(cols, kh, kw, stride, ho, wo, out):
    n, c, hp, wp = out.shape
    src = cols.ravel()
    dst = out.ravel()
    idx = 0
    for ch in range(c):
        for u in range(kh):
            for v in range(kw):
                for b in range(n):
                    for i in range(ho):
                        off = ((b * c + ch) * hp + i * stride + u) * wp + v
                        for j in range(wo):
                            dst[off + j * stride] += src[idx]
                            idx += 1


def _col2im_np(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp))
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += blocks[:, u, v].transpose(1, 0, 2, 3)
    return out


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded array."""
    if _USE_NUMBA:
        out = np.zeros((n, c, hp, wp))
        _col2im_nb(np.ascontiguousarray(cols), kh, kw, stride, ho, wo, out)
        return out
    return _col2im_np(cols, n, c, hp, wp, kh, kw, stride, ho, wo)


# --------------------------------------------------- connected components


@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def _cc8_nb(mask):
    h, w = mask.shape
    provisional = np.zeros((h, w), dtype=np.int64)
    parent = np.arange(h * w + 1)
    nxt = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            best = 0
            # already-visited 8-neighbours: W, NW, N, NE
            for dr, dc in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
                rr = r + dr
                cc = c + dc
                if rr < 0 or cc < 0 or cc >= w:
                    continue
                lab = provisional[rr, cc]
                if lab == 0:
                    continue
                root = _find(parent, lab)
                if best == 0:
                    best = root
                elif root != best:
                    lo = min(root, best)
                    hi = max(root, best)
                    parent[hi] = lo
                    best = lo
            if best == 0:
                best = nxt
                nxt += 1
            provisional[r, c] = best
    # final labels in order of first appearance in the raster scan
    remap = np.zeros(nxt, dtype=np.int64)
    out = np.zeros((h, w), dtype=np.int64)
    count = 0
    for r in range(h):
        for c in range(w):
            lab = provisional[r, c]
            if lab == 0:
                continue
            root = _find(parent, lab)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            out[r, c] = remap[root]
    return out, count


def _cc8_np(mask):
    lab, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return lab.astype(np.int64), 0
    flat = lab.ravel()
    nz = flat[flat > 0]
    _, first = np.unique(nz, return_index=True)
    order = nz[np.sort(first)]
    remap = np.zeros(count + 1, dtype=np.int64)
    remap[order] = np.arange(1, count + 1)
    return remap[lab], int(count)


def connected_components_8(mask: np.ndarray) -> tuple[np.ndarray, int]:
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _USE_NUMBA:
        out, count = _cc8_nb(mask)
        return out, int(count)
    return _cc8_np(mask)


# ------------------------------------------------------ nearest-seed map


@njit(cache=True)
def _nearest_seed_nb(mask, seeds):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    ns = seeds.shape[0]
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            best = 0
            bestd = np.inf
            for s in range(ns):
                dr = r - seeds[s, 0]
                dc = c - seeds[s, 1]
                d = dr * dr + dc * dc
                if d < bestd:
                    bestd = d
                    best = s + 1
            out[r, c] = best
    return out


def _nearest_seed_np(mask, seeds):
    rr, cc = np.nonzero(mask)
    out = np.zeros(mask.shape, dtype=np.int64)
    if rr.size == 0:
        return out
    dr = rr[:, None] - seeds[None, :, 0]
    dc = cc[:, None] - seeds[None, :, 1]
    d = dr * dr + dc * dc
    out[rr, cc] = np.argmin(d, axis=1) + 1
    return out


def nearest_seed(mask: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Label each foreground pixel with 1 + index of its nearest seed (ties to the lower index)."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    seeds = np.ascontiguousarray(seeds, dtype=np.float64).reshape(-1, 2)
    if _USE_NUMBA:
        return _nearest_seed_nb(mask, seeds)
    return _nearest_seed_np(mask, seeds)


__all__ = [
    "HAVE_NUMBA",
    "backend",
    "set_backend",
    "im2col",
    "col2im",
    "connected_components_8",
    "nearest_seed",
]
