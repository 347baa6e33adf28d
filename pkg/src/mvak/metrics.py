"""Image metrics: PSNR, SSIM, and position-matched cross-view consistency."""

from __future__ import annotations

import math

import numpy as np

from . import geometry
from .numerics import ShapeError

PSNR_CAP = 99.0
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images report the cap."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region weighted local means of a [h, w] image."""
    kh, kw = kernel.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i : i + h - kh + 1, j : j + w - kw + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, sigma: float = 1.5) -> float:
    """Mean SSIM over channels with a Gaussian window, standard constants."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    kernel = _gaussian_window(window, sigma)
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _windowed_mean(x, kernel)
        my = _windowed_mean(y, kernel)
        mxx = _windowed_mean(x * x, kernel)
        myy = _windowed_mean(y * y, kernel)
        mxy = _windowed_mean(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + _SSIM_C1) * (2 * cxy + _SSIM_C2)
        den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def evaluate(generated: np.ndarray, truth: np.ndarray) -> dict:
    """Per-view and mean PSNR/SSIM for stacks shaped [n, 3, h, w] in [0, 1]."""
    generated = np.asarray(generated, np.float64)
    truth = np.asarray(truth, np.float64)
    if generated.shape != truth.shape:
        raise ShapeError(f"evaluate shape mismatch {generated.shape} vs {truth.shape}")
    psnrs = [psnr(generated[i], truth[i]) for i in range(generated.shape[0])]
    ssims = [ssim(generated[i], truth[i]) for i in range(generated.shape[0])]
    return {
        "psnr": psnrs,
        "ssim": ssims,
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
    }


def cross_view_consistency(views: np.ndarray, scene: geometry.Scene, poses: list,
                           film_extent: float = geometry.FILM_EXTENT,
                           match_tol: float | None = None) -> float:
    """Mean squared color difference at position-matched pixels of adjacent views.

    Ground-truth geometry supplies the correspondences: a masked pixel of view i
    is matched to the pixel of view i+1 whose rasterized world position agrees
    within a fraction of the pixel footprint. Returns NaN when nothing matches.
    """
    n, _, h, w = views.shape
    if match_tol is None:
        match_tol = 0.75 * film_extent / h
    maps = [geometry.rasterize(scene, p, h, w, film_extent) for p in poses]
    total, count = 0.0, 0
    for i in range(n):
        j = (i + 1) % n
        mask_i = maps[i].mask[0] > 0
        for r, c in zip(*np.where(mask_i)):
            p = maps[i].position[:, r, c]
            row, col = geometry.project_point(poses[j], p, h, w, film_extent)
            r2, c2 = int(round(row)), int(round(col))
            if not (0 <= r2 < h and 0 <= c2 < w):
                continue
            if maps[j].mask[0][r2, c2] == 0:
                continue
            if np.linalg.norm(maps[j].position[:, r2, c2] - p) > match_tol:
                continue
            diff = views[i][:, r, c] - views[j][:, r2, c2]
            total += float(diff @ diff)
            count += 1
    return total / count if count else float("nan")
