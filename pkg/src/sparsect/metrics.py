"""Image quality metrics: PSNR, windowed SSIM, and per-plane summaries."""

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Volume


def _arr(x):
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def psnr(x, ref, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    xa, ra = _arr(x), _arr(ref)
    if xa.shape != ra.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ra.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((xa - ra) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    return np.outer(k, k)


def _local_mean(img, kern):
    win = kern.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.tensordot(windows, kern, axes=([2, 3], [0, 1]))


def ssim(x, ref, peak=1.0, k1=0.01, k2=0.03, win=11, sigma=1.5):
    """Mean local structural similarity over a Gaussian window."""
    xa, ra = _arr(x), _arr(ref)
    if xa.shape != ra.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ra.shape}")
    if xa.ndim != 2:
        raise ValueError("ssim operates on 2D slices")
    if min(xa.shape) < win:
        raise ValueError(f"slice {xa.shape} smaller than {win}x{win} window")
    kern = _gaussian_kernel(win, sigma)
    mu_x = _local_mean(xa, kern)
    mu_y = _local_mean(ra, kern)
    xx = _local_mean(xa * xa, kern) - mu_x * mu_x
    yy = _local_mean(ra * ra, kern) - mu_y * mu_y
    xy = _local_mean(xa * ra, kern) - mu_x * mu_y
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


_PLANES = ("axial", "coronal", "sagittal")


@dataclass
class PlaneMetrics:
    psnr: float
    ssim: float
    psnr_identical: bool = False
    ssim_window: int = 11


@dataclass
class MetricsReport:
    """Per-plane quality summary of one reconstruction against its reference."""

    planes: dict = field(default_factory=dict)

    def row(self, plane):
        return self.planes[plane]


def _slices(arr, plane):
    if plane == "axial":
        return [arr[i] for i in range(arr.shape[0])]
    if plane == "coronal":
        return [arr[:, j, :] for j in range(arr.shape[1])]
    return [arr[:, :, k] for k in range(arr.shape[2])]


def plane_metrics(x, ref, peak=1.0):
    """PSNR/SSIM averaged over the slices of each orthogonal plane.

    For planes whose slices are smaller than the default 11x11 SSIM window,
    the window shrinks to the largest odd size that fits (recorded in the
    report) so desk-scale volumes still yield complete rows.
    """
    xa, ra = _arr(x), _arr(ref)
    if xa.shape != ra.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ra.shape}")
    report = MetricsReport()
    for plane in _PLANES:
        xs = _slices(xa, plane)
        rs = _slices(ra, plane)
        win = min(11, min(xs[0].shape))
        if win % 2 == 0:
            win -= 1
        ps = [psnr(a, b, peak) for a, b in zip(xs, rs)]
        ss = [ssim(a, b, peak, win=win) for a, b in zip(xs, rs)]
        identical = any(math.isinf(p) for p in ps)
        mean_psnr = math.inf if identical else float(np.mean(ps))
        report.planes[plane] = PlaneMetrics(
            psnr=mean_psnr, ssim=float(np.mean(ss)),
            psnr_identical=identical, ssim_window=win)
    return report
