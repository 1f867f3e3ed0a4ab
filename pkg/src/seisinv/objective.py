"""Differentiable training objective: squared L2 combined with MS-SSIM.

SSIM follows the classic windowed form with an 11x11 unit-sum Gaussian
(sigma 1.5) and stabilizers c1 = 0.01^2, c2 = 0.03^2 on a unit dynamic
range. MS-SSIM is the 5-scale product form: contrast-structure terms at
every scale, luminance at the coarsest, 2x2 mean-pool downsampling
between scales, weights normalized to sum exactly 1. At coarse scales
the window shrinks to the image if needed (kept odd, at least 3).

Both terms of the loss use the mean-over-positions convention so a
perfect prediction scores exactly -1; mode="sum" restores the literal
summed form.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Tensor

# canonical 5-scale weights; raw values sum to 1.0001, so normalize
_RAW_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _scale_weights(scales):
    if not 1 <= scales <= len(_RAW_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(_RAW_WEIGHTS)}")
    w = np.asarray(_RAW_WEIGHTS[:scales], dtype=np.float64)
    return tuple(w / w.sum())


@dataclass
class LossConfig:
    window: int = 11
    sigma: float = 1.5
    scales: int = 5
    scale_weights: tuple = ()
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    mode: str = "mean"          # "mean" | "sum"

    def __post_init__(self):
        if not self.scale_weights:
            self.scale_weights = _scale_weights(self.scales)
        if len(self.scale_weights) != self.scales:
            raise ValueError("scale_weights length must equal scales")
        total = float(np.sum(self.scale_weights))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"scale weights sum to {total}, expected 1")
        if min(self.scale_weights) <= 0:
            raise ValueError("scale weights must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizers must be positive")
        if self.mode not in ("mean", "sum"):
            raise ValueError(f"unknown combination mode {self.mode!r}")


def gaussian_window(size, sigma):
    """Unit-sum separable Gaussian window, [size, size]."""
    half = (size - 1) / 2.0
    t = np.arange(size) - half
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_nchw(x):
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 2:
        return t.reshape(1, 1, *t.shape)
    if t.ndim == 3:
        return t.reshape(t.shape[0], 1, t.shape[1], t.shape[2])
    if t.ndim == 4:
        return t
    raise ValueError(f"expected 2-D..4-D image input, got {t.ndim}-D")


def _window_stats(x, y, window, sigma, dtype):
    kernel = Tensor(gaussian_window(window, sigma).astype(dtype)
                    .reshape(1, 1, window, window))
    mu_x = ops.conv2d(x, kernel)
    mu_y = ops.conv2d(y, kernel)
    xx = ops.conv2d(x * x, kernel) - mu_x * mu_x
    yy = ops.conv2d(y * y, kernel) - mu_y * mu_y
    xy = ops.conv2d(x * y, kernel) - mu_x * mu_y
    return mu_x, mu_y, xx, yy, xy


def ssim(x, y, config: LossConfig = None):
    """Mean SSIM and the per-position SSIM map (both differentiable)."""
    config = config or LossConfig()
    x, y = _to_nchw(x), _to_nchw(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    h, w = x.shape[2], x.shape[3]
    if h < config.window or w < config.window:
        raise ValueError(
            f"image {h}x{w} smaller than window {config.window}")
    mu_x, mu_y, xx, yy, xy = _window_stats(
        x, y, config.window, config.sigma, x.dtype)
    c1, c2 = config.c1, config.c2
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * xy + c2) / (xx + yy + c2)
    smap = lum * cs
    scalar = smap.mean() if config.mode == "mean" else smap.sum()
    return scalar, smap


def _scale_window(config, h, w):
    win = min(config.window, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 3:
        raise ValueError(
            f"image reduced to {h}x{w}: too small for SSIM at this scale")
    return win


def mssim(x, y, config: LossConfig = None):
    """Multi-scale SSIM scalar (differentiable)."""
    config = config or LossConfig()
    x, y = _to_nchw(x), _to_nchw(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    agg = (lambda t: t.mean()) if config.mode == "mean" else (lambda t: t.sum())
    c1, c2 = config.c1, config.c2
    log_total = None
    for j in range(config.scales):
        h, w = x.shape[2], x.shape[3]
        win = _scale_window(config, h, w)
        mu_x, mu_y, xx, yy, xy = _window_stats(x, y, win, config.sigma,
                                               x.dtype)
        cs = agg((2.0 * xy + c2) / (xx + yy + c2))
        term = cs
        if j == config.scales - 1:
            lum = agg((2.0 * mu_x * mu_y + c1)
                      / (mu_x * mu_x + mu_y * mu_y + c1))
            term = term * lum
        # product form via logs; floor keeps the log finite if a scale
        # ever goes non-positive on anti-correlated inputs
        contrib = float(config.scale_weights[j]) * term.clamp_min(1e-6).log()
        log_total = contrib if log_total is None else log_total + contrib
        if j < config.scales - 1:
            x = ops.avg_pool2(x)
            y = ops.avg_pool2(y)
    return log_total.exp()


def l1_term(pred, target, mode="mean"):
    diff = (pred - target).abs()
    return diff.mean() if mode == "mean" else diff.sum()


def l2_term(pred, target, mode="mean"):
    diff = (pred - target).square()
    return diff.mean() if mode == "mean" else diff.sum()


def training_loss(pred, target, config: LossConfig = None):
    """Mean squared error minus MS-SSIM; perfect prediction scores -1."""
    config = config or LossConfig()
    pred, target = _to_nchw(pred), _to_nchw(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch {pred.shape} vs {target.shape}")
    return l2_term(pred, target, config.mode) - mssim(pred, target, config)


def make_loss(kind, config: LossConfig = None):
    """Loss factory for the training variants: l1 | l2 | l2+mssim."""
    config = config or LossConfig()
    if kind == "l1":
        return lambda p, t: l1_term(p, t, config.mode)
    if kind == "l2":
        return lambda p, t: l2_term(p, t, config.mode)
    if kind == "l2+mssim":
        return lambda p, t: training_loss(p, t, config)
    raise ValueError(f"unknown loss kind {kind!r}")
