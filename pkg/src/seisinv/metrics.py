"""Evaluation metrics: MAE, MSE, SSIM, MSSIM, Soft F_beta, layer stats.

Soft F_beta scores how well predicted velocity interfaces line up with
the true ones while forgiving near-misses: both models are run through
the same binarized edge detector, the predicted edge map is smoothed by
a peak-normalized Gaussian, and precision/recall are computed between
the smoothed and crisp maps. Peak normalization (kernel max 1, not unit
sum) is what lets dense edge clusters push the score past 1.

Everything here runs eval-only on plain numpy arrays in the normalized
velocity domain.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import convolve2d

from . import objective
from .diffcore.tensor import no_grad


@dataclass
class EdgeConfig:
    threshold: float = 0.05     # on normalized velocities
    kernel_size: int = 7
    sigma: float = 1.5
    beta: float = 1.0

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.threshold <= 0 or self.beta <= 0:
            raise ValueError("threshold and beta must be positive")


def gaussian_peak_kernel(size, sigma):
    """Gaussian kernel normalized to peak 1 (center value exactly 1)."""
    half = size // 2
    t = np.arange(size) - half
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return np.outer(g, g)


def pointwise_errors(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred.astype(np.float64) - truth.astype(np.float64)
    return {"mae": float(np.abs(diff).mean()),
            "mse": float((diff ** 2).mean())}


def detect_edges(model, config: EdgeConfig = None):
    """Binary map marking the upper row of each vertical transition."""
    config = config or EdgeConfig()
    v = np.asarray(model, dtype=np.float64)
    edges = np.zeros(v.shape, dtype=bool)
    edges[:-1] = np.abs(np.diff(v, axis=0)) > config.threshold
    return edges


def soft_f_beta(pred, truth, config: EdgeConfig = None):
    """Edge-alignment score; returns (value, degenerate_flag).

    degenerate_flag is True when either edge map is empty, in which
    case the value is the defined fallback 0.
    """
    config = config or EdgeConfig()
    e = detect_edges(truth, config).astype(np.float64)
    e_bar = detect_edges(pred, config).astype(np.float64)
    n_true, n_pred = e.sum(), e_bar.sum()
    if n_true == 0 or n_pred == 0:
        return 0.0, True
    kernel = gaussian_peak_kernel(config.kernel_size, config.sigma)
    e_hat = convolve2d(e_bar, kernel, mode="same")
    overlap = float((e_hat * e).sum())
    precision = overlap / n_pred
    recall = overlap / n_true
    if precision == 0.0 and recall == 0.0:
        return 0.0, False
    b2 = config.beta ** 2
    value = (1.0 + b2) * precision * recall / (b2 * precision + recall)
    return float(value), False


def layer_stats(pred, truth, label_map):
    """Per-layer mean difference and prediction variance.

    label_map assigns an integer layer id to every cell (the truth
    model's segmentation); values are reported in whatever velocity
    scale pred/truth share.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    labels = np.asarray(label_map)
    if pred.shape != truth.shape or pred.shape != labels.shape:
        raise ValueError("pred, truth and label_map shapes must agree")
    rows = []
    for layer in np.unique(labels):
        region = labels == layer
        rows.append({
            "layer": int(layer),
            "cells": int(region.sum()),
            "difference": float(pred[region].mean() - truth[region].mean()),
            "variance": float(pred[region].var()),
        })
    return rows


@dataclass
class MetricsReport:
    per_sample: list
    aggregate: dict
    provenance: dict = field(default_factory=dict)


METRIC_KEYS = ("mae", "mse", "ssim", "mssim", "soft_f_beta")


def evaluate_pair(pred, truth, edge_config: EdgeConfig = None,
                  loss_config=None):
    """All five metrics for one normalized (prediction, truth) pair."""
    edge_config = edge_config or EdgeConfig()
    loss_config = loss_config or objective.LossConfig()
    row = pointwise_errors(pred, truth)
    with no_grad():
        ssim_val, _ = objective.ssim(pred, truth, loss_config)
        mssim_val = objective.mssim(pred, truth, loss_config)
    row["ssim"] = float(ssim_val.data)
    row["mssim"] = float(mssim_val.data)
    fbeta, degenerate = soft_f_beta(pred, truth, edge_config)
    row["soft_f_beta"] = fbeta
    row["soft_f_beta_degenerate"] = degenerate
    return row


def evaluate_split(predictor, manifest, split, edge_config=None,
                   loss_config=None, provenance=None) -> MetricsReport:
    """Run a predictor over one split of a dataset manifest.

    predictor maps a normalized cube [S,T,R] to a normalized velocity
    grid [H,W]; ground truth comes from the manifest files.
    """
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    per_sample = []
    for sample_id in ids:
        cube, truth = manifest.load_pair(sample_id)
        pred = predictor(cube)
        row = evaluate_pair(np.asarray(pred), truth, edge_config, loss_config)
        row["id"] = sample_id
        per_sample.append(row)
    aggregate = {
        key: float(np.mean([row[key] for row in per_sample]))
        for key in METRIC_KEYS
    }
    aggregate["n_samples"] = len(per_sample)
    return MetricsReport(
        per_sample=per_sample,
        aggregate=aggregate,
        provenance=provenance or {"split": split},
    )
