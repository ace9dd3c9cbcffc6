"""Segmentation and reconstruction metrics.

ari / iou operate on integer label maps and boolean masks; psnr / ssim on
float images in [0, 1].  All are pure functions returning python floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .validation import ValidationError

PSNR_CAP = 99.0

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0
# truncating the Gaussian at 3.5 sigma gives the canonical 11x11 support
_SSIM_TRUNCATE = 3.5


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(labels_a, labels_b):
    """Adjusted Rand index between two integer labelings of the same pixels.

    Chance-corrected pair-counting agreement; 1 for identical partitions
    (up to relabeling), ~0 for independent ones, negative for systematic
    disagreement.  Degenerate cases where the expected and maximum index
    coincide (both partitions trivial) score 1.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"label shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError("ari needs at least one element")
    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    n_a = a_idx.max() + 1
    n_b = b_idx.max() + 1
    contingency = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(contingency, (a_idx, b_idx), 1)

    sum_cells = _comb2(contingency.astype(np.float64)).sum()
    sum_rows = _comb2(contingency.sum(axis=1).astype(np.float64)).sum()
    sum_cols = _comb2(contingency.sum(axis=0).astype(np.float64)).sum()
    total = _comb2(float(a.size))
    if total == 0:
        return 1.0
    expected = sum_rows * sum_cols / total
    maximum = 0.5 * (sum_rows + sum_cols)
    if maximum == expected:
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))


def iou(mask_a, mask_b):
    """Jaccard index of two boolean masks; two empty masks count as 1."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def psnr(img_a, img_b, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 for an exact match."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    value = 10.0 * np.log10(data_range**2 / mse)
    return float(min(value, PSNR_CAP))


def _ssim_single(a, b):
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2

    def blur(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=_SSIM_TRUNCATE, mode="reflect")

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(img_a, img_b):
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1.0, averaged over pixels and channels."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValidationError("ssim expects (H, W) or (H, W, C) images")
    maps = [_ssim_single(a[..., c], b[..., c]) for c in range(a.shape[-1])]
    return float(np.mean(maps))


@dataclass
class EvalReport:
    """Per-split metric summary with optional per-frame breakdowns."""

    ari: dict = field(default_factory=dict)  # split -> float
    iou: dict = field(default_factory=dict)
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    per_frame: dict = field(default_factory=dict)  # split -> list of dicts

    def to_json(self, indent=2):
        return json.dumps(
            {
                "ari": self.ari,
                "iou": self.iou,
                "psnr": self.psnr,
                "ssim": self.ssim,
                "per_frame": self.per_frame,
            },
            indent=indent,
            sort_keys=True,
        )

    def summary_table(self):
        splits = sorted(
            set(self.ari) | set(self.iou) | set(self.psnr) | set(self.ssim)
        )
        lines = [f"{'split':<12} {'ARI':>8} {'IoU':>8} {'PSNR':>8} {'SSIM':>8}"]
        for s in splits:
            def fmt(d):
                return f"{d[s]:8.4f}" if s in d else f"{'-':>8}"

            lines.append(
                f"{s:<12} {fmt(self.ari)} {fmt(self.iou)} {fmt(self.psnr)} {fmt(self.ssim)}"
            )
        return "\n".join(lines)


def evaluate_split(pred_labels, true_labels, pred_images=None, true_images=None):
    """Metrics over one split: label maps give ARI/IoU (foreground = any
    nonzero label), image pairs give mean PSNR/SSIM."""
    if len(pred_labels) != len(true_labels):
        raise ValidationError("prediction / ground-truth counts differ")
    frames = []
    for p, t in zip(pred_labels, true_labels):
        frames.append(
            {
                "ari": ari(p, t),
                "iou": iou(np.asarray(p) > 0, np.asarray(t) > 0),
            }
        )
    out = {
        "ari": float(np.mean([f["ari"] for f in frames])),
        "iou": float(np.mean([f["iou"] for f in frames])),
    }
    if pred_images is not None:
        for (key, fn) in (("psnr", psnr), ("ssim", ssim)):
            vals = [fn(p, t) for p, t in zip(pred_images, true_images)]
            out[key] = float(np.mean(vals))
            for f, v in zip(frames, vals):
                f[key] = v
    return out, frames
