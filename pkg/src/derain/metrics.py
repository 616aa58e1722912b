"""Luminance PSNR/SSIM, mask detection scores and inference timing."""

import csv
import json
import math
import statistics
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def to_luminance(img):
    """BT.601 luma of an RGB image; single-channel images pass through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return to_luminance(a), to_luminance(b)


def psnr(a, b, peak=1.0):
    """PSNR in dB on the luminance channel; ``math.inf`` for identical images."""
    ya, yb = _pair(a, b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, peak=1.0):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows of the luma."""
    ya, yb = _pair(a, b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a ** 2
    var_b = filt(yb * yb) - mu_b ** 2
    cov = filt(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mask_metrics(pred_prob, truth, threshold=0.5):
    """Accuracy, precision, recall and F1 of ``pred_prob > threshold``.

    Precision/recall/F1 are 1 when both prediction and truth are empty.
    """
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    truth = np.asarray(truth)
    if pred_prob.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred_prob.shape} vs {truth.shape}")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth mask must be binary")
    pred = pred_prob > threshold
    truth = truth.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    accuracy = float(np.mean(pred == truth))
    if tp + fp + fn == 0:
        return {"accuracy": accuracy, "precision": 1.0, "recall": 1.0, "f1": 1.0}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


@contextmanager
def single_thread():
    try:
        import torch
    except ImportError:  # pragma: no cover
        yield
        return
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def time_inference(fn, images, warmup=1, repeats=5):
    """Seconds per image for ``fn``, grouped by image scale.

    Returns ``{"HxW": {"median", "mean", "std", "min", "max", "repeats", "images"}}``.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    groups = {}
    for img in images:
        h, w = np.asarray(img).shape[:2]
        groups.setdefault(f"{h}x{w}", []).append(img)
    out = {}
    with single_thread():
        for scale, imgs in groups.items():
            for _ in range(warmup):
                for img in imgs:
                    fn(img)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                for img in imgs:
                    fn(img)
                samples.append((time.perf_counter() - t0) / len(imgs))
            out[scale] = {
                "median": statistics.median(samples),
                "mean": statistics.fmean(samples),
                "std": statistics.pstdev(samples),
                "min": min(samples),
                "max": max(samples),
                "repeats": repeats,
                "images": len(imgs),
            }
    return out


REPORT_FIELDS = ("method", "dataset", "id", "psnr", "ssim")


def evaluate_pairs(pairs, method="", dataset=""):
    """Per-image rows for ``[(id, result, truth), ...]`` plus one mean row."""
    rows = []
    for key, result, truth in pairs:
        rows.append({"method": method, "dataset": dataset, "id": key,
                     "psnr": psnr(result, truth), "ssim": ssim(result, truth)})
    rows.append(aggregate(rows, method, dataset))
    return rows


def aggregate(rows, method="", dataset=""):
    out = {"method": method, "dataset": dataset, "id": "mean"}
    for key in ("psnr", "ssim"):
        vals = [r[key] for r in rows]
        out[key] = float(np.mean(vals)) if vals else math.nan
    return out


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return v


def write_report(rows, prefix, extra_fields=()):
    """Write ``{prefix}.csv`` and ``{prefix}.json``; infinite PSNR is written as "inf"."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fields = list(REPORT_FIELDS) + [f for f in extra_fields if f not in REPORT_FIELDS]
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    with open(f"{prefix}.json", "w") as fh:
        json.dump([{k: "inf" if isinstance(v, float) and math.isinf(v) else v
                    for k, v in row.items()} for row in rows], fh, indent=1)
    return Path(f"{prefix}.csv"), Path(f"{prefix}.json")
