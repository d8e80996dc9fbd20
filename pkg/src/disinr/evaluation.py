"""Image quality metrics, PCA of feature maps and convergence-curve tables."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

from .errors import DimensionError, DomainError
from .physics import magnitude


def _as_single_channel(img, name):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"{name}: metrics take single-channel 2D images, got {img.shape}")
    return img


def normalized_magnitude(recon, reference):
    """Magnitude maps of ``recon`` and ``reference`` divided by the reference max."""
    ref = magnitude(reference)
    scale = ref.max()
    scale = scale if scale > 0 else 1.0
    return magnitude(recon) / scale, ref / scale


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    a, b = _as_single_channel(a, "psnr"), _as_single_channel(b, "psnr")
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise DomainError("data_range must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range: float = 1.0, size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM at every window position fully inside the image."""
    a, b = _as_single_channel(a, "ssim"), _as_single_channel(b, "ssim")
    if a.shape != b.shape:
        raise DimensionError(f"ssim: {a.shape} vs {b.shape}")
    if min(a.shape) < size:
        raise DomainError(f"ssim: image {a.shape} smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def blur(x):
        return correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0, **kwargs) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    return float(np.mean(ssim_map(a, b, data_range, **kwargs)))


def image_metrics(recon, reference) -> tuple[float, float]:
    """PSNR and SSIM of a reconstruction, complex inputs via normalised magnitude."""
    recon, reference = np.asarray(recon), np.asarray(reference)
    if reference.ndim == 3 and reference.shape[-1] == 2:
        recon, reference = normalized_magnitude(recon, reference)
    return psnr(recon, reference), ssim(recon, reference)


@dataclass
class MetricReport:
    """Per-record PSNR/SSIM rows for one method."""

    method: str
    rows: list = field(default_factory=list)

    def add(self, record_id: str, psnr_db: float, ssim_score: float) -> None:
        self.rows.append((record_id, float(psnr_db), float(ssim_score)))

    def summary(self) -> dict:
        p = np.array([r[1] for r in self.rows])
        s = np.array([r[2] for r in self.rows])
        return {"method": self.method, "n": len(self.rows),
                "psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                "ssim_mean": float(s.mean()), "ssim_std": float(s.std())}

    def csv_rows(self):
        return [(self.method, rid, p, s) for rid, p, s in self.rows]


CSV_HEADER = ("method", "record_id", "psnr_db", "ssim")


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for report in reports:
            for row in report.csv_rows():
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3])])


def pca_features(features, k: int = 3):
    """Project centred features onto their top-``k`` principal directions.

    Returns ``(components, explained_variance_ratio)`` with components of
    shape R x k.  When the features have fewer than ``k`` nonzero
    principal directions, only those are returned and a warning is issued.
    """
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("features must be R x D")
    r, d = x.shape
    if not r > k >= 1:
        raise DomainError(f"need R > k >= 1, got R={r}, k={k}")
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(r - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0, None), vecs[:, order]
    total = vals.sum()
    available = int(np.sum(vals > 1e-12 * max(total, 1e-300)))
    if available < k:
        warnings.warn(f"features have rank {available} < {k}; returning {available} components",
                      stacklevel=2)
        k = available
    # fix each direction's sign so that outputs are reproducible
    for j in range(k):
        pivot = np.argmax(np.abs(vecs[:, j]))
        if vecs[pivot, j] < 0:
            vecs[:, j] = -vecs[:, j]
    ratio = vals[:k] / total if total > 0 else np.zeros(k)
    return xc @ vecs[:, :k], ratio


def curve_report(logs, labels=None) -> dict[str, dict[int, float]]:
    """Mean PSNR per logged iteration for each method.

    ``logs`` are RunLogs; rows are grouped by ``labels[i]`` (default: the
    log's ``method``) and averaged over records at each iteration.
    """
    buckets: dict[str, dict[int, list]] = {}
    for i, log in enumerate(logs):
        label = labels[i] if labels is not None else log.method
        per_iter = buckets.setdefault(label, {})
        for row in log.rows:
            if row.psnr is not None:
                per_iter.setdefault(row.iteration, []).append(row.psnr)
    return {label: {it: float(np.mean(v)) for it, v in sorted(d.items())}
            for label, d in buckets.items()}


def write_curves_csv(path, curves: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method", "iteration", "psnr_db"))
        for label, curve in curves.items():
            for it, value in curve.items():
                writer.writerow((label, it, repr(value)))
