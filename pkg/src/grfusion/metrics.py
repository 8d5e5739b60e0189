"""No-reference fusion quality metrics.

All metrics score 8-bit quantized luma. Two-source definitions extend to N
sources without pairing: ``q_mi`` and ``q_ssim`` sum their per-source terms,
``q_abf`` and ``q_cb`` weight every source's preservation map by that
source's own edge strength or saliency, and ``q_ncie`` builds one
``(N+1) x (N+1)`` correlation matrix. Each reduces to the usual two-source
value when N = 2.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from .core import SourceStack, rgb_to_luma
from .errors import MetricError

SSIM_WINDOW = 11
METRIC_NAMES = ("q_mi", "q_abf", "q_cb", "q_ncie", "q_ssim")


def _luma255(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return np.rint(rgb_to_luma(arr.astype(np.float32)).astype(np.float64) * 255.0)


def _prepare(fused, stack) -> tuple[np.ndarray, list[np.ndarray]]:
    images = stack.images if isinstance(stack, SourceStack) else stack
    srcs = [_luma255(s) for s in images]
    f = _luma255(fused)
    if len(srcs) < 1:
        raise MetricError("no source images")
    for s in srcs:
        if s.shape != f.shape:
            raise MetricError(f"source {s.shape} and fused {f.shape} sizes differ")
    if min(f.shape) < SSIM_WINDOW:
        raise MetricError(f"images must be at least {SSIM_WINDOW}px on each side")
    return f, srcs


def _pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


# ---------------------------------------------------------------------------
# mutual information


def _entropies(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=256, range=[[0, 256], [0, 256]])
    joint /= joint.sum()

    def h(p):
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    return h(joint.sum(1)), h(joint.sum(0)), h(joint)


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    ha, hb, hab = _entropies(a, b)
    return ha + hb - hab


def q_mi(fused, stack) -> float:
    """Normalized mutual information ``sum_i 2 MI(F, I_i) / (H(F) + H(I_i))``."""
    f, srcs = _prepare(fused, stack)
    total = 0.0
    for s in srcs:
        hf, hs, hfs = _entropies(f, s)
        denom = hf + hs
        if denom > 0:
            total += 2.0 * (hf + hs - hfs) / denom
    return total


# ---------------------------------------------------------------------------
# Q_AB/F


_TG, _KG, _DG = 1.0 + math.exp(-15 * 0.5), -15.0, 0.5
_TA, _KA, _DA = 1.0 + math.exp(-22 * 0.2), -22.0, 0.8


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sx = ndimage.sobel(img, axis=1, mode="reflect")
    sy = ndimage.sobel(img, axis=0, mode="reflect")
    mag = np.hypot(sx, sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.where(sx == 0, np.pi / 2, np.arctan(sy / np.where(sx == 0, 1, sx)))
    return mag, ang


def _edge_preservation(g_a, a_a, g_f, a_f) -> np.ndarray:
    hi, lo = np.maximum(g_a, g_f), np.minimum(g_a, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        strength = np.where(hi > 0, lo / np.where(hi > 0, hi, 1), 1.0)
    orient = 1.0 - np.abs(a_a - a_f) / (np.pi / 2)
    q_g = _TG / (1.0 + np.exp(_KG * (strength - _DG)))
    q_a = _TA / (1.0 + np.exp(_KA * (orient - _DA)))
    return np.minimum(q_g * q_a, 1.0)


def _qabf(f, srcs) -> float:
    gf, af = _sobel(f)
    num = denom = 0.0
    for s in srcs:
        gs, as_ = _sobel(s)
        num += float((_edge_preservation(gs, as_, gf, af) * gs).sum())
        denom += float(gs.sum())
    if denom <= 0:
        return 0.0
    return num / denom


def q_abf(fused, stack) -> float:
    """Gradient-based edge transfer score in ``[0, 1]``.

    The sigmoid gains are normalized so a perfectly preserved edge scores 1.
    """
    f, srcs = _prepare(fused, stack)
    return float(_qabf(f, srcs))


# ---------------------------------------------------------------------------
# Q_CB


def _csf_filter(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    fy = np.linspace(-0.5, 0.5, h)[:, None] * (h / 30.0)
    fx = np.linspace(-0.5, 0.5, w)[None, :] * (w / 30.0)
    r = np.sqrt(fx**2 + fy**2)
    f0, f1, a = 15.3870, 1.3456, 0.7622
    csf = np.exp(-((r / f0) ** 2)) - a * np.exp(-((r / f1) ** 2))
    spectrum = np.fft.fftshift(np.fft.fft2(img)) * csf
    return np.real(np.fft.ifft2(np.fft.ifftshift(spectrum)))


def _masked_contrast(img: np.ndarray) -> np.ndarray:
    k, h, p, q, z = 1.0, 1.0, 3.0, 2.0, 1e-4
    fine = ndimage.gaussian_filter(img, 2.0, mode="reflect", truncate=7.5)
    coarse = ndimage.gaussian_filter(img, 4.0, mode="reflect", truncate=3.75)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.abs(np.where(coarse != 0, fine / np.where(coarse != 0, coarse, 1) - 1.0, 0.0))
    return k * c**p / (h * c**q + z)


def _minmax255(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return np.rint((img - lo) / (hi - lo) * 255.0)


def _ratio(a, b) -> np.ndarray:
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(hi > 0, lo / np.where(hi > 0, hi, 1), 1.0)


def _qcb(f, srcs) -> float:
    cf = _masked_contrast(_csf_filter(_minmax255(f)))
    cs = [_masked_contrast(_csf_filter(_minmax255(s))) for s in srcs]
    sal = np.stack([c**2 for c in cs])
    total = sal.sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(total > 0, sal / np.where(total > 0, total, 1), 1.0 / len(cs))
    return float(np.mean(sum(l * _ratio(c, cf) for l, c in zip(lam, cs))))


def q_cb(fused, stack) -> float:
    """Contrast-sensitivity-weighted information preservation score."""
    f, srcs = _prepare(fused, stack)
    return _qcb(f, srcs)


# ---------------------------------------------------------------------------
# Q_NCIE


def _rank_bins(img: np.ndarray, b: int) -> np.ndarray:
    flat = img.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.int64)
    ranks[order] = np.arange(flat.size)
    return ranks * b // flat.size


def nonlinear_correlation(x: np.ndarray, y: np.ndarray, b: int = 256) -> float:
    """Entropy-based correlation of rank-binned samples, in ``[0, 1]``."""
    bx, by = _rank_bins(x, b), _rank_bins(y, b)
    joint = np.bincount(bx * b + by, minlength=b * b).astype(np.float64)
    joint /= joint.sum()

    def h(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum() / math.log(b))

    joint2 = joint.reshape(b, b)
    return h(joint2.sum(1)) + h(joint2.sum(0)) - h(joint)


def ncie(images: Sequence[np.ndarray], b: int = 256) -> float:
    k = len(images)
    r = np.eye(k)
    for i, j in itertools.combinations(range(k), 2):
        r[i, j] = r[j, i] = nonlinear_correlation(images[i], images[j], b)
    lam = np.clip(np.linalg.eigvalsh(r), 0.0, None) / k
    lam = lam[lam > 0]
    h_r = float(-(lam * np.log(lam)).sum() / math.log(b))
    return float(np.clip(1.0 - h_r, 0.0, 1.0))


def q_ncie(fused, stack) -> float:
    """Nonlinear correlation information entropy of sources plus fused image."""
    f, srcs = _prepare(fused, stack)
    return ncie([*srcs, f])


# ---------------------------------------------------------------------------
# Q_SSIM


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs at least {SSIM_WINDOW}px per side")
    return float(
        structural_similarity(a, b, data_range=255.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    )


def q_ssim(fused, stack) -> float:
    """``sum_i SSIM(F, I_i)``, so the range is ``[-N, N]``."""
    f, srcs = _prepare(fused, stack)
    return float(sum(ssim(f, s) for s in srcs))


# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    q_mi: float
    q_abf: float
    q_cb: float
    q_ncie: float
    q_ssim: float
    per_pair: dict[str, dict[str, float]] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def evaluate(fused, stack) -> MetricReport:
    """All five metrics, with a per-pair breakdown when there are more than two sources."""
    images = stack.images if isinstance(stack, SourceStack) else np.asarray(stack)
    report = MetricReport(
        q_mi=q_mi(fused, images),
        q_abf=q_abf(fused, images),
        q_cb=q_cb(fused, images),
        q_ncie=q_ncie(fused, images),
        q_ssim=q_ssim(fused, images),
    )
    if len(images) > 2:
        for i, j in _pairs(len(images)):
            pair = images[[i, j]]
            report.per_pair[f"{i + 1}-{j + 1}"] = {
                "q_mi": q_mi(fused, pair),
                "q_abf": q_abf(fused, pair),
                "q_cb": q_cb(fused, pair),
                "q_ncie": q_ncie(fused, pair),
                "q_ssim": q_ssim(fused, pair),
            }
    return report
