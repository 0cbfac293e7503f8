"""Stitched-image quality (EN, SF, SD, AG) and alignment metrics.

Images are float arrays in [0, 1], either ``(C, H, W)``/``(H, W, C)`` colour or
``(H, W)`` grey. Colour is reduced with luma weights 0.299/0.587/0.114 and the
statistics are reported on the 0-255 scale unless ``peak`` says otherwise. An
optional ``mask`` restricts every statistic to the valid stitched region.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

LUMA = (0.299, 0.587, 0.114)

log = logging.getLogger(__name__)


def to_gray(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] in (1, 3):
        chw = img
    elif img.ndim == 3 and img.shape[-1] in (1, 3):
        chw = np.moveaxis(img, -1, 0)
    else:
        raise ValueError(f"cannot interpret image of shape {img.shape}")
    if chw.shape[0] == 1:
        return chw[0]
    return LUMA[0] * chw[0] + LUMA[1] * chw[1] + LUMA[2] * chw[2]


def _valid(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    m = np.squeeze(m)
    return m > 0.5


def entropy(img, mask=None) -> float:
    """Shannon entropy (bits) of the 256-bin grey-level histogram."""
    g = to_gray(img)
    levels = np.clip(np.rint(g * 255.0), 0, 255).astype(np.int64)[_valid(mask, g.shape)]
    if levels.size == 0:
        return 0.0
    counts = np.bincount(levels, minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def spatial_frequency(img, mask=None, peak: float = 255.0) -> float:
    """sqrt(mean squared vertical difference + mean squared horizontal difference)."""
    g = to_gray(img) * peak
    v = _valid(mask, g.shape)
    dr = np.diff(g, axis=0)[v[1:, :] & v[:-1, :]]
    dc = np.diff(g, axis=1)[v[:, 1:] & v[:, :-1]]
    rf = np.mean(dr ** 2) if dr.size else 0.0
    cf = np.mean(dc ** 2) if dc.size else 0.0
    return float(math.sqrt(rf + cf))


def standard_deviation(img, mask=None, peak: float = 255.0) -> float:
    g = (to_gray(img) * peak)[_valid(mask, to_gray(img).shape)]
    # shifting by one sample keeps constant images at exactly zero
    return float((g - g[0]).std()) if g.size else 0.0


def average_gradient(img, mask=None, peak: float = 255.0) -> float:
    """Mean of sqrt((gx^2 + gy^2) / 2) over every 2x2 pixel block.

    gx and gy are the forward differences averaged across the block's two rows
    (columns), which makes the score exactly invariant to image flips.
    """
    g = to_gray(img) * peak
    v = _valid(mask, g.shape)
    a, b, c, d = g[:-1, :-1], g[:-1, 1:], g[1:, :-1], g[1:, 1:]
    gx = 0.5 * ((b - a) + (d - c))
    gy = 0.5 * ((c - a) + (d - b))
    ok = v[:-1, :-1] & v[:-1, 1:] & v[1:, :-1] & v[1:, 1:]
    vals = np.sqrt((gx ** 2 + gy ** 2) / 2.0)[ok]
    return float(vals.mean()) if vals.size else 0.0


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    method: str
    condition: str
    en: float
    sf: float
    sd: float
    ag: float
    corner_error_px: float
    masked_alignment_l2: float
    n: int = 1
    failures: int = 0
    # externally computed no-reference scores can be merged here
    siqe: float | None = None
    br: float | None = None
    niqe: float | None = None
    pi: float | None = None

    COLUMNS = ("method", "condition", "n", "failures", "en", "sf", "sd", "ag",
               "corner_error_px", "masked_alignment_l2", "siqe", "br", "niqe", "pi")

    def row(self) -> dict:
        d = asdict(self)
        return {c: d[c] for c in self.COLUMNS}


def image_quality(img, mask=None) -> dict:
    return {
        "en": entropy(img, mask),
        "sf": spatial_frequency(img, mask),
        "sd": standard_deviation(img, mask),
        "ag": average_gradient(img, mask),
    }


def evaluate_model(model, dataset, attacks: Sequence[tuple[str, Callable]], method: str = "model",
                   stitcher: Callable | None = None, batch_size: int = 16) -> list[MetricReport]:
    """Stitch every pair under the benign condition and each named attack.

    ``attacks`` is a sequence of ``(condition_name, attack_fn)`` where
    ``attack_fn(model, pair) -> AttackedPair``. Failures on individual batches
    are counted and skipped rather than aborting the sweep.
    """
    from .attacks import ImagePair
    from .losses import loss_S
    from .geometry import corner_error
    from .stitching import stitch_pair

    if len(dataset) == 0:
        return []
    stitcher = stitcher or stitch_pair
    h, w = dataset.x1.shape[-2:]
    conditions = [("benign", None)] + list(attacks)
    reports = []
    for name, attack in conditions:
        acc = {k: [] for k in ("en", "sf", "sd", "ag", "corner_error_px", "masked_alignment_l2")}
        failures = 0
        for batch in dataset.batches(batch_size):
            pair = ImagePair(batch.x1, batch.x2, batch.H_gt)
            try:
                if attack is None:
                    a1, a2 = pair.x1, pair.x2
                else:
                    adv = attack(model, pair)
                    a1, a2 = adv.x1.to(pair.x1.dtype), adv.x2.to(pair.x2.dtype)
                with torch.no_grad():
                    H = model(a1, a2)
                    if pair.H_gt is not None:
                        acc["corner_error_px"] += corner_error(H, pair.H_gt, (h, w)).tolist()
                    acc["masked_alignment_l2"] += loss_S(pair.x1.double(), pair.x2.double(),
                                                         H).tolist()
                    images, masks = stitcher(model, a1, a2, H)
                for img, m in zip(images, masks):
                    q = image_quality(img, m)
                    for key, val in q.items():
                        acc[key].append(val)
            except Exception as exc:  # recorded, sweep continues
                log.warning("condition %s: batch failed: %s", name, exc)
                failures += len(batch)
        mean = {k: (float(np.mean(v)) if v else float("nan")) for k, v in acc.items()}
        reports.append(MetricReport(method=method, condition=name, n=len(dataset) - failures,
                                    failures=failures, **mean))
    return reports
