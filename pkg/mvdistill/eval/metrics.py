"""
mvdistill: Image Metrics
"""

from __future__ import annotations

import numpy as np

from mvdistill.core.errors import ContractViolation

PSNR_CAP_DB = 99.0


def _as_array(image) -> np.ndarray:
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def psnr(image_a, image_b) -> float:
    """10 log10(1 / mse) for [0, 1] images; identical images give PSNR_CAP_DB."""
    a, b = _as_array(image_a), _as_array(image_b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}", component="metrics")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def foreground_mask(image, threshold: float = 0.05) -> np.ndarray:
    """Pixels darker than 1 - threshold in any channel (white background)."""
    return (_as_array(image) < 1.0 - threshold).any(axis=-1)


def silhouette_iou(image, gt_image, threshold: float = 0.05) -> float:
    a, b = _as_array(image), _as_array(gt_image)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}", component="metrics")
    mask_a, mask_b = foreground_mask(a, threshold), foreground_mask(b, threshold)
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def cosine_similarity(a, b) -> float:
    a, b = _as_array(a).ravel(), _as_array(b).ravel()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0
