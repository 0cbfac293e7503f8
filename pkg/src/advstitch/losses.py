"""Alignment losses used both as training objectives and as attack metrics.

All losses return one value per sample, shape ``(B,)``; unbatched inputs give a
scalar.
"""
from __future__ import annotations

import torch

from .geometry import CanvasSpec, as_matrix, canvas_from_homography, shared_mask, warp_image


def _flatnorm(t: torch.Tensor, batched: bool) -> torch.Tensor:
    if batched:
        return t.flatten(1).norm(dim=1)
    return t.norm()


def loss_H(H_pred, H_gt) -> torch.Tensor:
    """Frobenius norm of the entrywise difference of two homographies."""
    a, b = as_matrix(H_pred), as_matrix(H_gt)
    dtype = torch.promote_types(a.dtype, b.dtype)
    diff = a.to(dtype) - b.to(dtype)
    return diff.flatten(-2).norm(dim=-1)


def loss_S(x1: torch.Tensor, x2: torch.Tensor, H) -> torch.Tensor:
    """Misalignment of the shared content: ``|| mask(H) * x1 - warp(x2, H) ||_2``.

    ``x2`` is warped into ``x1``'s frame and compared where it lands.
    """
    batched = x1.dim() == 4
    h, w = x1.shape[-2:]
    Hm = as_matrix(H)
    mask = shared_mask(Hm, (h, w), CanvasSpec.frame(h, w), dtype=x1.dtype)
    warped = warp_image(x2, Hm)
    if not batched:
        mask = mask[0]
    return _flatnorm(mask * x1 - warped, batched)


def loss_AS(x2: torch.Tensor, H, H_prime, canvas: CanvasSpec | None = None,
            frame1: tuple[int, int] | None = None) -> torch.Tensor:
    """Deviation between ``x2`` aligned by ``H`` and by ``H_prime``, restricted to frame 1.

    Both warps land on the shared stitching ``canvas``; the identity-warped
    all-ones mask of the first frame restricts the comparison to it.
    """
    batched = x2.dim() == 4
    h, w = frame1 or tuple(x2.shape[-2:])
    Ha, Hb = as_matrix(H), as_matrix(H_prime)
    if canvas is None:
        canvas = canvas_from_homography([Ha, Hb], (h, w), tuple(x2.shape[-2:]))
    eye = torch.eye(3, dtype=torch.float64)
    mask = shared_mask(eye, (h, w), canvas, dtype=x2.dtype)
    if not batched:
        mask = mask[0]
    diff = mask * warp_image(x2, Ha, canvas) - mask * warp_image(x2, Hb, canvas)
    return _flatnorm(diff, batched)


def loss_SoA(x1, x2, H_gt, H_prime, canvas: CanvasSpec | None = None) -> torch.Tensor:
    """Homography term plus aligned-shared-content term against the reference ``H_gt``."""
    return loss_H(H_gt, H_prime) + loss_AS(x2, H_gt, H_prime, canvas, frame1=tuple(x1.shape[-2:]))


def soa_loss(model, x1, x2, H_gt, canvas: CanvasSpec | None = None) -> torch.Tensor:
    """``loss_SoA`` with ``H_prime`` predicted by ``model`` from ``(x1, x2)``."""
    return loss_SoA(x1, x2, H_gt, model(x1, x2), canvas)
