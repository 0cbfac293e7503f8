"""End-to-end stitching: estimate, build the canvas, warp both views, compose."""
from __future__ import annotations

import torch

from .reconstructor import composite_baseline
from .training import warp_pair_to_canvas


def compose(x1, x2, H, reconstructor=None):
    """Place both views on their union canvas and merge them.

    Returns ``(stitched, union_mask, canvas)``; the average blend is used when
    no reconstructor is given. Pixels outside both views are zero.
    """
    w1, w2, masks, canvas = warp_pair_to_canvas(x1, x2, H)
    if reconstructor is None:
        out = composite_baseline(w1, w2, masks)
    else:
        out = reconstructor(w1, w2, masks).to(w1.dtype)
    union = ((masks[0] + masks[1]) > 0).to(out.dtype)
    return out * union, union[:, 0], canvas


def stitch(estimator, x1, x2, reconstructor=None):
    H = estimator(x1, x2)
    out, union, canvas = compose(x1, x2, H, reconstructor)
    return out, union, canvas, H


def stitch_pair(model, x1, x2, H, reconstructor=None):
    """Stitcher hook used by evaluation: ``(images, masks)`` for a batch."""
    out, union, _ = compose(x1, x2, H, reconstructor)
    return out, union
