"""U-shaped reconstruction network built from six cells, plus an average blend."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cells import FixedCell, Genotype, MixedCell
from .errors import BadShape

N_CELLS = 6


@dataclass
class ReconstructorConfig:
    in_channels: int = 3
    channels: int = 16
    nodes: int = 5


def _stack_inputs(warped1, warped2, masks):
    m1, m2 = masks
    if not (warped1.shape == warped2.shape and m1.shape[-2:] == warped1.shape[-2:]
            and m2.shape[-2:] == warped1.shape[-2:]):
        raise BadShape("warped images and masks must share the canvas shape")
    return torch.cat([warped1, warped2, m1, m2], dim=1)


class ReconstructorNet(nn.Module):
    """Cells replace the three encoder and three decoder stages of a U-Net.

    Resampling lives between cells (average pool down, bilinear up) because
    cells preserve spatial size; mirrored stages are joined by additive skips,
    and the stem features are added back before the output convolution.
    """

    def __init__(self, config: ReconstructorConfig | None = None,
                 genotypes: list[Genotype] | None = None):
        super().__init__()
        self.config = config = config or ReconstructorConfig()
        c = config.channels
        genotypes = genotypes or [None] * N_CELLS
        self.stem = nn.Conv2d(2 * config.in_channels + 2, c, 3, padding=1)
        self.cells = nn.ModuleList(
            MixedCell(c, config.nodes) if g is None else FixedCell(g, c) for g in genotypes
        )
        self.head = nn.Conv2d(c, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.use_skips = True

    @property
    def genotypes(self):
        if all(isinstance(cell, FixedCell) for cell in self.cells):
            return [cell.genotype for cell in self.cells]
        return None

    def forward(self, warped1, warped2, masks):
        x = _stack_inputs(warped1, warped2, masks).to(self.stem.weight.dtype)
        x = stem = F.relu(self.stem(x))
        skips = []
        for cell in self.cells[:3]:
            x = cell(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2, ceil_mode=True)
        for cell, skip in zip(self.cells[3:], reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            if self.use_skips:
                x = x + skip
            x = cell(x)
        # cells normalise internally, so absolute intensity reaches the head
        # only through this outermost skip from the stem
        if self.use_skips:
            x = x + stem
        return torch.sigmoid(self.head(x))


def reconstruct(model: ReconstructorNet, warped1, warped2, masks) -> torch.Tensor:
    return model(warped1, warped2, masks)


def composite_baseline(warped1, warped2, masks) -> torch.Tensor:
    """Mask-weighted average of the two warped views; zero where neither is valid."""
    m1, m2 = masks
    total = m1 + m2
    blended = (warped1 * m1 + warped2 * m2) / total.clamp_min(1e-12)
    return torch.where(total > 0, blended, torch.zeros_like(blended))
