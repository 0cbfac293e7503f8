"""Three-level pyramid homography estimator with global correlation heads.

Each level correlates every position of the first view's features with every
position of the second view's, turns the volume into a dense displacement
field by soft-argmax, and regresses displacements of the four image corners
from that field. Finer levels first warp the second view's features by the
homography accumulated so far and regress a residual. The final homography is
the DLT fit of the accumulated corner displacements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cells import FixedCell, Genotype, MixedCell
from .errors import BadShape, ShapeMismatch
from .geometry import homography_from_offsets, image_corners, scale_homography, warp_image

LEVELS = 3


@dataclass
class EstimatorConfig:
    in_channels: int = 3
    channels: int = 32
    nodes: int = 5
    # correlation is computed on features pooled to at most this many cells per side
    corr_grid: int = 16
    # the displacement field is pooled to this grid before the fully connected head
    head_grid: int = 8
    hidden: int = 128
    # side of the finest pyramid level; None means the input size
    base_size: int | None = None
    init_temperature: float = 0.02
    # subtract an affine least-squares fit of the flow from the head output
    # (off by default: it breaks identity-at-init and hurt accuracy in practice)
    affine_prior: bool = False
    # Bound on the corner displacement regressed at each level, in pixels.
    rho_max: tuple[float, float, float] = (16.0, 4.0, 2.0)


def global_correlation(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every position of ``f1`` and every position of ``f2``.

    Inputs are ``(B, C, h, w)``; the result is ``(B, h*w, h*w)`` with entry
    ``(i, j)`` comparing position ``i`` of ``f1`` with position ``j`` of ``f2``.
    """
    if f1.shape != f2.shape:
        raise ShapeMismatch(f"{tuple(f1.shape)} vs {tuple(f2.shape)}")
    a = F.normalize(f1.flatten(2), dim=1, eps=1e-12)
    b = F.normalize(f2.flatten(2), dim=1, eps=1e-12)
    return a.transpose(1, 2) @ b


def affine_corner_operator(grid: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Linear map from a ``grid x grid`` displacement field to corner displacements.

    Fits an affine displacement field by least squares over the cell centres
    and evaluates it at the four image corners. Returns ``(4, grid*grid)``.
    """
    i = torch.arange(grid, dtype=torch.float64) + 0.5
    ys, xs = torch.meshgrid(i * h / grid - 0.5, i * w / grid - 0.5, indexing="ij")
    X = torch.stack([xs.reshape(-1), ys.reshape(-1), torch.ones(grid * grid, dtype=torch.float64)], 1)
    corners = image_corners(h, w)
    C = torch.cat([corners, torch.ones(4, 1, dtype=torch.float64)], 1)
    return (C @ torch.linalg.pinv(X)).to(dtype)


def _make_cell(channels, nodes, genotype):
    if genotype is None:
        return MixedCell(channels, nodes)
    return FixedCell(genotype, channels)


class EstimatorNet(nn.Module):
    """Siamese pyramid encoder plus one regression head per level.

    With ``genotypes=None`` every cell is a searchable ``MixedCell``; otherwise
    one ``Genotype`` per level (coarsest first) fixes the architecture.
    """

    def __init__(self, config: EstimatorConfig | None = None,
                 genotypes: list[Genotype] | None = None):
        super().__init__()
        self.config = config = config or EstimatorConfig()
        c = config.channels
        genotypes = genotypes or [None] * LEVELS
        # stems[2] is the full-resolution stem; coarser stems see pooled features
        self.stems = nn.ModuleList([
            nn.Conv2d(c, c, 3, padding=1),
            nn.Conv2d(c, c, 3, padding=1),
            nn.Conv2d(config.in_channels, c, 3, padding=1),
        ])
        self.cells = nn.ModuleList(_make_cell(c, config.nodes, g) for g in genotypes)
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(2 * config.head_grid ** 2, config.hidden), nn.ReLU(), nn.Linear(config.hidden, 8))
            for _ in range(LEVELS)
        )
        self.log_temperature = nn.Parameter(
            torch.full((LEVELS,), math.log(config.init_temperature)))
        for head in self.heads:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    @property
    def genotypes(self) -> list[Genotype] | None:
        if all(isinstance(cell, FixedCell) for cell in self.cells):
            return [cell.genotype for cell in self.cells]
        return None

    def _base_factor(self, side: int) -> int:
        base = self.config.base_size or side
        if side % base or base % 4:
            raise BadShape(f"input side {side} must be a multiple of base size {base} (itself divisible by 4)")
        return side // base

    def extract_pyramid(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Features at 1/4, 1/2 and 1 times the base resolution (coarsest first)."""
        if img.dim() != 4 or img.shape[-1] != img.shape[-2] or img.shape[-1] % 4:
            raise BadShape(f"expected square images with side divisible by 4, got {tuple(img.shape)}")
        r = self._base_factor(img.shape[-1])
        img = img.to(self.stems[2].weight.dtype)
        if r > 1:
            img = F.avg_pool2d(img, r)
        fine = self.cells[2](F.relu(self.stems[2](img)))
        mid = self.cells[1](F.relu(self.stems[1](F.avg_pool2d(fine, 2))))
        coarse = self.cells[0](F.relu(self.stems[0](F.avg_pool2d(mid, 2))))
        return [coarse, mid, fine]

    def _displacement_field(self, fa, fb, level, cell_px):
        """Soft-argmax match of every ``fa`` cell in ``fb``, as displacements in input pixels."""
        g = min(self.config.corr_grid, fa.shape[-1])
        fa, fb = F.adaptive_avg_pool2d(fa, g), F.adaptive_avg_pool2d(fb, g)
        # rectified features share a large common component; removing the
        # per-channel mean keeps the cosine from saturating near 1 everywhere
        fa = fa - fa.mean((2, 3), keepdim=True)
        fb = fb - fb.mean((2, 3), keepdim=True)
        corr = global_correlation(fa, fb)
        attn = torch.softmax(corr / self.log_temperature[level].exp(), dim=-1)
        ys, xs = torch.meshgrid(torch.arange(g, dtype=attn.dtype),
                                torch.arange(g, dtype=attn.dtype), indexing="ij")
        pos = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
        match = attn @ pos
        flow = ((match - pos) * cell_px).transpose(1, 2).reshape(-1, 2, g, g)
        return F.adaptive_avg_pool2d(flow, self.config.head_grid)

    def estimate(self, x1: torch.Tensor, x2: torch.Tensor):
        """Return ``(H, offsets)``: H maps x2 into x1; offsets is one (B, 4, 2) per level."""
        if x1.shape != x2.shape:
            raise BadShape(f"pair shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        B, _, h, w = x1.shape
        feats = self.extract_pyramid(torch.cat([x1, x2]))
        r = self._base_factor(w)
        total = torch.zeros(B, 4, 2, dtype=torch.float64)
        offsets = []
        for level, f in enumerate(feats):
            fa, fb = f[:B], f[B:]
            factor = r * 2 ** (LEVELS - 1 - level)
            if level > 0:
                H = homography_from_offsets(total, h, w)
                fb = warp_image(fb, scale_homography(H, factor))
            rho = self.config.rho_max[level]
            cell_px = w / min(self.config.corr_grid, fa.shape[-1])
            flow = self._displacement_field(fa, fb, level, cell_px)
            # an x1 position p matches x2 position p + u(p), so H moves corners by about -u
            raw = self.heads[level](flow.flatten(1) / rho)
            if self.config.affine_prior:
                P = affine_corner_operator(self.config.head_grid, h, w, flow.dtype)
                raw = raw - (P @ flow.flatten(2).transpose(1, 2)).flatten(1) / rho
            d = (torch.tanh(raw) * rho).view(B, 4, 2).double()
            offsets.append(d)
            total = total + d
        return homography_from_offsets(total, h, w), offsets

    def forward(self, x1, x2):
        return self.estimate(x1, x2)[0]


def extract_pyramid(model: EstimatorNet, img: torch.Tensor) -> list[torch.Tensor]:
    return model.extract_pyramid(img)


def estimate_homography(model: EstimatorNet, x1: torch.Tensor, x2: torch.Tensor):
    return model.estimate(x1, x2)
