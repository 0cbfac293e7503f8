"""Homography algebra, DLT, differentiable warping and canvas computation.

Coordinate convention: pixel centers sit at integer coordinates, origin at the
top-left pixel, x grows to the right and y grows downward. A homography ``H``
used for stitching maps coordinates of the second view into the frame of the
first view, so ``warp_image(x2, H)`` brings ``x2`` onto ``x1``.

All tensor functions accept either a single matrix ``(3, 3)`` or a batch
``(B, 3, 3)`` and are differentiable through autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import DegenerateConfiguration, ExcessiveCanvas

_DET_EPS = 1e-12


def normalize_homography(H: torch.Tensor) -> torch.Tensor:
    """Scale so that the bottom-right entry equals one."""
    return H / H[..., 2:3, 2:3]


@dataclass(frozen=True)
class Homography:
    """A single canonically normalized 3x3 projective transform (float64)."""

    matrix: torch.Tensor

    def __post_init__(self):
        m = torch.as_tensor(self.matrix, dtype=torch.float64).detach().clone()
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {tuple(m.shape)}")
        if not torch.isfinite(m).all() or abs(float(m[2, 2])) < _DET_EPS:
            raise DegenerateConfiguration("cannot normalize homography")
        m = m / m[2, 2]
        if abs(float(torch.linalg.det(m))) <= _DET_EPS:
            raise DegenerateConfiguration("homography is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(torch.eye(3, dtype=torch.float64))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(translation_matrix(tx, ty))

    @classmethod
    def from_row_major(cls, values: Sequence[float]) -> "Homography":
        values = [float(v) for v in values]
        if len(values) != 9:
            raise ValueError("expected 9 values")
        return cls(torch.tensor(values, dtype=torch.float64).reshape(3, 3))

    def to_row_major(self) -> list[float]:
        return [float(v) for v in self.matrix.reshape(-1)]

    def inverse(self) -> "Homography":
        return Homography(torch.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        return apply_homography(self.matrix, points)


def as_matrix(H) -> torch.Tensor:
    if isinstance(H, Homography):
        return H.matrix
    return torch.as_tensor(H)


def translation_matrix(tx: float, ty: float, dtype=torch.float64) -> torch.Tensor:
    m = torch.eye(3, dtype=dtype)
    m[0, 2] = tx
    m[1, 2] = ty
    return m


def apply_homography(H, points: torch.Tensor) -> torch.Tensor:
    """Map points ``(..., N, 2)`` through ``H`` ``(..., 3, 3)``."""
    H = as_matrix(H)
    points = points.to(H.dtype)
    ones = torch.ones_like(points[..., :1])
    ph = torch.cat([points, ones], dim=-1)
    q = ph @ H.transpose(-1, -2)
    return q[..., :2] / q[..., 2:3]


def image_corners(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Corner pixel centers in the order TL, TR, BR, BL, shape ``(4, 2)``."""
    return torch.tensor(
        [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]], dtype=dtype
    )


# ---------------------------------------------------------------------------
# DLT


def _hartley(points: torch.Tensor) -> torch.Tensor:
    """Similarity moving ``points`` (B, N, 2) to zero mean and RMS distance sqrt(2)."""
    mean = points.mean(dim=-2)
    rms = (points - mean.unsqueeze(-2)).pow(2).sum(-1).mean(-1).sqrt()
    s = math.sqrt(2.0) / rms.clamp_min(1e-300)
    B = points.shape[0]
    T = torch.zeros(B, 3, 3, dtype=points.dtype, device=points.device)
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * mean[:, 0]
    T[:, 1, 2] = -s * mean[:, 1]
    T[:, 2, 2] = 1.0
    return T


def _check_src_configuration(src: torch.Tensor) -> None:
    pts = src.detach()
    n = pts.shape[-2]
    if n != 4:
        return
    scale = (pts - pts.mean(-2, keepdim=True)).abs().amax(dim=(-1, -2)).clamp_min(1e-300)
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                d1 = pts[:, b] - pts[:, a]
                d2 = pts[:, c] - pts[:, a]
                area = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]).abs()
                if bool((area <= 1e-9 * scale**2).any()):
                    raise DegenerateConfiguration("three source points are collinear")


def dlt_solve(src: torch.Tensor, dst: torch.Tensor, cond_limit: float = 1e12) -> torch.Tensor:
    """Homography mapping ``src`` points onto ``dst`` points.

    ``src``/``dst`` have shape ``(N, 2)`` or ``(B, N, 2)`` with N >= 4. Four
    correspondences are solved exactly, more in the least-squares sense via the
    normal equations. Points are Hartley-normalized first and the bottom-right
    entry of the normalized transform is fixed to one, which keeps the system a
    plain linear solve that autograd differentiates directly.
    """
    single = src.dim() == 2
    if single:
        src, dst = src.unsqueeze(0), dst.unsqueeze(0)
    if src.shape != dst.shape or src.shape[-1] != 2:
        raise ValueError("src and dst must both have shape (..., N, 2)")
    n = src.shape[-2]
    if n < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {n}")
    dtype = torch.promote_types(src.dtype, dst.dtype)
    src, dst = src.to(dtype), dst.to(dtype)
    if not (bool(torch.isfinite(src).all()) and bool(torch.isfinite(dst).all())):
        raise DegenerateConfiguration("non-finite correspondences")
    _check_src_configuration(src)

    T1 = _hartley(src)
    T2 = _hartley(dst)
    ps = apply_homography(T1, src)
    pd = apply_homography(T2, dst)
    x, y = ps[..., 0], ps[..., 1]
    u, v = pd[..., 0], pd[..., 1]
    one, zero = torch.ones_like(x), torch.zeros_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -u * x, -u * y], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -v * x, -v * y], dim=-1)
    A = torch.stack([rows_u, rows_v], dim=-2).reshape(src.shape[0], 2 * n, 8)
    b = torch.stack([u, v], dim=-1).reshape(src.shape[0], 2 * n)
    if n > 4:
        At = A.transpose(-1, -2)
        A, b = At @ A, (At @ b.unsqueeze(-1)).squeeze(-1)
    with torch.no_grad():
        cond = torch.linalg.cond(A)
        if not bool(torch.isfinite(cond).all()) or bool((cond > cond_limit).any()):
            raise DegenerateConfiguration("DLT system is rank-deficient")
    h = torch.linalg.solve(A, b)
    Hn = torch.cat([h, torch.ones_like(h[:, :1])], dim=-1).reshape(-1, 3, 3)
    H = torch.linalg.inv(T2) @ Hn @ T1
    H = normalize_homography(H)
    return H[0] if single else H


def homography_from_offsets(offsets: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Homography moving the image corners by ``offsets`` (B, 4, 2)."""
    corners = image_corners(h, w, dtype=offsets.dtype).to(offsets.device)
    src = corners.expand(offsets.shape[0], 4, 2)
    return dlt_solve(src, src + offsets)


# ---------------------------------------------------------------------------
# Canvas


@dataclass(frozen=True)
class CanvasSpec:
    """Output frame of a warp: size plus an integer translation into it."""

    width: int
    height: int
    tx: int = 0
    ty: int = 0

    @property
    def offset(self) -> torch.Tensor:
        return translation_matrix(self.tx, self.ty)

    @classmethod
    def frame(cls, h: int, w: int) -> "CanvasSpec":
        return cls(width=w, height=h)

    def pad(self, p: int) -> "CanvasSpec":
        return CanvasSpec(self.width + 2 * p, self.height + 2 * p, self.tx + p, self.ty + p)


def canvas_from_homography(
    H,
    shape1: tuple[int, int],
    shape2: tuple[int, int],
    max_area_ratio: float = 16.0,
) -> CanvasSpec:
    """Smallest canvas containing frame 1 and frame 2 mapped through ``H``.

    A batch of homographies (or a list of them) yields the union canvas of all.
    """
    if isinstance(H, (list, tuple)):
        mats = torch.cat([as_matrix(m).detach().double().reshape(-1, 3, 3) for m in H])
    else:
        mats = as_matrix(H).detach().double().reshape(-1, 3, 3)
    h1, w1 = shape1
    h2, w2 = shape2
    c2 = image_corners(h2, w2)
    ones = torch.ones(4, 1, dtype=torch.float64)
    q = torch.cat([c2, ones], -1) @ mats.transpose(-1, -2)
    if not bool(torch.isfinite(q).all()) or bool((q[..., 2] <= 0).any()):
        raise ExcessiveCanvas("homography sends an image corner to infinity")
    mapped = (q[..., :2] / q[..., 2:3]).reshape(-1, 2)
    pts = torch.cat([image_corners(h1, w1), mapped])
    lo = torch.floor(pts.min(0).values + 1e-9)
    hi = torch.ceil(pts.max(0).values - 1e-9)
    width = int(hi[0] - lo[0]) + 1
    height = int(hi[1] - lo[1]) + 1
    if width * height > max_area_ratio * h1 * w1:
        raise ExcessiveCanvas(
            f"canvas {width}x{height} exceeds {max_area_ratio}x the input area"
        )
    return CanvasSpec(width=width, height=height, tx=int(-lo[0]), ty=int(-lo[1]))


# ---------------------------------------------------------------------------
# Warping


def _batched(H: torch.Tensor, batch: int) -> torch.Tensor:
    H = H.reshape(-1, 3, 3)
    if H.shape[0] == 1 and batch > 1:
        H = H.expand(batch, 3, 3)
    return H


def bilinear_sample(img: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (B, C, h, w) at float coordinates ``xs``/``ys`` (B, P).

    Neighbours outside the image contribute zero. The cell used for an exact
    integer coordinate is the one to its left/top, which fixes the one-sided
    derivative at grid lines.
    """
    B, C, h, w = img.shape
    x0f = torch.ceil(xs) - 1
    y0f = torch.ceil(ys) - 1
    wx = xs - x0f
    wy = ys - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    flat = img.reshape(B, C, h * w)
    out = None
    for dx, dy, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx)
        term = vals * (wgt * valid.to(wgt.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out


def warp_image(img: torch.Tensor, H, canvas: CanvasSpec | None = None) -> torch.Tensor:
    """Inverse-warp ``img`` by ``H`` onto ``canvas`` with bilinear sampling.

    Output pixel ``p`` takes the value of ``img`` at ``(offset @ H)^-1 p``;
    samples outside the source are zero. Differentiable in the pixel values and
    in the entries of ``H``.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    B, C, h, w = img.shape
    if canvas is None:
        canvas = CanvasSpec.frame(h, w)
    Hm = as_matrix(H)
    cdtype = torch.promote_types(Hm.dtype, img.dtype)
    Hm = _batched(Hm.to(cdtype), B)
    if Hm.shape[0] != B:
        B = Hm.shape[0]
        img = img.expand(B, C, h, w)
    full = canvas.offset.to(cdtype) @ Hm
    inv = torch.linalg.inv(full)
    ys, xs = torch.meshgrid(
        torch.arange(canvas.height, dtype=cdtype),
        torch.arange(canvas.width, dtype=cdtype),
        indexing="ij",
    )
    grid = torch.stack([xs.reshape(-1), ys.reshape(-1), torch.ones(xs.numel(), dtype=cdtype)])
    src = inv @ grid
    sx = (src[:, 0] / src[:, 2]).to(img.dtype)
    sy = (src[:, 1] / src[:, 2]).to(img.dtype)
    out = bilinear_sample(img, sx, sy).reshape(B, C, canvas.height, canvas.width)
    return out[0] if squeeze else out


def shared_mask(H, shape: tuple[int, int], canvas: CanvasSpec | None = None,
                dtype=torch.float32) -> torch.Tensor:
    """Warp of an all-ones image of ``shape``: the support of the moved view."""
    h, w = shape
    ones = torch.ones(1, 1, h, w, dtype=dtype)
    if canvas is None:
        canvas = CanvasSpec.frame(h, w)
    return warp_image(ones, H, canvas)


def scale_homography(H: torch.Tensor, factor: int) -> torch.Tensor:
    """Express a full-resolution homography on a grid average-pooled by ``factor``."""
    s = float(factor)
    c = (s - 1.0) / 2.0
    up = torch.tensor([[s, 0.0, c], [0.0, s, c], [0.0, 0.0, 1.0]], dtype=H.dtype)
    return torch.linalg.inv(up) @ H @ up


# ---------------------------------------------------------------------------
# Metrics


def corner_error(H, H_gt, shape: tuple[int, int]) -> torch.Tensor:
    """Mean Euclidean distance between the four corners mapped by ``H`` and ``H_gt``."""
    H, H_gt = as_matrix(H), as_matrix(H_gt)
    dtype = torch.promote_types(H.dtype, H_gt.dtype)
    c = image_corners(*shape, dtype=dtype)
    a = apply_homography(H.to(dtype), c)
    b = apply_homography(H_gt.to(dtype), c)
    return (a - b).norm(dim=-1).mean(dim=-1)
