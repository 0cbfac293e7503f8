"""Synthetic stitching pairs, real-pair ingestion and dataset manifests.

Synthetic pairs follow the four-point recipe: cut a square patch ``x1`` from a
source image, move its corners by uniform offsets in ``[-rho, rho]``, fit
``H_gt`` (original corners -> moved corners) and resample the moved quadrilateral
into ``x2``. ``H_gt`` maps ``x2`` coordinates into ``x1``'s frame.

Real pairs live in one directory as ``<name>_1.<ext>`` / ``<name>_2.<ext>``.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import BadFractions, ImageTooSmall, UnpairedFile, UnreadableImage
from .geometry import CanvasSpec, dlt_solve, image_corners, translation_matrix, warp_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Image I/O


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Read an 8-bit image as float ``(3, H, W)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def save_image(img: torch.Tensor, path) -> None:
    """Write a ``(C, H, W)`` float image in [0, 1] as 8-bit PNG."""
    arr = img.detach().double().clamp(0, 1).mul(255).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# Procedural source images


def procedural_image(rng: np.random.Generator, size: int = 128, channels: int = 3) -> torch.Tensor:
    """Textured test image: multi-octave colour noise overlaid with random shapes and strokes.

    Plenty of sharp edges at several scales keep every patch locally distinctive,
    which photometric alignment needs.
    """
    img = torch.zeros(1, channels, size, size, dtype=torch.float64)
    for octave, cells in enumerate((4, 8, 16, 32, 64)):
        noise = torch.from_numpy(rng.random((1, channels, cells, cells)))
        up = F.interpolate(noise, size=(size, size), mode="bicubic", align_corners=False)
        img += up / (1.3 ** octave)
    img = img[0]
    img = (img - img.amin()) / (img.amax() - img.amin())
    yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float64),
                            torch.arange(size, dtype=torch.float64), indexing="ij")
    area = (size / 128) ** 2
    for _ in range(int(rng.integers(40, 70) * area)):
        colour = torch.from_numpy(rng.random(channels)).view(-1, 1, 1)
        cx, cy = rng.uniform(0, size, 2)
        kind = rng.random()
        if kind < 0.35:
            rx, ry = rng.uniform(size / 48, size / 10, 2)
            inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        elif kind < 0.7:
            rx, ry = rng.uniform(size / 48, size / 10, 2)
            inside = ((xx - cx).abs() <= rx) & ((yy - cy).abs() <= ry)
        else:
            # straight stroke of random orientation and length
            theta = rng.uniform(0, math.pi)
            half = rng.uniform(size / 16, size / 4)
            width = rng.uniform(0.8, 2.5)
            u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
            v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
            inside = (u.abs() <= half) & (v.abs() <= width)
        alpha = rng.uniform(0.6, 1.0)
        img = torch.where(inside, (1 - alpha) * img + alpha * colour, img)
    return img.float().clamp(0, 1)


# ---------------------------------------------------------------------------
# Synthetic pairs


@dataclass
class SyntheticPair:
    x1: torch.Tensor
    x2: torch.Tensor
    H_gt: torch.Tensor
    rho: float
    source_id: str = ""
    corners: torch.Tensor | None = None
    offsets: torch.Tensor | None = None


def make_synthetic_pair(image: torch.Tensor, patch_size: int, rho: float,
                        rng: np.random.Generator, source_id: str = "") -> SyntheticPair:
    """Cut a patch pair related by a random four-corner perturbation of at most ``rho``."""
    _, h, w = image.shape
    margin = int(math.ceil(rho))
    if h <= patch_size + 2 * margin or w <= patch_size + 2 * margin:
        raise ImageTooSmall(
            f"image {h}x{w} must exceed patch {patch_size} + 2*rho ({2 * margin}) in both dimensions"
        )
    px = int(rng.integers(margin, w - patch_size - margin))
    py = int(rng.integers(margin, h - patch_size - margin))
    offsets = torch.from_numpy(rng.uniform(-rho, rho, size=(4, 2)))
    corners = image_corners(patch_size, patch_size)
    H_gt = dlt_solve(corners, corners + offsets)
    x1 = image[:, py:py + patch_size, px:px + patch_size].clone()
    # x2(p) = source(H_gt p) in patch-local coordinates
    to_local = translation_matrix(-px, -py)
    frame = CanvasSpec.frame(patch_size, patch_size)
    x2 = warp_image(image.double(), torch.linalg.inv(H_gt) @ to_local, frame).to(image.dtype)
    return SyntheticPair(x1=x1, x2=x2, H_gt=H_gt, rho=float(rho), source_id=source_id,
                         corners=corners, offsets=offsets)


@dataclass
class PairDataset:
    """In-memory stack of pairs: ``x1``/``x2`` are ``(N, C, H, W)``, ``H_gt`` is ``(N, 3, 3)``."""

    x1: torch.Tensor
    x2: torch.Tensor
    H_gt: torch.Tensor | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.x1.shape[0]

    def subset(self, index) -> "PairDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        H = None if self.H_gt is None else self.H_gt[index]
        ids = [self.ids[i] for i in index.tolist()] if self.ids else []
        return PairDataset(self.x1[index], self.x2[index], H, ids)

    def batches(self, batch_size: int, order: Sequence[int] | None = None) -> Iterator["PairDataset"]:
        order = list(range(len(self))) if order is None else list(order)
        for start in range(0, len(order), batch_size):
            yield self.subset(order[start:start + batch_size])

    @staticmethod
    def concat(parts: Sequence["PairDataset"]) -> "PairDataset":
        H = None if any(p.H_gt is None for p in parts) else torch.cat([p.H_gt for p in parts])
        return PairDataset(torch.cat([p.x1 for p in parts]), torch.cat([p.x2 for p in parts]),
                           H, [i for p in parts for i in p.ids])


def make_synthetic_dataset(n_pairs: int, seed: int, patch_size: int = 64, rho: float = 8.0,
                           n_sources: int = 32, source_size: int = 128,
                           channels: int = 3) -> PairDataset:
    """``n_pairs`` pairs cut from ``n_sources`` procedural images, all derived from ``seed``."""
    if n_pairs == 0:
        empty = torch.zeros(0, channels, patch_size, patch_size)
        return PairDataset(empty, empty.clone(), torch.zeros(0, 3, 3, dtype=torch.float64), [])
    rng = np.random.default_rng(seed)
    sources = [procedural_image(rng, source_size, channels) for _ in range(max(1, n_sources))]
    pairs = []
    for i in range(n_pairs):
        s = i % len(sources)
        pairs.append(make_synthetic_pair(sources[s], patch_size, rho, rng, f"{seed}-{s}-{i}"))
    return PairDataset(
        torch.stack([p.x1 for p in pairs]),
        torch.stack([p.x2 for p in pairs]),
        torch.stack([p.H_gt for p in pairs]),
        [p.source_id for p in pairs],
    )


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    role: str
    split: str
    seed: int
    path1: str
    path2: str
    orig_size: str = ""
    target_size: str = ""
    h_gt: tuple[float, ...] = ()

    COLUMNS = ("id", "role", "split", "seed", "path1", "path2", "orig_size", "target_size", "h_gt")

    def to_line(self) -> str:
        h = ",".join(repr(float(v)) for v in self.h_gt)
        vals = (self.id, self.role, self.split, str(self.seed), self.path1, self.path2,
                self.orig_size, self.target_size, h)
        return "\t".join(vals)

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.COLUMNS):
            raise ValueError(f"manifest line has {len(parts)} fields, expected {len(cls.COLUMNS)}")
        rid, role, split_, seed, p1, p2, orig, target, h = parts
        h_gt = tuple(float(v) for v in h.split(",")) if h else ()
        return cls(rid, role, split_, int(seed), p1, p2, orig, target, h_gt)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...] = ()

    def __len__(self):
        return len(self.records)

    def to_text(self) -> str:
        lines = ["#" + "\t".join(ManifestRecord.COLUMNS)]
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        return cls(tuple(ManifestRecord.from_line(ln) for ln in rows))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text())

    def by_split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(tuple(r for r in self.records if r.split == name))


_PAIR_RE = re.compile(r"^(?P<stem>.+)_(?P<view>[12])$")


def ingest_real_pairs(directory, target_size: int = 64, seed: int = 0) -> DatasetManifest:
    """Index ``<name>_1.*``/``<name>_2.*`` image pairs in ``directory``, sorted by name."""
    directory = Path(directory)
    views: dict[str, dict[str, Path]] = {}
    for path in sorted(directory.iterdir()) if directory.exists() else []:
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _PAIR_RE.match(path.stem)
        if m is None:
            raise UnpairedFile(f"{path.name} does not follow the <name>_1/<name>_2 pattern")
        views.setdefault(m["stem"], {})[m["view"]] = path
    records = []
    for stem in sorted(views):
        pair = views[stem]
        if set(pair) != {"1", "2"}:
            orphan = next(iter(pair.values()))
            raise UnpairedFile(f"{orphan.name} has no partner view")
        sizes = []
        for view in ("1", "2"):
            try:
                with Image.open(pair[view]) as im:
                    sizes.append(f"{im.height}x{im.width}")
            except (UnidentifiedImageError, OSError) as exc:
                raise UnreadableImage(f"{pair[view]}: {exc}") from exc
        records.append(ManifestRecord(
            id=stem, role="real", split="test", seed=seed,
            path1=str(pair["1"]), path2=str(pair["2"]),
            orig_size=";".join(sizes), target_size=f"{target_size}x{target_size}",
        ))
    return DatasetManifest(tuple(records))


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> DatasetManifest:
    """Shuffle with ``seed`` and relabel records train/val/test by ``fractions``."""
    fractions = list(fractions)
    if not 1 <= len(fractions) <= len(SPLITS) or any(f < 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be 1-3 non-negative values summing to 1, got {fractions}")
    n = len(manifest)
    perm = np.random.default_rng(seed).permutation(n)
    counts = _split_counts(n, fractions)
    labels = [name for name, c in zip(SPLITS, counts) for _ in range(c)]
    records = [replace(manifest.records[int(i)], split=label) for i, label in zip(perm, labels)]
    return DatasetManifest(tuple(records))


def load_manifest_pairs(manifest: DatasetManifest, root=".", size: int | None = None) -> PairDataset:
    """Materialize manifest records as a ``PairDataset`` (``H_gt`` only if every record has one)."""
    root = Path(root)
    x1, x2, hs, ids = [], [], [], []
    for r in manifest.records:
        target = size
        if target is None and r.target_size:
            target = int(r.target_size.split("x")[0])
        x1.append(load_image(root / r.path1, target))
        x2.append(load_image(root / r.path2, target))
        hs.append(torch.tensor(r.h_gt, dtype=torch.float64).reshape(3, 3) if r.h_gt else None)
        ids.append(r.id)
    if not x1:
        s = size or 64
        return PairDataset(torch.zeros(0, 3, s, s), torch.zeros(0, 3, s, s), None, [])
    H = None if any(h is None for h in hs) else torch.stack(hs)
    return PairDataset(torch.stack(x1), torch.stack(x2), H, ids)
