import math

import numpy as np
import pytest
import torch

from advstitch.data import (DatasetManifest, ManifestRecord, PairDataset, ingest_real_pairs, load_image,
                            load_manifest_pairs, make_synthetic_dataset, make_synthetic_pair, procedural_image,
                            save_image, split)
from advstitch.errors import BadFractions, ImageTooSmall, UnpairedFile, UnreadableImage
from advstitch.geometry import apply_homography, corner_error, dlt_solve, image_corners
from advstitch.losses import loss_S

EYE = torch.eye(3, dtype=torch.float64)


@pytest.fixture(scope="module")
def sources():
    rng = np.random.default_rng(0)
    return [procedural_image(rng, 128) for _ in range(10)]


def test_procedural_image_range_and_determinism():
    a = procedural_image(np.random.default_rng(3), 64)
    b = procedural_image(np.random.default_rng(3), 64)
    assert a.shape == (3, 64, 64) and torch.equal(a, b)
    assert float(a.min()) >= 0 and float(a.max()) <= 1
    assert float(a.std()) > 0.05
    assert not torch.equal(a, procedural_image(np.random.default_rng(4), 64))


def test_zero_rho_gives_identical_views(sources):
    p = make_synthetic_pair(sources[0], 64, 0.0, np.random.default_rng(1))
    assert torch.allclose(p.H_gt, EYE, atol=1e-12)
    assert torch.equal(p.x1, p.x2)


def test_corner_error_bounded_by_rho(sources):
    rng = np.random.default_rng(2)
    for i in range(200):
        rho = float(rng.uniform(0.5, 10))
        p = make_synthetic_pair(sources[i % 10], 64, rho, rng)
        assert float(corner_error(EYE, p.H_gt, (64, 64))) <= rho * math.sqrt(2) + 1e-9
        assert float(p.offsets.abs().max()) <= rho


def test_dlt_on_true_corners_reproduces_ground_truth(sources):
    rng = np.random.default_rng(3)
    for i in range(50):
        p = make_synthetic_pair(sources[i % 10], 64, 8.0, rng)
        c = image_corners(64, 64)
        assert torch.allclose(dlt_solve(c, c + p.offsets), p.H_gt, atol=1e-6)
        assert torch.allclose(apply_homography(p.H_gt, c), c + p.offsets, atol=1e-6)


def _bilinear(img, x, y):
    """Plain numpy bilinear sample of a (C, H, W) array at one point."""
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    a, b = img[:, y0, x0], img[:, y0, x0 + 1]
    c, d = img[:, y0 + 1, x0], img[:, y0 + 1, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def test_x2_is_inverse_warp_of_source(sources):
    src = sources[1].double().numpy()
    p = make_synthetic_pair(sources[1], 64, 8.0, np.random.default_rng(4))
    x1 = p.x1.double().numpy()
    where = [(py, px) for py in range(128 - 63) for px in range(128 - 63)
             if np.array_equal(src[:, py:py + 64, px:px + 64], x1)]
    assert len(where) == 1
    py, px = where[0]
    x2 = p.x2.double().numpy()
    g = np.random.default_rng(0)
    for _ in range(50):
        u, v = (float(t) for t in g.uniform(0, 63, 2))
        i, j = int(round(v)), int(round(u))
        q = apply_homography(p.H_gt, torch.tensor([[float(j), float(i)]], dtype=torch.float64))[0].numpy()
        expected = _bilinear(src, q[0] + px, q[1] + py)
        assert np.allclose(x2[:, i, j], expected, atol=1e-5)


def test_construction_consistency_floor(sources):
    rng = np.random.default_rng(0)
    floors, ratios = [], []
    for i in range(100):
        p = make_synthetic_pair(sources[i % 10], 64, 8.0, rng)
        n = p.x1.numel() ** 0.5
        gt = float(loss_S(p.x1[None], p.x2[None], p.H_gt[None])) / n
        ident = float(loss_S(p.x1[None], p.x2[None], EYE[None])) / n
        floors.append(gt)
        ratios.append(ident / gt)
    print(f"interpolation floor: max rms {max(floors):.4f}, min wrong/right ratio {min(ratios):.2f}")
    assert max(floors) < 0.05
    assert min(ratios) > 2.0


def test_pair_determinism(sources):
    a = make_synthetic_pair(sources[2], 64, 8.0, np.random.default_rng(9))
    b = make_synthetic_pair(sources[2], 64, 8.0, np.random.default_rng(9))
    assert torch.equal(a.x1, b.x1) and torch.equal(a.x2, b.x2) and torch.equal(a.H_gt, b.H_gt)


def test_image_too_small():
    img = torch.rand(3, 80, 80)
    with pytest.raises(ImageTooSmall):
        make_synthetic_pair(img, 64, 8.0, np.random.default_rng(0))
    make_synthetic_pair(torch.rand(3, 81, 81), 64, 8.0, np.random.default_rng(0))


def test_synthetic_dataset_shapes_and_ids():
    ds = make_synthetic_dataset(7, 3, patch_size=32, rho=4.0, n_sources=3, source_size=64)
    assert ds.x1.shape == (7, 3, 32, 32) and ds.H_gt.shape == (7, 3, 3)
    assert len(set(ds.ids)) == 7
    again = make_synthetic_dataset(7, 3, patch_size=32, rho=4.0, n_sources=3, source_size=64)
    assert torch.equal(ds.x2, again.x2)
    assert len(make_synthetic_dataset(0, 3)) == 0


def test_pair_dataset_batching():
    ds = make_synthetic_dataset(5, 1, patch_size=32, rho=4.0, n_sources=2, source_size=64)
    batches = list(ds.batches(2, order=[4, 3, 2, 1, 0]))
    assert [len(b) for b in batches] == [2, 2, 1]
    assert batches[0].ids == [ds.ids[4], ds.ids[3]]
    joined = PairDataset.concat(batches)
    assert torch.equal(joined.x1, ds.x1.flip(0))


def test_image_io_round_trip(tmp_path):
    img = torch.rand(3, 10, 12)
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert back.shape == (3, 10, 12)
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6
    assert load_image(tmp_path / "a.png", size=16).shape == (3, 16, 16)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableImage):
        load_image(tmp_path / "bad.png")


def _write_pair(d, name, seed=0, size=20):
    g = torch.Generator().manual_seed(seed)
    save_image(torch.rand(3, size, size, generator=g), d / f"{name}_1.png")
    save_image(torch.rand(3, size, size + 4, generator=g), d / f"{name}_2.png")


def test_ingest_empty_directory(tmp_path):
    assert len(ingest_real_pairs(tmp_path)) == 0


def test_ingest_three_pairs_sorted(tmp_path):
    for i, name in enumerate(["cc", "aa", "bb"]):
        _write_pair(tmp_path, name, i)
    (tmp_path / "notes.txt").write_text("ignored")
    m = ingest_real_pairs(tmp_path, target_size=32)
    assert [r.id for r in m.records] == ["aa", "bb", "cc"]
    assert m.records[0].orig_size == "20x20;20x24" and m.records[0].target_size == "32x32"
    ds = load_manifest_pairs(m)
    assert ds.x1.shape == (3, 3, 32, 32) and ds.H_gt is None


def test_ingest_orphan_is_named(tmp_path):
    _write_pair(tmp_path, "ok")
    save_image(torch.rand(3, 8, 8), tmp_path / "lonely_1.png")
    with pytest.raises(UnpairedFile, match="lonely_1.png"):
        ingest_real_pairs(tmp_path)


def test_ingest_unreadable(tmp_path):
    _write_pair(tmp_path, "ok")
    (tmp_path / "broken_1.png").write_bytes(b"xx")
    (tmp_path / "broken_2.png").write_bytes(b"xx")
    with pytest.raises(UnreadableImage):
        ingest_real_pairs(tmp_path)


def _manifest(n):
    return DatasetManifest(tuple(
        ManifestRecord(f"p{i}", "synthetic", "train", 0, f"a{i}.png", f"b{i}.png", h_gt=tuple(float(v) for v in range(9)))
        for i in range(n)))


def test_split_examples():
    m = _manifest(10)
    assert {r.split for r in split(m, [1.0], 0).records} == {"train"}
    half = split(m, [0.5, 0.5], 0)
    assert [r.split for r in half.records].count("train") == 5
    assert len(half.by_split("val")) == 5
    assert split(m, [0.5, 0.5], 0) == half
    assert [r.id for r in split(m, [0.5, 0.5], 1).records] != [r.id for r in half.records]
    three = split(m, [0.6, 0.2, 0.2], 4)
    ids = [set(r.id for r in three.by_split(s).records) for s in ("train", "val", "test")]
    assert sum(map(len, ids)) == 10 and not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


@pytest.mark.parametrize("fractions", [[0.5, 0.4], [1.2, -0.2], [], [0.25] * 4])
def test_split_bad_fractions(fractions):
    with pytest.raises(BadFractions):
        split(_manifest(4), fractions, 0)


def test_manifest_round_trip(tmp_path):
    m = split(_manifest(6), [0.5, 0.5], 2)
    m.save(tmp_path / "m.tsv")
    back = DatasetManifest.load(tmp_path / "m.tsv")
    assert back == m and back.hash() == m.hash()
    assert (tmp_path / "m.tsv").read_text().startswith("#id\t")
