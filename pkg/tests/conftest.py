import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(seed=0, size=32, channels=3, dtype=torch.float64, period=4):
    """Band-limited random image in [0.1, 0.9]: friendly to interpolation checks.

    Random values on a grid every ``period`` pixels, upsampled bicubically.
    """
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, channels, size // period, size // period, generator=g, dtype=dtype)
    img = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bicubic",
                                          align_corners=False)[0]
    return 0.1 + 0.8 * (img - img.min()) / (img.max() - img.min())


def random_perturbed_homography(rng, h=64, w=64, rho=8.0):
    from advstitch.geometry import dlt_solve, image_corners
    c = image_corners(h, w)
    off = torch.from_numpy(rng.uniform(-rho, rho, (4, 2)))
    return dlt_solve(c, c + off)


def toy_pair(seed=0, patch=64, rho=8.0):
    """One procedural pair as batched float32 tensors ``(x1, x2, H_gt)``."""
    from advstitch.data import make_synthetic_pair, procedural_image
    r = np.random.default_rng(seed)
    p = make_synthetic_pair(procedural_image(r, 2 * patch), patch, rho, r)
    return p.x1[None].float(), p.x2[None].float(), p.H_gt[None]


@pytest.fixture(scope="session")
def toy_data():
    from advstitch.data import make_synthetic_dataset
    return (make_synthetic_dataset(400, 11, n_sources=32),
            make_synthetic_dataset(100, 12, n_sources=16))
