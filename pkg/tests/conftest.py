import numpy as np
import pytest

from texelsplat import assets_io as aio


@pytest.fixture(scope="session")
def micro_scene(tmp_path_factory):
    """Tiny self-consistent scene for fast unit tests."""
    spec = aio.SyntheticSceneSpec(
        num_cameras=2, num_frames=2, image_width=48, image_height=48,
        texel_resolution=16, seed=3,
    )
    out = tmp_path_factory.mktemp("micro_scene")
    manifest = aio.make_synthetic_scene(spec, out)
    return aio.load_scene(manifest)


@pytest.fixture(scope="session")
def demo_scene_dir(tmp_path_factory):
    """The standard demo bundle (default generator spec, seed 7)."""
    out = tmp_path_factory.mktemp("demo_scene")
    aio.make_synthetic_scene(aio.SyntheticSceneSpec(), out)
    return out


@pytest.fixture(scope="session")
def demo_scene(demo_scene_dir):
    return aio.load_scene(demo_scene_dir / "scene.json")


def naive_ssim_2d(a, b, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Direct sliding-window SSIM oracle (no separable filtering, no scipy)."""
    x = np.arange(window) - (window - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    kernel = np.outer(g, g)
    pad = window // 2

    def stats(img):
        p = np.pad(img, pad)
        win = np.lib.stride_tricks.sliding_window_view(p, (window, window))
        return np.einsum("hwij,ij->hw", win, kernel)

    mu_a, mu_b = stats(a), stats(b)
    va = stats(a * a) - mu_a**2
    vb = stats(b * b) - mu_b**2
    vab = stats(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * vab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return s


def naive_ssim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        return float(naive_ssim_2d(a, b).mean())
    maps = [naive_ssim_2d(a[..., c], b[..., c]) for c in range(a.shape[-1])]
    return float(np.mean(maps))


def naive_loss_main(target, pred, w_pix=0.1, w_str=0.9):
    l1 = float(np.mean(np.abs(np.asarray(target) - np.asarray(pred))))
    return w_pix * l1 + w_str * (1.0 - naive_ssim(pred, target))
