import numpy as np
import pytest
import torch

from ema_patch.evaluation.color import (
    color_difference,
    delta_e00,
    dominant_color,
    lab_to_srgb,
    srgb_to_lab,
)

from oracles import SHARMA_PAIRS

skcolor = pytest.importorskip("skimage.color")


@pytest.mark.parametrize("c1,c2,want", SHARMA_PAIRS)
def test_sharma_vectors(c1, c2, want):
    assert abs(delta_e00(c1, c2) - want) <= 1e-4
    assert delta_e00(c1, c2) == delta_e00(c2, c1)


def test_identical_is_zero():
    assert delta_e00((50, 10, -20), (50, 10, -20)) == 0.0
    assert delta_e00((0, 0, 0), (0, 0, 0)) == 0.0


def test_delta_e_matches_skimage_random():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0, 100, 200), rng.uniform(-100, 100, 200), rng.uniform(-100, 100, 200)])
    b = np.column_stack([rng.uniform(0, 100, 200), rng.uniform(-100, 100, 200), rng.uniform(-100, 100, 200)])
    ref = skcolor.deltaE_ciede2000(a, b)
    got = np.array([delta_e00(x, y) for x, y in zip(a, b)])
    assert np.abs(got - ref).max() < 1e-6


def test_srgb_lab_matches_skimage_and_roundtrips():
    rgb = np.random.default_rng(1).uniform(0, 1, (500, 3))
    lab = srgb_to_lab(rgb)
    # skimage rounds its sRGB matrix and white point differently; ~5e-3 Lab units apart
    assert np.abs(lab - skcolor.rgb2lab(rgb[None])[0]).max() < 1e-2
    assert np.abs(lab_to_srgb(lab) - rgb).max() < 1e-10
    white = srgb_to_lab([1.0, 1.0, 1.0])
    assert white[0] == pytest.approx(100.0, abs=1e-4) and abs(white[1]) < 1e-3 and abs(white[2]) < 1e-3


def test_dominant_color_uniform():
    img = torch.empty(3, 8, 8, dtype=torch.float64)
    img[0], img[1], img[2] = 0.2, 0.5, 0.7
    assert dominant_color(img).as_tuple() == tuple(float(v) for v in srgb_to_lab([0.2, 0.5, 0.7]))


def test_dominant_color_ninety_ten():
    img = np.zeros((10, 10, 3))
    img[..., 0] = 1.0
    img[9, :, :] = (0.0, 0.0, 1.0)
    got = dominant_color(img).as_tuple()
    assert np.allclose(got, srgb_to_lab([1.0, 0.0, 0.0]), atol=1e-9)


def test_dominant_color_noisy_majority():
    rng = np.random.default_rng(3)
    red = np.clip(np.array([0.9, 0.1, 0.1]) + rng.normal(0, 0.02, (90, 3)), 0, 1)
    blue = np.clip(np.array([0.1, 0.1, 0.9]) + rng.normal(0, 0.02, (10, 3)), 0, 1)
    img = np.vstack([red, blue]).reshape(10, 10, 3)
    got = np.array(dominant_color(img).as_tuple())
    assert np.linalg.norm(got - srgb_to_lab(red).mean(0)) < 1.0


def test_dominant_color_shuffle_invariant():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (12, 12, 3)).round(2)
    perm = rng.permutation(144)
    shuffled = img.reshape(-1, 3)[perm].reshape(12, 12, 3)
    assert dominant_color(img).as_tuple() == dominant_color(shuffled).as_tuple()


def test_dominant_color_accepts_chw_tensor_and_rejects_gray():
    img = torch.rand(3, 5, 5, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    assert dominant_color(img).as_tuple() == dominant_color(img.permute(1, 2, 0).numpy()).as_tuple()
    with pytest.raises(ValueError):
        dominant_color(np.zeros((4, 4)))


@pytest.mark.parametrize("c1,c2,want", SHARMA_PAIRS[16:24])
def test_color_difference_constant_images(c1, c2, want):
    # pairs whose Lab values lie inside the sRGB gamut can be rendered as flat images
    rgb1, rgb2 = lab_to_srgb(c1), lab_to_srgb(c2)
    if not (np.all((rgb1 >= 0) & (rgb1 <= 1)) and np.all((rgb2 >= 0) & (rgb2 <= 1))):
        pytest.skip("pair outside the sRGB gamut")
    a, b = np.broadcast_to(rgb1, (4, 4, 3)), np.broadcast_to(rgb2, (4, 4, 3))
    assert abs(color_difference(a, b) - want) < 1e-3
