import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ema_patch.patch import (
    apply_perturbation,
    clip_patch,
    composite,
    load_patch,
    project_linf,
    project_linf_,
    save_patch,
    sidecar_path,
    zero_perturbation,
)

from conftest import analytic_gradient, fd_gradient, rel_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def full(v, s=2):
    return torch.full((3, s, s), v, dtype=torch.float64)


@pytest.mark.parametrize("v,expected", [(1.3, 1.0), (-0.2, 0.0), (0.5, 0.5)])
def test_clip_examples(v, expected):
    assert torch.equal(clip_patch(full(v), 1.0), full(expected))


def test_clip_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        clip_patch(full(0.5), 0.0)
    with pytest.raises(ValueError):
        clip_patch(full(0.5), -1.0)


@given(arrays("float64", (3, 4, 4), elements=finite), st.floats(0.1, 2.0))
def test_clip_idempotent_and_in_range(a, tau):
    p = torch.from_numpy(a)
    once = clip_patch(p, tau)
    assert torch.equal(clip_patch(once, tau), once)
    assert float(once.min()) >= 0 and float(once.max()) <= tau


def test_apply_perturbation_examples():
    assert torch.equal(apply_perturbation(full(0.5), full(0.0)), full(0.5))
    assert torch.equal(apply_perturbation(full(0.9), full(0.3), 1.0), full(1.0))
    assert torch.allclose(apply_perturbation(full(0.2), full(-0.1)), full(0.1), rtol=0, atol=1e-15)


def test_apply_perturbation_is_pure_and_checks_shape():
    init = full(0.4)
    before = init.clone()
    apply_perturbation(init, full(0.3))
    assert torch.equal(init, before)
    with pytest.raises(ValueError):
        apply_perturbation(init, torch.zeros(3, 3, 3, dtype=torch.float64))


@given(arrays("float64", (3, 3, 3), elements=st.floats(0, 1)), arrays("float64", (3, 3, 3), elements=finite))
def test_apply_perturbation_range(init, d):
    out = apply_perturbation(torch.from_numpy(init), torch.from_numpy(d))
    assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_zero_perturbation():
    assert torch.equal(zero_perturbation(full(0.7)), full(0.0))


@pytest.mark.parametrize("v,expected", [(0.8, 0.6), (-0.7, -0.6), (0.3, 0.3)])
def test_project_linf_examples(v, expected):
    assert torch.equal(project_linf(full(v), 0.6), full(expected))


@given(arrays("float64", (3, 4, 4), elements=finite), st.floats(0.01, 3))
def test_project_linf_bound(a, bound):
    d = torch.from_numpy(a)
    assert float(project_linf(d, bound).abs().max()) <= bound
    leaf = d.clone().requires_grad_(True)
    project_linf_(leaf, bound)
    assert float(leaf.detach().abs().max()) <= bound


def test_project_linf_identity_inside_bound():
    d = torch.rand(3, 4, 4, dtype=torch.float64) * 0.5
    assert torch.equal(project_linf(d, 0.6), d)


def test_composite_mask_extremes():
    scene = torch.rand(3, 4, 5, dtype=torch.float64)
    layer = torch.rand(3, 4, 5, dtype=torch.float64)
    assert torch.equal(composite(scene, layer, torch.zeros(4, 5)), scene)
    assert torch.equal(composite(scene, layer, torch.ones(4, 5)), layer)


def test_composite_checkerboard_per_pixel():
    g = torch.Generator().manual_seed(0)
    scene = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    layer = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    mask = torch.tensor([[(i + j) % 2 for j in range(5)] for i in range(5)], dtype=torch.float64)
    out = composite(scene, layer, mask)
    for c in range(3):
        for i in range(5):
            for j in range(5):
                want = layer[c, i, j] if (i + j) % 2 else scene[c, i, j]
                assert out[c, i, j].item() == want.item()


def test_composite_dimension_mismatch():
    s = torch.zeros(3, 4, 4, dtype=torch.float64)
    with pytest.raises(ValueError):
        composite(s, torch.zeros(3, 4, 5, dtype=torch.float64), torch.zeros(4, 4))
    with pytest.raises(ValueError):
        composite(s, s, torch.zeros(4, 5))


def test_composite_gradient_equals_mask():
    g = torch.Generator().manual_seed(1)
    scene = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    mask = (torch.rand(5, 5, generator=g) > 0.5).double()
    w = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    fn = lambda r: (composite(scene, r, mask) * w).sum()  # noqa: E731
    r0 = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    a = analytic_gradient(fn, r0)
    assert torch.allclose(a, w * mask)
    assert rel_error(a, fd_gradient(fn, r0)) < 1e-3


def test_save_and_load_patch_roundtrip(tmp_path):
    p = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    path = save_patch(p, tmp_path / "p.png", tau=1.0, linf_bound=0.6, config_hash="abc", seed=5)
    loaded, meta = load_patch(path)
    assert loaded.shape == (3, 8, 8)
    assert float((loaded - p).abs().max()) <= 0.5 / 255 + 1e-12
    assert meta == {"size_s": 8, "tau": 1.0, "linf_bound": 0.6, "creation_config_hash": "abc", "seed": 5}
    assert json.loads(sidecar_path(path).read_text())["seed"] == 5


def test_save_patch_is_byte_stable(tmp_path):
    p = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    a = save_patch(p, tmp_path / "a.png").read_bytes()
    b = save_patch(p.clone(), tmp_path / "b.png").read_bytes()
    assert a == b


@settings(max_examples=25)
@given(arrays("float64", (3, 3, 3), elements=st.floats(0, 1)), arrays("float64", (3, 3, 3), elements=st.floats(0, 1)),
       arrays("float64", (3, 3), elements=st.sampled_from([0.0, 1.0])))
def test_composite_partition(scene, layer, mask):
    s, l, m = (torch.from_numpy(x) for x in (scene, layer, mask))
    out = composite(s, l, m)
    assert bool(((out == s) | (out == l)).all())
