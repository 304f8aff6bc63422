import math

import pytest
import torch

from ema_patch.diffusion import (
    DiffusionSchedule,
    LinearNoisePredictor,
    OracleNoisePredictor,
    PalettePredictor,
    PredictorContractError,
    RescaledAdapter,
    TextCondition,
    ZeroPredictor,
    classifier_free_guidance,
    ddpm_step,
    default_start_timestep,
    denoise_loop,
    forward_diffuse,
    generate_patch,
    make_schedule,
    palette_from_prompt,
)

from conftest import analytic_gradient, fd_gradient, rel_error

COND = TextCondition("desert, sand, camouflage", 6.5, 20)
NO_GUIDE = TextCondition("", 1.0, 20)


def sched(*ab, step=1):
    return DiffusionSchedule.from_alpha_bar(ab, step)


# -- schedule -------------------------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValueError):
        sched(0.9, 0.5)  # alpha_bar[0] != 1
    with pytest.raises(ValueError):
        sched(1.0, 0.5, 0.6)  # increasing
    with pytest.raises(ValueError):
        sched(1.0, 0.0)  # outside (0, 1]
    with pytest.raises(ValueError):
        sched(1.0, 0.5, step=2)  # step > total_steps
    with pytest.raises(ValueError):
        sched(1.0, 0.5, step=0)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 7, 1000])
def test_make_schedule_monotone(kind, T):
    s = make_schedule(T, kind)
    ab = s.alpha_bar
    assert ab.shape == (T + 1,)
    assert float(ab[0]) == 1.0
    assert bool((ab[1:] <= ab[:-1]).all())
    assert 0 < float(ab[-1]) < 1


def test_make_schedule_linear_closed_form():
    T, b0, b1 = 10, 1e-3, 0.05
    s = make_schedule(T, "linear", beta_start=b0, beta_end=b1)
    expected = [1.0]
    for i in range(T):
        beta = b0 + (b1 - b0) * i / (T - 1)
        expected.append(expected[-1] * (1 - beta))
    assert torch.allclose(s.alpha_bar, torch.tensor(expected, dtype=torch.float64), rtol=1e-12, atol=0)


def test_make_schedule_single_step_and_bad_kind():
    s = make_schedule(1, "linear")
    assert s.total_steps == 1 and 0 < s.ab(1) < 1
    with pytest.raises(ValueError):
        make_schedule(10, "sigmoid")
    with pytest.raises(ValueError):
        make_schedule(0)


def test_for_inference_steps():
    s = make_schedule(1000).for_inference_steps(20)
    assert s.step_size == 50
    assert make_schedule(10).for_inference_steps(20).step_size == 1


# -- forward / ddpm -----------------------------------------------------------------

def test_forward_diffuse_examples():
    x = torch.rand(3, 2, 2, dtype=torch.float64)
    assert torch.equal(forward_diffuse(x, 1, sched(1.0, 1.0), torch.randn(3, 2, 2, dtype=torch.float64)), x)
    out = forward_diffuse(torch.zeros(3, 2, 2, dtype=torch.float64), 1, sched(1.0, 0.25), torch.ones(3, 2, 2, dtype=torch.float64))
    assert torch.allclose(out, torch.full_like(out, math.sqrt(0.75)))
    assert abs(float(out[0, 0, 0]) - 0.8660) < 1e-4
    out = forward_diffuse(x, 1, sched(1.0, 0.25), torch.zeros_like(x))
    assert torch.allclose(out, 0.5 * x, rtol=0, atol=1e-15)


def test_forward_diffuse_errors():
    x = torch.zeros(3, 2, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        forward_diffuse(x, 2, sched(1.0, 0.5), x)
    with pytest.raises(ValueError):
        forward_diffuse(x, 0, sched(1.0, 0.5), x)
    with pytest.raises(ValueError):
        forward_diffuse(x, 1, sched(1.0, 0.5), torch.zeros(3, 3, 3, dtype=torch.float64))


def test_ddpm_step_examples():
    x = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
    out = ddpm_step(x, 1, sched(1.0, 0.81), ZeroPredictor(), NO_GUIDE)
    assert torch.allclose(out, x / 0.9)
    assert torch.equal(ddpm_step(x, 1, sched(1.0, 1.0), ZeroPredictor(), NO_GUIDE), x)

    const = lambda x, t, c: torch.full_like(x, 0.1)  # noqa: E731
    out = ddpm_step(x, 1, sched(1.0, 0.81), const, NO_GUIDE)
    want = (0.5 - (0.19 / math.sqrt(0.19)) * 0.1) / 0.9
    assert torch.allclose(out, torch.full_like(out, want), rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        ddpm_step(x, 0, sched(1.0, 0.81), ZeroPredictor(), NO_GUIDE)


# -- generation loop ------------------------------------------------------------------

def test_generate_patch_single_step_hand_value():
    p = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
    out = generate_patch(p, torch.zeros_like(p), NO_GUIDE, sched(1.0, 0.25), ZeroPredictor(), start_timestep=1)
    assert torch.allclose(out, torch.ones_like(out), rtol=0, atol=1e-15)


def test_generate_patch_empty_loop():
    p = torch.full((3, 2, 2), 0.7, dtype=torch.float64)
    d = torch.full_like(p, 0.5)
    s0 = DiffusionSchedule(torch.ones(1, dtype=torch.float64))
    assert s0.total_steps == 0
    assert torch.equal(generate_patch(p, d, NO_GUIDE, s0, ZeroPredictor()), torch.ones_like(p))


def test_generate_patch_bypass():
    p = torch.full((3, 2, 2), 0.4, dtype=torch.float64)
    d = torch.full_like(p, -0.5)
    assert torch.equal(generate_patch(p, d, COND, make_schedule(10), None), torch.zeros_like(p))


def test_contract_violation():
    bad = lambda x, t, c: torch.zeros(3, 1, 1, dtype=x.dtype)  # noqa: E731
    p = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
    with pytest.raises(PredictorContractError):
        generate_patch(p, torch.zeros_like(p), NO_GUIDE, make_schedule(4), bad)
    with pytest.raises(PredictorContractError):
        generate_patch(p, torch.zeros_like(p), NO_GUIDE, make_schedule(4), lambda x, t, c: 0.0)


def test_loop_visits_expected_timesteps():
    seen = []

    def spy(x, t, c):
        seen.append(t)
        return torch.zeros_like(x)

    denoise_loop(torch.zeros(3, 2, 2, dtype=torch.float64), 10, make_schedule(20, step_size=4), spy, NO_GUIDE)
    assert seen == [10, 6, 2]
    assert default_start_timestep(make_schedule(1000)) == 500


ROUNDTRIP_SCHEDULES = [
    ("linear-50", lambda: make_schedule(50, "linear"), 25),
    ("cosine-50", lambda: make_schedule(50, "cosine"), 10),
    ("linear-1000", lambda: make_schedule(1000, "linear"), 100),
]


@pytest.mark.parametrize("name,factory,start", ROUNDTRIP_SCHEDULES, ids=[r[0] for r in ROUNDTRIP_SCHEDULES])
@pytest.mark.parametrize("step", [1, 3, 7])
def test_oracle_roundtrip(name, factory, start, step):
    s = factory().with_step_size(step)
    g = torch.Generator().manual_seed(11)
    x0 = 0.3 + 0.4 * torch.rand(3, 6, 6, generator=g, dtype=torch.float64)
    x = x0
    for t in range(1, start + 1):  # recorded noise, one forward step at a time
        x = forward_diffuse(x, t, s, (torch.rand(3, 6, 6, generator=g, dtype=torch.float64) - 0.5))
    assert float(x.min()) > 0 and float(x.max()) < 1  # so the injection clip is inactive
    out = generate_patch(x, torch.zeros_like(x), NO_GUIDE, s, OracleNoisePredictor(x0, s), start_timestep=start)
    assert float((out - x0).abs().max()) < 1e-4


def test_generate_patch_deterministic():
    s = make_schedule(40).for_inference_steps(20)
    pred = PalettePredictor((0.78, 0.68, 0.47)).bind(s)
    p = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    d = 0.1 * torch.ones_like(p)
    a = generate_patch(p, d, COND, s, pred)
    b = generate_patch(p.clone(), d.clone(), COND, s, pred)
    assert torch.equal(a, b)


def _interior_patch(seed, size=4):
    return 0.35 + 0.3 * torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


@pytest.mark.parametrize("predictor_kind", ["palette", "linear"])
def test_generate_patch_gradient(predictor_kind):
    s = make_schedule(40).for_inference_steps(20)
    if predictor_kind == "palette":
        pred = PalettePredictor((0.78, 0.68, 0.47)).bind(s)
        cond = COND
    else:
        pred = LinearNoisePredictor.random(seed=3, scale=0.05, t_ref=40)
        cond = NO_GUIDE
    p = _interior_patch(5)
    w = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    fn = lambda d: (generate_patch(p, d, cond, s, pred) * w).sum()  # noqa: E731
    d0 = 0.05 * (torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(7), dtype=torch.float64) - 0.5)
    assert rel_error(analytic_gradient(fn, d0), fd_gradient(fn, d0)) < 1e-3


# -- predictors -----------------------------------------------------------------------

def test_cfg_formula():
    u, c = torch.tensor([1.0]), torch.tensor([3.0])
    assert float(classifier_free_guidance(u, c, 1.0)) == 3.0
    assert float(classifier_free_guidance(u, c, 6.5)) == 1.0 + 6.5 * 2.0


def test_text_condition_requires_prompt_with_guidance():
    with pytest.raises(ValueError):
        TextCondition("", 6.5)
    TextCondition("", 1.0)
    with pytest.raises(ValueError):
        TextCondition("x", 0.0)


def test_palette_from_prompt():
    assert palette_from_prompt("nothing here") is None
    grass = palette_from_prompt("grass")
    dark = palette_from_prompt("grass, camouflage, black")
    assert dark == pytest.approx(tuple(0.6 * v for v in grass))


def test_palette_predictor_pulls_toward_target():
    s = make_schedule(40).for_inference_steps(20)
    target = (0.2, 0.6, 0.3)
    pred = PalettePredictor(target, strength=0.05).bind(s)
    p = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
    out = generate_patch(p, torch.zeros_like(p), COND, s, pred)
    t = torch.tensor(target, dtype=torch.float64)[:, None, None]
    assert float((out - t).abs().mean()) < float((p - t).abs().mean())


def test_palette_predictor_needs_binding():
    with pytest.raises(RuntimeError):
        PalettePredictor((0.5, 0.5, 0.5))(torch.zeros(3, 2, 2, dtype=torch.float64), 1, COND)


def test_linear_predictor_roundtrip(tmp_path):
    pred = LinearNoisePredictor.random(seed=1, t_ref=40)
    path = pred.save(tmp_path / "lin.emaw")
    back = LinearNoisePredictor.load(path)
    x = torch.rand(3, 3, 3, dtype=torch.float64)
    assert torch.equal(pred(x, 7, NO_GUIDE), back(x, 7, NO_GUIDE))
    assert back.t_ref == 40


def test_rescaled_adapter_contract():
    seen = {}

    def model(x, t, prompt, scale):
        seen.update(lo=float(x.min()), hi=float(x.max()), t=t, prompt=prompt, scale=scale)
        return torch.zeros_like(x)

    x = torch.tensor([0.0, 1.0], dtype=torch.float64).reshape(1, 1, 2).expand(3, 1, 2)
    RescaledAdapter(model)(x, 5, COND)
    assert seen == {"lo": -1.0, "hi": 1.0, "t": 5, "prompt": COND.prompt, "scale": 6.5}
