import json
from dataclasses import dataclass

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dualflow.conditioning import ConditionInputs
from dualflow.model import DualFlow, ModelConfig
from dualflow.motion import Normalizer, load_duet
from dualflow.sampler import (SamplerConfig, cfg_combine, euler_sample, guided_velocity, sidecar, step_times,
                              write_sample)


@dataclass
class StubBundle:
    batch_size: int = 1


class Field:
    """Analytic velocity field over the concatenated duet vector."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x_a, x_b, t, bundle, mode=None):
        v = self.fn(torch.cat([x_a, x_b], -1), t)
        d = x_a.shape[-1]
        return v[..., :d], v[..., d:]


def tiny_model(mode="interactive"):
    torch.manual_seed(0)
    model = DualFlow(ModelConfig(n_blocks=1, latent_dim=16, n_heads=2, ffn_dim=32, dropout=0.0, conv_kernels=(3,),
                                 text_dim=16, vocab_size=97, mode=mode))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return model.eval()


def bundle_for(model, b=1, t=12):
    g = torch.Generator().manual_seed(1)
    inputs = ConditionInputs(torch.randint(1, 97, (b, 4), generator=g), torch.randn(b, t, 32, generator=g),
                             torch.randn(b, 3, 524, generator=g), torch.arange(3).repeat(b, 1),
                             torch.zeros(b, 3, dtype=torch.long), torch.ones(b, 3, dtype=torch.bool))
    return model.encoder.bundle(inputs)


# schedule -----------------------------------------------------------------------

def test_step_time_examples():
    assert step_times(1, "uniform").tolist() == [1.0, 0.0]
    assert step_times(2, "uniform").tolist() == [1.0, 0.5, 0.0]
    np.testing.assert_allclose(step_times(2, "cosine"), [1.0, 0.5, 0.0], atol=1e-15)


@given(st.integers(1, 500), st.sampled_from(["uniform", "cosine"]))
def test_step_times_strictly_decreasing(n, schedule):
    ts = step_times(n, schedule)
    assert len(ts) == n + 1 and ts[0] == 1.0 and ts[-1] == 0.0
    assert np.all(np.diff(ts) < 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(schedule="linear")
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1)


# guidance -----------------------------------------------------------------------

def test_cfg_combine_examples():
    assert cfg_combine(2.0, 1.0, 3.0) == 4.0
    assert cfg_combine(2.0, 1.0, 1.0) == 2.0
    assert cfg_combine(2.0, 1.0, 0.0) == 1.0


def test_guided_velocity_endpoints():
    model = tiny_model()
    b = bundle_for(model)
    x = torch.randn(1, 12, 262), torch.randn(1, 12, 262)
    t = torch.tensor([0.5])
    cond = model(*x, t, b)
    uncond = model(*x, t, model.encoder.apply_drops(b, True, True))
    for got, want in zip(guided_velocity(model, *x, t, b, 1.0), cond):
        assert torch.equal(got, want)
    for got, want in zip(guided_velocity(model, *x, t, b, 0.0), uncond):
        assert torch.equal(got, want)
    for got, c, u in zip(guided_velocity(model, *x, t, b, 2.5), cond, uncond):
        torch.testing.assert_close(got, u + 2.5 * (c - u))


# integration ----------------------------------------------------------------------

def test_constant_field_one_step_exact():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(1, 5, 524, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 5, 524, generator=g, dtype=torch.float64)
    field = Field(lambda x, t: eps - x0)
    field.parameters = lambda: iter([torch.zeros(1, dtype=torch.float64)])
    out = euler_sample(field, StubBundle(), SamplerConfig(steps=1, schedule="uniform"), 5, noise=eps)
    torch.testing.assert_close(out.x, x0, rtol=0, atol=1e-15)


def euler_error(steps, sign):
    x1 = torch.linspace(-2, 2, 524, dtype=torch.float64).reshape(1, 1, 524)
    field = Field(lambda x, t: sign * x)
    field.parameters = lambda: iter([torch.zeros(1, dtype=torch.float64)])
    out = euler_sample(field, StubBundle(), SamplerConfig(steps=steps, schedule="uniform"), 1, noise=x1)
    # dx/dt = sign * x, integrated from t=1 down to t=0
    exact = x1 * np.exp(sign * (0.0 - 1.0))
    return float((out.x - exact).abs().max())


@pytest.mark.parametrize("sign", [-1.0, 1.0])
def test_euler_first_order_convergence(sign):
    errs = [euler_error(n, sign) for n in (10, 20, 40, 80)]
    for coarse, fine in zip(errs, errs[1:]):
        assert 1.6 <= coarse / fine <= 2.4


def test_sampling_deterministic():
    model = tiny_model()
    b = bundle_for(model, b=2)
    cfg = SamplerConfig(steps=5, seed=11)
    a = euler_sample(model, b, cfg, 12)
    c = euler_sample(model, b, cfg, 12)
    assert torch.equal(a.x, c.x)
    assert not torch.equal(a.x, euler_sample(model, b, SamplerConfig(steps=5, seed=12), 12).x)


def test_reactive_actor_bit_exact(clips):
    model = tiny_model("reactive")
    b = bundle_for(model, t=64)
    actor = clips[0].motion.frames_a
    frames = np.concatenate([clips[0].motion.frames_a, clips[0].motion.frames_b])
    norm = Normalizer.fit(np.concatenate([frames, frames], 1))
    res = euler_sample(model, b, SamplerConfig(steps=6, mode="reactive"), 64, actor=actor, normalizer=norm,
                       keep_trajectory=True)
    first = res.trajectory[0][..., :262]
    assert all(torch.equal(s[..., :262], first) for s in res.trajectory)
    duet = res.duets(norm)[0]
    assert np.array_equal(duet.frames_a, actor)
    assert not np.array_equal(duet.frames_b, clips[0].motion.frames_b)


def test_reactive_needs_actor():
    model = tiny_model("reactive")
    with pytest.raises(ValueError, match="actor"):
        euler_sample(model, bundle_for(model), SamplerConfig(steps=2, mode="reactive"), 12)


def test_non_finite_state_names_step():
    field = Field(lambda x, t: torch.full_like(x, float("inf")) if float(t[0]) < 0.7 else torch.zeros_like(x))
    with pytest.raises(FloatingPointError, match="step 2"):
        euler_sample(field, StubBundle(), SamplerConfig(steps=5, schedule="uniform"), 3)


def test_write_sample_with_sidecar(tmp_path, clips):
    cfg = SamplerConfig(steps=7, seed=3)
    meta = sidecar(cfg, "abc123", {"clip_id": clips[0].clip_id})
    write_sample(tmp_path / "s.dfmo", clips[0].motion, meta)
    back = json.loads((tmp_path / "s.json").read_text())
    assert {"seed", "steps", "schedule", "guidance_scale", "mode", "checkpoint_id", "condition"} <= set(back)
    assert back["steps"] == 7 and back["checkpoint_id"] == "abc123"
    np.testing.assert_allclose(load_duet(tmp_path / "s.dfmo").frames_b, clips[0].motion.frames_b, atol=1e-5)
