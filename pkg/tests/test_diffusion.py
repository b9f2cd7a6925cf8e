import math

import numpy as np
import pytest

from gsdiff.camera import look_at
from gsdiff.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    ancestral_update,
    from_diffusion_space,
    q_sample,
    run_sampler,
    sample,
    sampling_timesteps,
    to_diffusion_space,
)
from gsdiff.errors import ContractError
from gsdiff.raster import render

from conftest import random_cloud

SCHED = NoiseSchedule.cosine()


def test_schedule_invariants():
    ab = SCHED.alpha_bar
    assert SCHED.T == 1000 and len(ab) == 1001
    assert ab[0] >= 1 - 1e-4 and ab[0] == 1.0
    assert ab[-1] <= 1e-3
    assert np.all(np.diff(ab) < 0)
    assert ab[1:].min() >= 1e-5 and ab[1:].max() <= 1 - 1e-5
    SCHED.check()
    with pytest.raises(ContractError):
        NoiseSchedule(np.array([1.0, 0.5, 0.5, 1e-4])).check()


def test_q_sample_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 4, 4, 3))
    eps = rng.standard_normal(x0.shape)
    assert np.array_equal(q_sample(x0, 0, eps, SCHED), x0)
    zero_end = NoiseSchedule(np.array([1.0, 0.5, 0.0]))
    assert np.array_equal(q_sample(x0, 2, eps, zero_end), eps)
    t = 400
    np.testing.assert_allclose(q_sample(x0, t, eps, SCHED),
                               math.sqrt(SCHED[t]) * x0 + math.sqrt(1 - SCHED[t]) * eps, atol=0)


def test_q_sample_variance_monte_carlo():
    n = 10_000
    rng = np.random.default_rng(1)
    for t in (250, 500, 750):
        eps = rng.standard_normal((n, 1))
        x = q_sample(np.zeros((n, 1)), t, eps, SCHED)
        var = x.var(ddof=1)
        want = 1 - SCHED[t]
        se = want * math.sqrt(2.0 / (n - 1))
        assert abs(var - want) <= 3 * se


def test_q_sample_errors():
    with pytest.raises(ContractError):
        q_sample(np.zeros(3), 1001, np.zeros(3), SCHED)
    with pytest.raises(ContractError):
        q_sample(np.zeros(3), -1, np.zeros(3), SCHED)
    with pytest.raises(ContractError):
        q_sample(np.zeros(3), 10, np.zeros(4), SCHED)


def test_ancestral_update_examples():
    rng = np.random.default_rng(2)
    x0 = rng.uniform(-1, 1, (3, 5))
    eps = rng.standard_normal((3, 5))
    assert np.array_equal(ancestral_update(x0, 20, 0, eps, SCHED), x0)
    np.testing.assert_array_equal(ancestral_update(x0, 500, 300, np.zeros_like(x0), SCHED),
                                  math.sqrt(SCHED[300]) * x0)
    np.testing.assert_array_equal(ancestral_update(x0, 500, 300, None, SCHED), math.sqrt(SCHED[300]) * x0)
    with pytest.raises(ContractError):
        ancestral_update(x0, 300, 300, None, SCHED)
    with pytest.raises(ContractError):
        ancestral_update(x0, 200, 300, None, SCHED)


def test_update_consistent_with_forward_noising():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (2, 8, 8, 3))
    eps = rng.standard_normal(x0.shape)
    for t in (1000, 600, 37):
        assert np.array_equal(ancestral_update(x0, t, t - 1, eps, SCHED), q_sample(x0, t - 1, eps, SCHED))


def test_timesteps():
    assert sampling_timesteps(1000, 1000) == list(range(1000, -1, -1))
    assert sampling_timesteps(1, 1000) == [1000, 0]
    ts = sampling_timesteps(50, 1000)
    assert len(ts) == 51 and ts[0] == 1000 and ts[-1] == 0 and all(b - a == -20 for a, b in zip(ts, ts[1:]))
    with pytest.raises(ContractError):
        sampling_timesteps(0, 1000)
    with pytest.raises(ContractError):
        sampling_timesteps(1001, 1000)
    with pytest.raises(ContractError):
        SamplerConfig(eta=1.5)


def test_diffusion_space():
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(from_diffusion_space(to_diffusion_space(x)), x, atol=1e-15)
    assert to_diffusion_space(np.array([0.0, 1.0])).tolist() == [-1.0, 1.0]


class Recorder:
    """predict() stub that shrinks its input and records every call."""

    def __init__(self):
        self.calls = []

    def __call__(self, x, t):
        self.calls.append((t, x.copy()))
        return None, np.tanh(x * 0.5)


def test_full_chain_visits_every_timestep():
    rec = Recorder()
    out = run_sampler(rec, (1, 2, 2, 3), SCHED, SamplerConfig(num_steps=1000))
    assert [t for t, _ in rec.calls] == list(range(1000, 0, -1))
    assert out.denoiser_calls == 1000


def test_single_step_one_call():
    rec = Recorder()
    out = run_sampler(rec, (1, 2, 2, 3), SCHED, SamplerConfig(num_steps=1))
    assert len(rec.calls) == 1 and out.denoiser_calls == 1 and out.timesteps == [1000, 0]


def test_eta_zero_is_deterministic_given_initial_noise():
    a = run_sampler(Recorder(), (2, 4, 4, 3), SCHED, SamplerConfig(num_steps=20, seed=5), keep_trajectory=True)
    b = run_sampler(Recorder(), (2, 4, 4, 3), SCHED, SamplerConfig(num_steps=20, seed=5), keep_trajectory=True)
    init = np.random.default_rng(5).standard_normal((2, 4, 4, 3))
    assert np.array_equal(a.trajectory[0], init)
    for x, y in zip(a.trajectory, b.trajectory):
        assert np.array_equal(x, y)
    # with eta = 0 every later state is a deterministic function of the previous one
    for t, t_prev, x, nxt in zip(a.timesteps, a.timesteps[1:], a.trajectory, a.trajectory[1:]):
        assert np.array_equal(nxt, ancestral_update(np.tanh(x * 0.5), t, t_prev, None, SCHED))


def test_stochastic_sampling_reproducible_per_seed():
    cfgs = [SamplerConfig(num_steps=10, eta=1.0, seed=s) for s in (7, 7, 8)]
    runs = [run_sampler(Recorder(), (1, 3, 3, 3), SCHED, c, keep_trajectory=True) for c in cfgs]
    assert all(np.array_equal(x, y) for x, y in zip(runs[0].trajectory, runs[1].trajectory))
    assert not np.array_equal(runs[0].trajectory[-2], runs[2].trajectory[-2])


class FixedDenoiser:
    """Ignores its inputs and returns one cloud; counts calls."""

    def __init__(self, cloud):
        self.cloud = cloud
        self.seen = []

    def forward(self, cond, cond_pose, noisy, noisy_poses, t, tag):
        self.seen.append((t, tag, noisy.shape, float(cond.min()), float(cond.max())))
        return self.cloud


def test_sample_renders_prediction_at_noisy_poses():
    cloud = random_cloud(np.random.default_rng(6), 20)
    poses = [look_at([3 * math.sin(a), -3 * math.cos(a), 0.5], [0, 0, 0], width=16, height=16)
             for a in (0.0, 0.5, 1.0, 1.5)]
    den = FixedDenoiser(cloud)
    cond = np.full((16, 16, 3), 0.25)
    out = sample(cond, poses[0], poses[1:], den, SCHED, SamplerConfig(num_steps=4))
    assert out.denoiser_calls == 4 and len(den.seen) == 4
    assert [s[0] for s in den.seen] == [1000, 750, 500, 250]
    # condition image handed to the network in [-1, 1]
    assert den.seen[0][3] == den.seen[0][4] == -0.5
    assert out.cloud is cloud
    for view, pose in zip(out.views, poses[1:]):
        np.testing.assert_allclose(view, render(cloud, pose).image, atol=1e-12)
