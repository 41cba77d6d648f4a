import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats as sps

from carl.env import EnvConfig, SleepyEnv, make_envs
from carl.policy import NetConfig
from carl.trainer import (
    PPOConfig,
    Trainer,
    collect_async,
    collect_sync,
    compute_gae,
    data_parallel_step,
    flatten,
    init_policy,
    lr_at,
    make_optimizer,
    make_slots,
    NonFiniteLossError,
    off_policy_steps,
    ppo_objective,
    ppo_update,
)

# --- accounting ---------------------------------------------------------------------


def test_off_policy_steps_examples():
    assert off_policy_steps(4, 4) == 15
    assert off_policy_steps(48, 20) == 959
    assert off_policy_steps(1, 1) == 0
    cfg = PPOConfig(num_envs=4, steps_per_iteration=256, mini_batch_size=256, epochs=4)
    assert off_policy_steps(cfg) == 15
    with pytest.raises(ValueError):
        off_policy_steps(0, 3)


def test_lr_schedule():
    cfg = PPOConfig(num_envs=1, steps_per_iteration=256, total_samples=256 * 10)
    assert lr_at(0, cfg) == 2.5e-4
    assert lr_at(10, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(1.25e-4)
    with pytest.raises(ValueError):
        lr_at(11, cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        PPOConfig(num_envs=3, steps_per_iteration=10, mini_batch_size=4)
    with pytest.raises(ValueError):
        PPOConfig(clip_coef=0.0)
    assert PPOConfig.for_profile("carla").epochs == 3
    assert PPOConfig.for_profile("nuplan").epochs == 4


# --- GAE ----------------------------------------------------------------------------


def test_gae_examples():
    adv, ret = compute_gae([1.0], [0.0], [0.0], [True], [True], 0.99, 0.95)
    assert adv[0] == 1.0 and ret[0] == 1.0
    adv, _ = compute_gae([1, 1, 1], [0, 0, 0], [0, 0, 0], [0, 0, 1], [0, 0, 1], 1.0, 1.0)
    assert np.array_equal(adv, [3, 2, 1])


def test_truncation_bootstraps_but_does_not_leak():
    # step 1 is a time-limit cut, step 2 starts a new episode
    r = [0.0, 0.0, 5.0]
    v = [0.0, 0.0, 0.0]
    nv = [0.0, 10.0, 0.0]
    adv, _ = compute_gae(r, v, nv, [0, 0, 1], [0, 1, 1], 1.0, 1.0)
    assert adv[1] == 10.0  # bootstrapped value of the cut state
    assert adv[0] == 10.0  # not 15: the next episode's reward stays out
    adv, _ = compute_gae(r, v, nv, [0, 1, 1], [0, 1, 1], 1.0, 1.0)
    assert adv[1] == 0.0  # a terminal step never bootstraps


def _brute_gae(r, v, nv, term, done, g, lam):
    n = len(r)
    delta = [r[t] + g * nv[t] * (1 - term[t]) - v[t] for t in range(n)]
    out = []
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * delta[k]
            if done[k]:
                break
            w *= g * lam
        out.append(total)
    return np.array(out)


@given(seed=st.integers(0, 10_000), g=st.floats(0.5, 1.0), lam=st.floats(0.0, 1.0))
def test_gae_matches_direct_sum(seed, g, lam):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    r, v, nv = rng.normal(size=(3, n))
    done = rng.random(n) < 0.15
    term = done & (rng.random(n) < 0.5)
    adv, ret = compute_gae(r, v, nv, term, done, g, lam)
    assert np.allclose(adv, _brute_gae(r, v, nv, term, done, g, lam), atol=1e-9)
    assert np.allclose(ret, adv + v)


# --- objective ------------------------------------------------------------------------


class _Fixed(torch.nn.Module):
    """Stand-in network whose outputs are read straight from the 'raster' input."""

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, rasters, meas, extras):
        return rasters[:, 0:2], rasters[:, 2:4], rasters[:, 4] + self.dummy


def _objective(outs, actions, old_logp, old_values, adv, ret, cfg):
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    return ppo_objective(_Fixed(), t(outs), None, None, t(actions), t(old_logp), t(old_values), t(adv), t(ret), cfg)


def test_clip_arithmetic():
    cfg = PPOConfig()
    a, b, x = 2.0, 3.0, np.array([[0.4, 0.6]])
    logp = sps.beta.logpdf(x, a, b).sum()
    outs = np.array([[a, a, b, b, 0.0]])
    A = 2.0
    loss, pg, *_ = _objective(outs, x, [logp - math.log(1.5)], [0.0], [A], [0.0], cfg)
    assert pg.item() == pytest.approx(-1.1 * A)
    # identical policies: ratio 1, surrogate is -A
    _, pg, _, _, clipfrac, kl = _objective(outs, x, [logp], [0.0], [A], [0.0], cfg)
    assert pg.item() == pytest.approx(-A) and clipfrac.item() == 0.0 and kl.item() == pytest.approx(0.0, abs=1e-12)


def _reference_objective(outs, actions, old_logp, old_values, adv, ret, cfg):
    """Straight-line restatement of the clipped PPO loss with scipy's Beta."""
    al, be, v = outs[:, 0:2], outs[:, 2:4], outs[:, 4]
    x = np.clip(actions, 1e-6, 1 - 1e-6)
    new_logp = sps.beta.logpdf(x, al, be).sum(1)
    ratio = np.exp(new_logp - old_logp)
    surr = np.minimum(ratio * adv, np.clip(ratio, 1 - cfg.clip_coef, 1 + cfg.clip_coef) * adv)
    pg = -surr.mean()
    v_clip = old_values + np.clip(v - old_values, -cfg.clip_coef, cfg.clip_coef)
    vloss = np.maximum((v - ret) ** 2, (v_clip - ret) ** 2).mean()
    ent = sps.beta.entropy(al, be).sum(1).mean()
    return pg + cfg.value_coef * vloss - cfg.entropy_coef * ent


def test_objective_matches_reference_on_1000_transitions():
    rng = np.random.default_rng(5)
    n = 1000
    outs = np.column_stack([rng.uniform(1, 8, (n, 4)), rng.normal(size=n)])
    actions = rng.uniform(0, 1, (n, 2))
    old_logp = sps.beta.logpdf(np.clip(actions, 1e-6, 1 - 1e-6), outs[:, 0:2] * 1.1, outs[:, 2:4]).sum(1)
    old_v = outs[:, 4] + rng.normal(scale=0.2, size=n)
    adv, ret = rng.normal(size=(2, n))
    cfg = PPOConfig()
    loss = _objective(outs, actions, old_logp, old_v, adv, ret, cfg)[0].item()
    assert loss == pytest.approx(_reference_objective(outs, actions, old_logp, old_v, adv, ret, cfg), abs=1e-6)


# --- collection ----------------------------------------------------------------------------

NET = NetConfig.preset("desk")


def _envs(n, **kw):
    kw.setdefault("map", "straight")
    kw.setdefault("route_length", 60.0)
    kw.setdefault("lane_change_prob", 0.0)
    kw.setdefault("horizon", 7)
    return make_envs(EnvConfig(**kw), n)


def _collect(fn, n_envs, steps, seed=0, **kw):
    net = init_policy(NET, seed).inference_copy()
    return fn(make_slots(_envs(n_envs, **kw), seed), net, steps)


def test_sync_shape_and_layout():
    buf = _collect(collect_sync, 2, 3)
    assert buf.shape == (2, 3)
    assert buf.rasters.shape == (2, 3, 10, 128, 128) and buf.rasters.dtype == np.uint8
    assert np.all(np.isfinite(buf.log_probs))
    assert np.all((buf.actions > 0) & (buf.actions < 1))


def test_sync_is_deterministic():
    a = _collect(collect_sync, 2, 12)
    b = _collect(collect_sync, 2, 12)
    for name, arr in a.env_sequence(0).items():
        assert np.array_equal(arr, b.env_sequence(0)[name])
    assert np.array_equal(a.rewards, b.rewards)


def test_episode_end_resets_and_continues():
    buf = _collect(collect_sync, 2, 16)
    # horizon 7 forces time-limit cuts mid-rollout
    assert buf.truncated[:, 6].all()
    assert not buf.dones[:, 7:13].any()
    assert len(buf.episodes) == 4
    assert np.all(buf.next_values[:, 6] != 0)


def _assert_same(a, b):
    for e in range(a.shape[0]):
        sa, sb = a.env_sequence(e), b.env_sequence(e)
        for name in sa:
            assert np.array_equal(sa[name], sb[name]), (e, name)


def test_async_equals_sync():
    _assert_same(_collect(collect_sync, 3, 15), _collect(collect_async, 3, 15))


def test_async_single_env_equals_sync():
    _assert_same(_collect(collect_sync, 1, 9), _collect(collect_async, 1, 9))


def test_async_faster_on_uneven_step_times():
    def timed(fn, n):
        net = init_policy(NET, 0).inference_copy()
        envs = [SleepyEnv(e, i, base=0.01, spread=4.0) for i, e in enumerate(_envs(n, horizon=None))]
        slots = make_slots(envs, 0)
        for s in slots:
            s.ensure()
        t0 = time.perf_counter()
        buf = fn(slots, net, 10)
        return time.perf_counter() - t0, buf

    t_sync, b_sync = timed(collect_sync, 4)
    t_async, b_async = timed(collect_async, 4)
    _assert_same(b_sync, b_async)
    assert t_async < t_sync


# --- update --------------------------------------------------------------------------------


def _batch(n_envs=2, steps=32, seed=0):
    buf = _collect(collect_sync, n_envs, steps, seed)
    cfg = PPOConfig(num_envs=n_envs, steps_per_iteration=steps, mini_batch_size=n_envs * steps, epochs=1)
    return buf, cfg


def test_advantage_normalization():
    buf, cfg = _batch()
    batch = flatten(buf, cfg)
    adv = batch.advantages.double()
    assert abs(adv.mean().item()) < 1e-6
    assert abs(adv.std(unbiased=False).item() - 1.0) < 1e-6


class _NormSpy(torch.optim.Adam):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.norms = []

    def step(self, closure=None):
        grads = [p.grad for g in self.param_groups for p in g["params"] if p.grad is not None]
        self.norms.append(torch.norm(torch.stack([g.norm() for g in grads])).item())
        return super().step(closure)


def test_gradient_norm_clipped():
    buf, cfg = _batch()
    cfg = PPOConfig(num_envs=2, steps_per_iteration=32, mini_batch_size=16, epochs=2, max_grad_norm=0.5)
    net = init_policy(NET, 0)
    opt = _NormSpy(net.parameters(), lr=cfg.lr, eps=cfg.adam_eps)
    st_ = ppo_update(flatten(buf, cfg), net, opt, cfg)
    assert len(opt.norms) == 8
    assert max(opt.norms) <= 0.5 + 1e-6
    assert 0.0 <= st_.clip_fraction <= 1.0


def test_full_batch_update_matches_objective():
    buf, cfg = _batch()
    net = init_policy(NET, 0)
    batch = flatten(buf, cfg)
    ref = ppo_objective(net, batch.rasters, batch.meas, batch.extras, batch.actions, batch.log_probs, batch.values, batch.advantages, batch.returns, cfg)[0].item()
    cfg_chunked = PPOConfig(num_envs=2, steps_per_iteration=32, mini_batch_size=64, epochs=1, grad_chunk=16)
    stats = ppo_update(batch, net, make_optimizer(net, cfg_chunked), cfg_chunked)
    assert stats.initial_loss == pytest.approx(ref, abs=1e-6)


def test_non_finite_loss_restores_parameters():
    buf, cfg = _batch()
    net = init_policy(NET, 0)
    batch = flatten(buf, cfg)
    batch.returns[0] = float("nan")
    before = [p.detach().clone() for p in net.parameters()]
    with pytest.raises(NonFiniteLossError):
        ppo_update(batch, net, make_optimizer(net, cfg), cfg)
    assert all(torch.equal(p, q) for p, q in zip(before, net.parameters()))


def test_data_parallel_equals_union_step():
    buf, cfg = _batch()
    batch = flatten(buf, cfg)
    n = len(batch)
    single = init_policy(NET, 1)
    opt = make_optimizer(single, cfg)
    data_parallel_step([single], [opt], [batch], cfg)
    replicas = [init_policy(NET, 1) for _ in range(2)]
    opts = [make_optimizer(r, cfg) for r in replicas]
    data_parallel_step(replicas, opts, [batch.take(slice(0, n // 2)), batch.take(slice(n // 2, n))], cfg)
    for p, q, r in zip(single.parameters(), replicas[0].parameters(), replicas[1].parameters()):
        assert torch.equal(q, r)
        assert torch.allclose(p, q, atol=1e-6)


def test_trainer_resume(tmp_path):
    cfg = PPOConfig(num_envs=2, steps_per_iteration=16, mini_batch_size=16, epochs=1, total_samples=32 * 4)
    t = Trainer(_envs(2), init_policy(NET, 0), cfg, tmp_path, checkpoint_every=1)
    t.iterate()
    t.iterate()
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 3
    other = Trainer(_envs(2), init_policy(NET, 7), cfg, tmp_path)
    other.resume(tmp_path / "checkpoint.ckpt")
    assert other.iteration == 2 and other.samples == 64
    for p, q in zip(t.net.parameters(), other.net.parameters()):
        assert torch.equal(p, q)
    for s1, s2 in zip(t.slots, other.slots):
        assert s1.action_rng.random() == s2.action_rng.random()
    other.train()
    assert other.iteration == 4
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 5


def test_trainer_rejects_env_count_mismatch():
    with pytest.raises(ValueError):
        Trainer(_envs(1), init_policy(NET, 0), PPOConfig(num_envs=2, steps_per_iteration=8, mini_batch_size=8))
