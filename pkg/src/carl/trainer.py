"""PPO with GAE, synchronous and asynchronous rollout collection, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from carl.policy import BetaStats, PolicyNet, beta_sample, load_checkpoint, patchify, save_checkpoint, to_action
from carl.rng import int_seed, stream

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    lr: float = 2.5e-4
    lr_schedule: str = "linear"
    num_envs: int = 4
    steps_per_iteration: int = 128
    epochs: int = 3
    mini_batch_size: int = 256
    clip_coef: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    max_grad_norm: float = 0.5
    norm_adv: bool = True
    clip_vloss: bool = True
    total_samples: int = 1_000_000
    adam_eps: float = 1e-5
    # gradients are accumulated over chunks of this many samples to bound memory
    grad_chunk: int = 512
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.steps_per_iteration

    @property
    def total_iterations(self) -> int:
        return max(1, self.total_samples // self.batch_size)

    def validate(self) -> None:
        for name in ("lr", "clip_coef", "entropy_coef", "value_coef", "gamma", "gae_lambda", "max_grad_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ppo.{name} must be positive")
        for name in ("num_envs", "steps_per_iteration", "epochs", "mini_batch_size", "total_samples", "grad_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"ppo.{name} must be at least 1")
        if self.gamma > 1 or self.gae_lambda > 1:
            raise ValueError("ppo.gamma and ppo.gae_lambda must not exceed 1")
        if self.batch_size % self.mini_batch_size:
            raise ValueError(f"batch size {self.batch_size} is not divisible by ppo.mini_batch_size {self.mini_batch_size}")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError("ppo.lr_schedule must be 'linear' or 'constant'")

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "PPOConfig":
        kw.setdefault("epochs", 3 if profile == "carla" else 4)
        return cls(**kw)


def off_policy_steps(cfg_or_steps, epochs: Optional[int] = None) -> int:
    """Gradient steps per iteration beyond the first.

    Accepts a :class:`PPOConfig` or ``(steps_per_epoch, epochs)``.
    """
    if isinstance(cfg_or_steps, PPOConfig):
        steps, epochs = cfg_or_steps.batch_size // cfg_or_steps.mini_batch_size, cfg_or_steps.epochs
    else:
        steps = int(cfg_or_steps)
    if steps < 1 or epochs is None or epochs < 1:
        raise ValueError("need at least one step and one epoch")
    return steps * epochs - 1


def lr_at(iteration: int, cfg: PPOConfig) -> float:
    total = cfg.total_iterations
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - iteration / total)


def compute_gae(rewards, values, next_values, terminated, dones, gamma: float, lam: float):
    """Generalized advantage estimation over ``[envs, steps]`` arrays.

    ``terminated`` zeroes the bootstrap; ``dones`` (terminated or truncated)
    cuts the recursion. Truncated steps therefore bootstrap from
    ``next_values`` but do not leak advantages across episodes.
    """
    r = np.asarray(rewards, np.float64)
    v = np.asarray(values, np.float64)
    nv = np.asarray(next_values, np.float64)
    term = np.asarray(terminated, np.float64)
    done = np.asarray(dones, np.float64)
    squeeze = r.ndim == 1
    if squeeze:
        r, v, nv, term, done = (x[None] for x in (r, v, nv, term, done))
    delta = r + gamma * nv * (1.0 - term) - v
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        last = delta[:, t] + gamma * lam * (1.0 - done[:, t]) * last
        adv[:, t] = last
    ret = adv + v
    if squeeze:
        return adv[0], ret[0]
    return adv, ret


@dataclass
class RolloutBuffer:
    """Transitions laid out ``[envs, steps]``."""

    rasters: np.ndarray
    meas: np.ndarray
    extras: np.ndarray
    actions: np.ndarray  # Beta-space samples in (0, 1)
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    next_values: np.ndarray
    episodes: list = field(default_factory=list)
    faults: int = 0

    @classmethod
    def allocate(cls, n_envs: int, steps: int, raster_shape, n_meas: int, n_extras: int, action_dim: int = 2) -> "RolloutBuffer":
        z = lambda *s, dt=np.float32: np.zeros((n_envs, steps) + tuple(s), dt)
        return cls(
            z(*raster_shape, dt=np.uint8),
            z(n_meas),
            z(n_extras),
            z(action_dim),
            z(),
            z(),
            z(),
            z(dt=bool),
            z(dt=bool),
            z(),
        )

    @property
    def dones(self) -> np.ndarray:
        return self.terminated | self.truncated

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def env_sequence(self, e: int) -> dict:
        return {f.name: getattr(self, f.name)[e] for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}


@dataclass
class TrainStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    fps: float = 0.0
    samples: int = 0
    initial_loss: float = float("nan")
    grad_norm: float = 0.0
    lr: float = 0.0


class NonFiniteLossError(RuntimeError):
    pass


# --- collection -------------------------------------------------------------


def _obs_tensors(obs_list):
    r = torch.from_numpy(np.stack([o[0] for o in obs_list]))
    m = torch.from_numpy(np.stack([o[1] for o in obs_list]))
    e = torch.from_numpy(np.stack([o[2] for o in obs_list]))
    return r, m, e


def _infer(net: PolicyNet, obs_list):
    """Float64 forward rounded to float32: ``(alpha, beta, value)`` as float64 arrays of float32 values."""
    with torch.no_grad():
        a, b, v = net(*_obs_tensors(obs_list))
    f = lambda t: t.float().double().numpy()
    return f(a), f(b), f(v)


def _logp(alpha: np.ndarray, beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        d = BetaStats(torch.from_numpy(alpha), torch.from_numpy(beta))
        return d.log_prob(torch.from_numpy(x)).sum(-1).float().numpy()


class EnvSlot:
    """Per-environment collection state that persists across iterations."""

    def __init__(self, env, index: int, seed: int):
        self.env = env
        self.index = index
        self.action_rng = stream(seed, "action", index)
        self.reset_rng = stream(seed, "episode", index)
        self.obs = None
        self.faults = 0

    def reset(self):
        self.obs = self.env.reset(int(self.reset_rng.integers(2**31)))
        return self.obs

    def ensure(self):
        if self.obs is None:
            self.reset()
        return self.obs


def make_slots(envs: Sequence, seed: int) -> list[EnvSlot]:
    return [EnvSlot(env, i, seed) for i, env in enumerate(envs)]


def _record(buf: RolloutBuffer, e: int, t: int, obs, x, logp, value, res) -> None:
    buf.rasters[e, t] = obs[0]
    buf.meas[e, t] = obs[1]
    buf.extras[e, t] = obs[2]
    buf.actions[e, t] = x
    buf.log_probs[e, t] = logp
    buf.values[e, t] = value
    buf.rewards[e, t] = res.reward
    buf.terminated[e, t] = res.terminated
    buf.truncated[e, t] = res.truncated and not res.terminated


def _cut_after_fault(buf: RolloutBuffer, e: int, t: int, value: float) -> None:
    # the episode ends early: treat the previous transition as a time-limit cut
    if t > 0 and not (buf.terminated[e, t - 1] or buf.truncated[e, t - 1]):
        buf.truncated[e, t - 1] = True
        buf.next_values[e, t - 1] = value


def _safe_step(slot: EnvSlot, action: np.ndarray, timeout: Optional[float]):
    """Step the env; on an exception or an over-long step, restart it and report ``None``."""
    t0 = time.perf_counter()
    try:
        res = slot.env.step(action)
    except Exception as exc:  # environment fault: restart and carry on
        log.warning("env %d fault (%s); restarting", slot.index, exc)
        slot.faults += 1
        slot.reset()
        return None
    if timeout is not None and time.perf_counter() - t0 > timeout:
        log.warning("env %d step exceeded %.2fs; restarting", slot.index, timeout)
        slot.faults += 1
        slot.reset()
        return None
    return res


def collect_sync(slots: Sequence[EnvSlot], net: PolicyNet, steps: int, step_timeout: Optional[float] = None) -> RolloutBuffer:
    """Lock-step collection: one batched forward per step over all environments."""
    obs0 = [s.ensure() for s in slots]
    buf = RolloutBuffer.allocate(len(slots), steps, obs0[0][0].shape, len(obs0[0][1]), len(obs0[0][2]))
    t_idx = [0] * len(slots)
    pending = list(range(len(slots)))
    while pending:
        alpha, beta, value = _infer(net, [slots[e].obs for e in pending])
        finals = []
        for k, e in enumerate(pending):
            slot = slots[e]
            x = beta_sample(alpha[k], beta[k], slot.action_rng)
            logp = _logp(alpha[k : k + 1], beta[k : k + 1], x[None])[0]
            res = _safe_step(slot, to_action(x), step_timeout)
            if res is None:
                _cut_after_fault(buf, e, t_idx[e], value[k])
                continue
            t = t_idx[e]
            _record(buf, e, t, slot.obs, x, logp, value[k], res)
            if t > 0 and not buf.terminated[e, t - 1] and not buf.truncated[e, t - 1]:
                buf.next_values[e, t - 1] = value[k]
            if res.terminated or res.truncated:
                if res.truncated and not res.terminated:
                    finals.append((e, t, res.obs))
                if res.info.get("episode"):
                    buf.episodes.append(res.info["episode"])
                slot.reset()
            else:
                slot.obs = res.obs
            t_idx[e] += 1
        if finals:
            _, _, fv = _infer(net, [o for _, _, o in finals])
            for (e, t, _), v in zip(finals, fv):
                buf.next_values[e, t] = v
        pending = [e for e in pending if t_idx[e] < steps]
    _bootstrap_tail(slots, net, buf, range(len(slots)))
    buf.faults = sum(s.faults for s in slots)
    return buf


def _bootstrap_tail(slots, net, buf, envs) -> None:
    envs = [e for e in envs if not (buf.terminated[e, -1] or buf.truncated[e, -1])]
    if envs:
        _, _, v = _infer(net, [slots[e].obs for e in envs])
        for e, val in zip(envs, v):
            buf.next_values[e, -1] = val


def _run_env(slot: EnvSlot, net: PolicyNet, steps: int, buf: RolloutBuffer, step_timeout: Optional[float], episodes: list) -> None:
    e = slot.index
    slot.ensure()
    t = 0
    while t < steps:
        alpha, beta, value = _infer(net, [slot.obs])
        x = beta_sample(alpha[0], beta[0], slot.action_rng)
        logp = _logp(alpha, beta, x[None])[0]
        res = _safe_step(slot, to_action(x), step_timeout)
        if res is None:
            _cut_after_fault(buf, e, t, value[0])
            continue
        _record(buf, e, t, slot.obs, x, logp, value[0], res)
        if t > 0 and not buf.terminated[e, t - 1] and not buf.truncated[e, t - 1]:
            buf.next_values[e, t - 1] = value[0]
        if res.terminated or res.truncated:
            if res.truncated and not res.terminated:
                buf.next_values[e, t] = _infer(net, [res.obs])[2][0]
            if res.info.get("episode"):
                episodes.append(res.info["episode"])
            slot.reset()
        else:
            slot.obs = res.obs
        t += 1
    if not (buf.terminated[e, -1] or buf.truncated[e, -1]):
        buf.next_values[e, -1] = _infer(net, [slot.obs])[2][0]


def collect_async(slots: Sequence[EnvSlot], net: PolicyNet, steps: int, step_timeout: Optional[float] = None) -> RolloutBuffer:
    """Each environment steps independently with single-sample forwards on its own thread.

    Returns only after every environment has contributed ``steps``
    transitions, so the following update never overlaps collection.
    """
    obs0 = [s.ensure() for s in slots]
    buf = RolloutBuffer.allocate(len(slots), steps, obs0[0][0].shape, len(obs0[0][1]), len(obs0[0][2]))
    per_env = [[] for _ in slots]
    errors = []

    def work(slot):
        try:
            _run_env(slot, net, steps, buf, step_timeout, per_env[slot.index])
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,), daemon=True) for s in slots]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    for eps in per_env:
        buf.episodes.extend(eps)
    buf.faults = sum(s.faults for s in slots)
    return buf


# --- update -----------------------------------------------------------------


def ppo_objective(net: PolicyNet, rasters, meas, extras, actions, old_logp, old_values, adv, returns, cfg: PPOConfig):
    """Loss terms of one mini-batch (means over its samples)."""
    alpha, beta, value = net(rasters, meas, extras)
    dist = BetaStats(alpha, beta)
    new_logp = dist.log_prob(actions).sum(-1)
    logratio = new_logp - old_logp
    ratio = logratio.exp()
    pg = torch.max(-adv * ratio, -adv * ratio.clamp(1 - cfg.clip_coef, 1 + cfg.clip_coef)).mean()
    if cfg.clip_vloss:
        v_clip = old_values + (value - old_values).clamp(-cfg.clip_coef, cfg.clip_coef)
        vloss = torch.max((value - returns) ** 2, (v_clip - returns) ** 2).mean()
    else:
        vloss = ((value - returns) ** 2).mean()
    ent = dist.entropy().sum(-1).mean()
    loss = pg + cfg.value_coef * vloss - cfg.entropy_coef * ent
    with torch.no_grad():
        clipfrac = ((ratio - 1).abs() > cfg.clip_coef).float().mean()
        kl = ((ratio - 1) - logratio).mean()
    return loss, pg, vloss, ent, clipfrac, kl


@dataclass
class Batch:
    rasters: torch.Tensor
    meas: torch.Tensor
    extras: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in fields(self)))


def flatten(buf: RolloutBuffer, cfg: PPOConfig, patch: Optional[int] = None) -> Batch:
    """GAE plus per-batch advantage normalization, flattened env-major."""
    adv, ret = compute_gae(buf.rewards, buf.values, buf.next_values, buf.terminated, buf.dones, cfg.gamma, cfg.gae_lambda)
    adv = adv.reshape(-1)
    if cfg.norm_adv:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = adv.shape[0]
    rasters = buf.rasters.reshape((n,) + buf.rasters.shape[2:])
    if patch:
        rasters = patchify(rasters, patch)
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a).reshape(n, *a.shape[2:]).astype(np.float32))
    return Batch(
        torch.from_numpy(rasters),
        t(buf.meas),
        t(buf.extras),
        t(buf.actions),
        t(buf.log_probs),
        t(buf.values),
        torch.from_numpy(adv.astype(np.float32)),
        torch.from_numpy(ret.reshape(-1).astype(np.float32)),
    )


def _backward_chunked(net, mb: Batch, cfg: PPOConfig):
    """Accumulate gradients of the mini-batch mean loss in memory-bounded chunks."""
    n = len(mb)
    sums = np.zeros(6)
    for start in range(0, n, cfg.grad_chunk):
        c = mb.take(slice(start, start + cfg.grad_chunk))
        terms = ppo_objective(net, c.rasters, c.meas, c.extras, c.actions, c.log_probs, c.values, c.advantages, c.returns, cfg)
        w = len(c) / n
        if not torch.isfinite(terms[0]):
            raise NonFiniteLossError(
                f"non-finite loss (policy {terms[1].item()}, value {terms[2].item()}, entropy {terms[3].item()})"
            )
        (terms[0] * w).backward()
        sums += w * np.array([t.item() for t in terms])
    return sums


def ppo_update(batch: Batch, net: PolicyNet, optimizer: torch.optim.Optimizer, cfg: PPOConfig, lr: Optional[float] = None, rng: Optional[np.random.Generator] = None) -> TrainStats:
    """Clipped PPO over shuffled mini-batches for ``cfg.epochs`` epochs.

    On a non-finite loss the parameters and optimizer state from before the
    call are restored and :class:`NonFiniteLossError` is raised.
    """
    lr = cfg.lr if lr is None else lr
    rng = rng if rng is not None else stream(cfg.seed, "shuffle")
    for g in optimizer.param_groups:
        g["lr"] = lr
    backup = ({k: v.clone() for k, v in net.state_dict().items()}, _clone_opt(optimizer))
    params = [p for p in net.parameters() if p.requires_grad]
    n = len(batch)
    agg = np.zeros(6)
    count = 0
    stats = TrainStats(samples=n, lr=lr)
    norms = []
    net.train()
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.mini_batch_size):
                mb = batch.take(torch.from_numpy(order[start : start + cfg.mini_batch_size]))
                optimizer.zero_grad(set_to_none=True)
                sums = _backward_chunked(net, mb, cfg)
                if count == 0:
                    stats.initial_loss = float(sums[0])
                norms.append(float(torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)))
                optimizer.step()
                agg += sums
                count += 1
    except NonFiniteLossError:
        net.load_state_dict(backup[0])
        optimizer.load_state_dict(backup[1])
        raise
    agg /= count
    stats.policy_loss, stats.value_loss, stats.entropy, stats.clip_fraction, stats.approx_kl = agg[1], agg[2], agg[3], agg[4], agg[5]
    stats.grad_norm = float(np.mean(norms))
    return stats


def _clone_opt(optimizer):
    sd = optimizer.state_dict()
    return {
        "state": {k: {n: (t.clone() if torch.is_tensor(t) else t) for n, t in v.items()} for k, v in sd["state"].items()},
        "param_groups": [dict(g) for g in sd["param_groups"]],
    }


def make_optimizer(net: PolicyNet, cfg: PPOConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=cfg.lr, eps=cfg.adam_eps)


# --- data-parallel gradient averaging ----------------------------------------


def average_gradients(replicas: Sequence[PolicyNet]) -> None:
    """Replace every replica's gradients by the element-wise mean across replicas."""
    groups = zip(*[list(r.parameters()) for r in replicas])
    for ps in groups:
        grads = [p.grad for p in ps if p.grad is not None]
        if not grads:
            continue
        mean = torch.stack(grads).mean(0)
        for p in ps:
            p.grad = mean.clone()


def data_parallel_step(replicas: Sequence[PolicyNet], optimizers, shards: Sequence[Batch], cfg: PPOConfig) -> list[float]:
    """One synchronized step: each worker thread computes its shard gradient, then all average and step.

    With equal shard sizes this equals one step on the union of the shards.
    """
    losses = [0.0] * len(replicas)

    def work(i):
        optimizers[i].zero_grad(set_to_none=True)
        losses[i] = float(_backward_chunked(replicas[i], shards[i], cfg)[0])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(replicas))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    average_gradients(replicas)
    for r, opt in zip(replicas, optimizers):
        torch.nn.utils.clip_grad_norm_(r.parameters(), cfg.max_grad_norm)
        opt.step()
    return losses


# --- training loop -----------------------------------------------------------

METRIC_FIELDS = (
    "iteration",
    "samples",
    "fps",
    "lr",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "episodes",
    "mean_return",
    "mean_rc",
    "collision_rate",
    "faults",
)


class Trainer:
    """Collect / update loop with CSV metrics, periodic checkpoints and resume."""

    def __init__(
        self,
        envs: Sequence,
        net: PolicyNet,
        cfg: PPOConfig,
        out_dir: Optional[str | Path] = None,
        collection: str = "sync",
        checkpoint_every: int = 10,
        step_timeout: Optional[float] = None,
    ):
        if len(envs) != cfg.num_envs:
            raise ValueError(f"got {len(envs)} environments, config asks for {cfg.num_envs}")
        if collection not in ("sync", "async"):
            raise ValueError("collection must be 'sync' or 'async'")
        self.envs = list(envs)
        self.net = net
        self.cfg = cfg
        self.optimizer = make_optimizer(net, cfg)
        self.slots = make_slots(self.envs, cfg.seed)
        self.shuffle_rng = stream(cfg.seed, "shuffle")
        self.iteration = 0
        self.samples = 0
        self.collection = collection
        self.checkpoint_every = checkpoint_every
        self.step_timeout = step_timeout
        self.out_dir = Path(out_dir) if out_dir else None
        self.history: list[dict] = []
        self.episodes: list[dict] = []
        first = net.cfg.convs[0]
        self.patch = first[1] if first[1] == first[2] else None

    def collect(self) -> RolloutBuffer:
        twin = self.net.inference_copy()
        fn = collect_async if self.collection == "async" else collect_sync
        return fn(self.slots, twin, self.cfg.steps_per_iteration, self.step_timeout)

    def iterate(self) -> dict:
        t0 = time.perf_counter()
        buf = self.collect()
        batch = flatten(buf, self.cfg, self.patch)
        lr = lr_at(self.iteration, self.cfg)
        try:
            stats = ppo_update(batch, self.net, self.optimizer, self.cfg, lr, self.shuffle_rng)
        except NonFiniteLossError as exc:
            log.error("iteration %d aborted: %s", self.iteration, exc)
            stats = TrainStats(samples=len(batch), lr=lr, policy_loss=math.nan, value_loss=math.nan, entropy=math.nan)
        self.iteration += 1
        self.samples += len(batch)
        self.episodes.extend(buf.episodes)
        eps = buf.episodes
        row = {
            "iteration": self.iteration,
            "samples": self.samples,
            "fps": len(batch) / (time.perf_counter() - t0),
            "lr": lr,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
            "episodes": len(eps),
            "mean_return": float(np.mean([e["return"] for e in eps])) if eps else math.nan,
            "mean_rc": float(np.mean([e["rc"] for e in eps])) if eps else math.nan,
            "collision_rate": float(np.mean([e.get("terminal") == "collision" for e in eps])) if eps else math.nan,
            "faults": buf.faults,
        }
        self.history.append(row)
        if self.out_dir:
            self._append_csv(row)
            if self.iteration % self.checkpoint_every == 0:
                self.save()
        return row

    def train(self, callback: Optional[Callable[[dict], bool]] = None) -> list[dict]:
        """Run until ``total_samples``; ``callback`` returning True stops early."""
        while self.iteration < self.cfg.total_iterations:
            row = self.iterate()
            if callback is not None and callback(row):
                break
        if self.out_dir:
            self.save()
        return self.history

    def recent_episodes(self, n: int = 10) -> list[dict]:
        return self.episodes[-n:]

    def _append_csv(self, row: dict) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            if new:
                w.writeheader()
            w.writerow(row)

    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.ckpt"

    def save(self, path: Optional[str | Path] = None) -> Path:
        path = Path(path) if path else self.checkpoint_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "iteration": self.iteration,
            "samples": self.samples,
            "ppo": asdict(self.cfg),
            "shuffle_rng": _to_json(self.shuffle_rng.bit_generator.state),
            "slots": [
                {"action_rng": _to_json(s.action_rng.bit_generator.state), "reset_rng": _to_json(s.reset_rng.bit_generator.state)}
                for s in self.slots
            ],
        }
        save_checkpoint(path, self.net, self.optimizer, meta)
        return path

    def resume(self, path: str | Path) -> None:
        """Restore weights, optimizer, counters and RNG streams; episodes restart fresh."""
        _, meta = load_checkpoint(path, self.net, self.optimizer)
        self.iteration = int(meta["iteration"])
        self.samples = int(meta["samples"])
        self.shuffle_rng.bit_generator.state = _from_json(meta["shuffle_rng"])
        for slot, st in zip(self.slots, meta["slots"]):
            slot.action_rng.bit_generator.state = _from_json(st["action_rng"])
            slot.reset_rng.bit_generator.state = _from_json(st["reset_rng"])
            slot.obs = None


def _to_json(obj):
    """Bit-generator state with numpy arrays turned into tagged lists."""
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.asarray(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_json(v) for k, v in obj.items()}
    return obj


def init_policy(net_cfg, seed: int) -> PolicyNet:
    """Build a network with weights drawn from the run's policy-init stream."""
    with torch.random.fork_rng():
        torch.manual_seed(int_seed(seed, "policy_init"))
        return PolicyNet(net_cfg)
