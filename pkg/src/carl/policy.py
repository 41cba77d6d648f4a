"""Policy/value network with a Beta action head, plus checkpoint I/O."""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

BETA_EPS = 1e-6
ACTION_DIM = 2
N_EXTRAS = 5


def softplus_plus_one(x):
    """1 + log(1 + exp(x)), stable for large |x| and never below 1."""
    if isinstance(x, torch.Tensor):
        return 1.0 + F.softplus(x)
    x = float(x)
    return 1.0 + (x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x)))


class BetaStats:
    """Closed-form statistics of independent per-dimension Beta distributions."""

    def __init__(self, alpha: torch.Tensor, beta: torch.Tensor):
        self.alpha = alpha
        self.beta = beta

    @property
    def mean(self) -> torch.Tensor:
        return self.alpha / (self.alpha + self.beta)

    @property
    def mode(self) -> torch.Tensor:
        s = self.alpha + self.beta
        interior = s > 2
        safe = torch.where(interior, s - 2, torch.ones_like(s))
        return torch.where(interior, (self.alpha - 1) / safe, torch.full_like(s, 0.5))

    def log_beta_fn(self) -> torch.Tensor:
        return torch.lgamma(self.alpha) + torch.lgamma(self.beta) - torch.lgamma(self.alpha + self.beta)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Per-dimension log density; x is clamped into [eps, 1 - eps]."""
        x = x.clamp(BETA_EPS, 1 - BETA_EPS)
        return (self.alpha - 1) * torch.log(x) + (self.beta - 1) * torch.log1p(-x) - self.log_beta_fn()

    def entropy(self) -> torch.Tensor:
        a, b = self.alpha, self.beta
        return (
            self.log_beta_fn()
            - (a - 1) * torch.digamma(a)
            - (b - 1) * torch.digamma(b)
            + (a + b - 2) * torch.digamma(a + b)
        )

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw via the ratio of two Gamma variates; results lie strictly inside (0, 1)."""
        a = self.alpha.detach().cpu().double().numpy()
        b = self.beta.detach().cpu().double().numpy()
        return beta_sample(a, b, rng)


def beta_sample(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ga = rng.standard_gamma(a)
    gb = rng.standard_gamma(b)
    return np.clip(ga / (ga + gb), BETA_EPS, 1 - BETA_EPS)


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 10
    raster: int = 128
    n_meas: int = 7
    n_extras: int = N_EXTRAS
    # (out_channels, kernel, stride); the first layer is a non-overlapping patch layer
    convs: tuple = ((16, 4, 4), (32, 3, 2), (32, 3, 2))
    pool: int = 4
    feat: int = 128
    meas_hidden: int = 64
    hidden: int = 128
    action_dim: int = ACTION_DIM

    @classmethod
    def preset(cls, name: str, in_channels: int = 10, n_meas: int = 7) -> "NetConfig":
        if name == "desk":
            return cls(in_channels=in_channels, n_meas=n_meas)
        if name == "paper":
            return cls(
                in_channels=in_channels,
                raster=256,
                n_meas=n_meas,
                convs=((32, 2, 2), (64, 3, 2), (128, 3, 2), (128, 3, 2), (256, 3, 2), (256, 3, 2)),
                pool=4,
                feat=256,
                meas_hidden=128,
                hidden=256,
            )
        raise ValueError(f"unknown network preset {name!r}")


class Patchify(nn.Module):
    """Conv with kernel == stride, computed as reshape + linear (much faster on CPU).

    Accepts a raster ``(B, C, H, W)`` or one already laid out as patches
    ``(B, H/k, W/k, C*k*k)`` (see :func:`patchify`).
    """

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__()
        self.k = k
        self.proj = nn.Linear(cin * k * k, cout)
        self._buf: Optional[torch.Tensor] = None

    def _as_float(self, x: torch.Tensor) -> torch.Tensor:
        # Fresh large allocations are dominated by page faults; reuse one buffer.
        dtype = self.proj.weight.dtype
        if x.dtype == dtype:
            return x
        if not self.training:
            # inference must stay reentrant across collector threads
            return x.to(dtype)
        if self._buf is None or self._buf.shape != x.shape or self._buf.dtype != dtype:
            self._buf = torch.empty(x.shape, dtype=dtype)
        return self._buf.copy_(x)

    def forward(self, x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
        """``scale`` multiplies the input; applied after the matmul so uint8 input is converted only once."""
        if x.shape[-1] != self.proj.in_features:
            x = patchify(x, self.k)
        y = F.linear(self._as_float(x), self.proj.weight)
        if scale != 1.0:
            y = y * scale
        return (y + self.proj.bias).permute(0, 3, 1, 2)


def patchify(x, k: int):
    """``(B, C, H, W)`` -> ``(B, H/k, W/k, C*k*k)``; works on numpy arrays and tensors."""
    b, c, h, w = x.shape
    if isinstance(x, np.ndarray):
        return np.ascontiguousarray(x.reshape(b, c, h // k, k, w // k, k).transpose(0, 2, 4, 1, 3, 5)).reshape(b, h // k, w // k, c * k * k)
    return x.reshape(b, c, h // k, k, w // k, k).permute(0, 2, 4, 1, 3, 5).reshape(b, h // k, w // k, c * k * k)


def _mlp(sizes) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Linear(a, b), nn.LayerNorm(b), nn.ReLU()]
    return nn.Sequential(*layers)


class PolicyNet(nn.Module):
    """Conv encoder + measurement MLP -> fused trunk -> Beta head; value head also sees critic extras."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for i, (cout, k, s) in enumerate(cfg.convs):
            if i == 0:
                if k != s:
                    raise ValueError("first layer must have kernel == stride")
                layers.append(Patchify(cin, cout, k))
            else:
                layers.append(nn.Conv2d(cin, cout, k, s, padding=k // 2))
            layers += [nn.GroupNorm(1, cout), nn.ReLU()]
            cin = cout
        layers.append(nn.AdaptiveAvgPool2d(cfg.pool))
        layers.append(nn.Flatten())
        self.encoder = nn.Sequential(*layers)
        self.bev_fc = _mlp([cin * cfg.pool * cfg.pool, cfg.feat])
        self.meas = _mlp([cfg.n_meas, cfg.meas_hidden, cfg.meas_hidden])
        self.trunk = _mlp([cfg.feat + cfg.meas_hidden, cfg.hidden, cfg.hidden])
        self.action_head = nn.Linear(cfg.hidden, 2 * cfg.action_dim)
        self.value_mlp = _mlp([cfg.hidden + cfg.n_extras, cfg.hidden])
        self.value_head = nn.Linear(cfg.hidden, 1)
        with torch.no_grad():
            self.action_head.weight.mul_(0.01)
            self.action_head.bias.zero_()

    @property
    def raster_shape(self) -> tuple:
        return (self.cfg.in_channels, self.cfg.raster, self.cfg.raster)

    @property
    def patched_shape(self) -> tuple:
        k = self.cfg.convs[0][1]
        return (self.cfg.raster // k, self.cfg.raster // k, self.cfg.in_channels * k * k)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, raster: torch.Tensor, meas: torch.Tensor, extras: torch.Tensor):
        """Returns ``(alpha, beta, value)``. ``raster`` may be uint8 (0..255) or float in [0, 1]."""
        if raster.dim() != 4 or tuple(raster.shape[1:]) not in (self.raster_shape, self.patched_shape):
            raise ValueError(f"raster shape {tuple(raster.shape)} does not match the network")
        if meas.shape[-1] != self.cfg.n_meas or extras.shape[-1] != self.cfg.n_extras:
            raise ValueError("measurement or extras width does not match the network")
        dtype = self.action_head.weight.dtype
        scale = 1.0 / 255.0 if raster.dtype == torch.uint8 else 1.0
        x = self.encoder[0](raster, scale)
        for layer in self.encoder[1:]:
            x = layer(x)
        h = self.trunk(torch.cat([self.bev_fc(x), self.meas(meas.to(dtype))], dim=-1))
        out = self.action_head(h)
        alpha = softplus_plus_one(out[:, : self.cfg.action_dim])
        beta = softplus_plus_one(out[:, self.cfg.action_dim :])
        value = self.value_head(self.value_mlp(torch.cat([h, extras.to(dtype)], dim=-1))).squeeze(-1)
        return alpha, beta, value

    def inference_copy(self) -> "PolicyNet":
        """Float64 twin used during collection.

        Float32 CPU kernels are not batch-invariant; running inference in
        float64 and rounding the outputs to float32 makes a batched forward
        agree exactly with per-sample forwards.
        """
        twin = copy.deepcopy(self).double()
        twin.encoder[0]._buf = None
        twin.eval()
        for p in twin.parameters():
            p.requires_grad_(False)
        return twin


def to_action(x: np.ndarray) -> np.ndarray:
    """Map Beta samples in (0, 1) to actions in [-1, 1]."""
    return 2.0 * x - 1.0


def from_action(a: np.ndarray) -> np.ndarray:
    return (np.asarray(a) + 1.0) / 2.0


# --- checkpoints ------------------------------------------------------------

MAGIC = b"CARLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict, meta: Optional[dict] = None) -> None:
    """Write named float32 arrays behind a JSON manifest (little-endian)."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"version": VERSION, "endianness": "little", "tensors": entries, "meta": meta or {}}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(data[start : start + hlen])
    base = start + hlen
    arrays = {}
    for e in header["tensors"]:
        buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_checkpoint(path, net: PolicyNet, optimizer: Optional[torch.optim.Optimizer] = None, meta: Optional[dict] = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        names = [n for n, _ in net.named_parameters()]
        steps = {}
        for idx, st in state["state"].items():
            name = names[idx]
            arrays[f"adam/{name}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[name] = float(st["step"])
        opt_meta = {"param_groups": [{k: v for k, v in g.items() if k != "params"} for g in state["param_groups"]], "steps": steps}
    full = dict(meta or {})
    full["net_config"] = asdict(net.cfg)
    full["optimizer"] = opt_meta
    save_arrays(path, arrays, full)


def load_checkpoint(path, net: Optional[PolicyNet] = None, optimizer: Optional[torch.optim.Optimizer] = None):
    """Restore a network (built from the stored config if not given) and optionally its optimizer."""
    arrays, meta = load_arrays(path)
    cfg = meta["net_config"]
    cfg = NetConfig(**{k: tuple(tuple(x) for x in v) if k == "convs" else v for k, v in cfg.items()})
    if net is None:
        net = PolicyNet(cfg)
    elif net.cfg != cfg:
        raise CheckpointError(f"checkpoint network {cfg} does not match {net.cfg}")
    sd = net.state_dict()
    for k in sd:
        key = f"param/{k}"
        if key not in arrays or tuple(arrays[key].shape) != tuple(sd[k].shape):
            raise CheckpointError(f"checkpoint tensor {k} missing or mis-shaped")
        sd[k] = torch.from_numpy(arrays[key]).to(sd[k].dtype)
    net.load_state_dict(sd)
    if optimizer is not None and meta.get("optimizer"):
        om = meta["optimizer"]
        state = optimizer.state_dict()
        names = [n for n, _ in net.named_parameters()]
        new_state = {}
        for idx, name in enumerate(names):
            if name in om["steps"]:
                new_state[idx] = {
                    "step": torch.tensor(om["steps"][name]),
                    "exp_avg": torch.from_numpy(arrays[f"adam/{name}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"]),
                }
        groups = []
        for g, saved in zip(state["param_groups"], om["param_groups"]):
            g = dict(g)
            g.update({k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()})
            groups.append(g)
        optimizer.load_state_dict({"state": new_state, "param_groups": groups})
    return net, meta
