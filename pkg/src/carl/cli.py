"""Command-line entry point: train, eval, bench-mc and render-frame."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from carl import config as C
from carl.env import CarlEnv, load_map, load_replay, make_envs, replay_frame
from carl.metrics import EpisodeResult, driving_score, episode_cls, expected_ds, monte_carlo_ds, write_report
from carl.observation import CARLA_CHANNELS, NUPLAN_CHANNELS
from carl.policy import CheckpointError, NetConfig, load_checkpoint, to_action
from carl.rng import int_seed, stream
from carl.trainer import Trainer, _infer, init_policy

log = logging.getLogger("carl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise C.ConfigError(message)


def net_config(cfg: dict, env: CarlEnv) -> NetConfig:
    return NetConfig.preset(cfg["net"]["preset"], env.raster_shape[0], env.n_meas)


# --- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.resume and not args.config:
        resume = Path(args.resume)
        cfg_path = (resume if resume.is_dir() else resume.parent) / "config.yaml"
        cfg = C.load_config(cfg_path, args.set)
    else:
        cfg = C.load_config(args.config, args.set)
    out = C.run_dir(cfg)
    C.dump(cfg, out / "config.yaml")
    env_cfg = C.env_config(cfg)
    ppo = C.ppo_config(cfg)
    envs = make_envs(env_cfg, ppo.num_envs)
    net = init_policy(net_config(cfg, envs[0]), cfg["run"]["seed"])
    trainer = Trainer(envs, net, ppo, out, cfg["run"]["collection"], cfg["run"]["checkpoint_every"], cfg["run"]["step_timeout"])
    if args.resume:
        ckpt = Path(args.resume)
        trainer.resume(ckpt / "checkpoint.ckpt" if ckpt.is_dir() else ckpt)
        log.info("resumed at iteration %d (%d samples)", trainer.iteration, trainer.samples)

    def report(row):
        log.info("iter %d samples %d fps %.0f return %.2f rc %.1f", row["iteration"], row["samples"], row["fps"], row["mean_return"], row["mean_rc"])
        return False

    trainer.train(report)
    recent = trainer.recent_episodes(10)
    final = {
        "iterations": trainer.iteration,
        "samples": trainer.samples,
        "recent_mean_rc": float(np.mean([e["rc"] for e in recent])) if recent else None,
        "recent_mean_return": float(np.mean([e["return"] for e in recent])) if recent else None,
        "recent_collision_rate": float(np.mean([e["terminal"] == "collision" for e in recent])) if recent else None,
    }
    (out / "report.json").write_text(json.dumps(final, indent=2))
    print(json.dumps(final))
    return EXIT_OK


# --- eval ----------------------------------------------------------------------


def evaluate(cfg: dict, net, max_steps: Optional[int] = None) -> list[dict]:
    """Roll out the mean action on ``routes x repeats`` episodes; returns report rows."""
    env = CarlEnv(C.env_config(cfg), load_map(cfg["env"]["map"]))
    twin = net.inference_copy()
    seed = cfg["run"]["seed"]
    penalties = cfg["metrics"]["penalties"]
    rows = []
    for route in range(cfg["eval"]["routes"]):
        route_seed = int_seed(seed, "eval_route", route)
        for rep in range(cfg["eval"]["repeats"]):
            ep_seed = int_seed(seed, "eval_repeat", route, rep)
            obs = env.reset(ep_seed, route_seed)
            steps = 0
            while True:
                a, b, _ = _infer(twin, [obs])
                res = env.step(to_action(a[0] / (a[0] + b[0])))
                obs = res.obs
                steps += 1
                if "episode" in res.info:
                    ep = res.info["episode"]
                    break
                if max_steps is not None and steps >= max_steps:
                    ep = dict(env.stats, route_km=env.route.total_length / 1000.0, duration_s=env.t, mean_speed=env.stats["speed_sum"] / steps, seed=ep_seed)
                    break
            ep["rc"] = min(100.0, ep["rc"])
            result = EpisodeResult.from_episode(ep)
            rows.append(
                {
                    "route": route,
                    "repeat": rep,
                    "seed": ep_seed,
                    "ds": driving_score(result, penalties),
                    "cls": episode_cls(ep),
                    "rc": result.rc,
                    "terminal": ep["terminal"],
                    "route_km": result.route_km,
                    "duration_s": result.duration_s,
                    "mean_speed": result.mean_speed,
                    "infractions": result.infractions,
                }
            )
    return rows


def cmd_eval(args) -> int:
    cfg = C.load_config(args.config, args.set)
    out = Path(args.out) if args.out else C.run_dir(cfg) / "eval"
    C.dump(cfg, out / "config.yaml")
    env = CarlEnv(C.env_config(cfg), load_map(cfg["env"]["map"]))
    expected = net_config(cfg, env)
    try:
        net, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise RuntimeError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    if net.cfg != expected:
        raise RuntimeError(f"checkpoint network {net.cfg} does not match the configured environment ({expected})")
    rows = evaluate(cfg, net, cfg["eval"]["max_steps"])
    summary = write_report(out, rows, cfg["metrics"]["penalties"])
    print(
        f"DS {summary['ds_mean']:.2f} +- {summary['ds_std_over_repeats']:.2f}  "
        f"RC {summary['rc_mean']:.2f} +- {summary['rc_std_over_repeats']:.2f}  CLS {summary['cls_mean']:.2f}"
    )
    print("penalty table: " + ", ".join(f"{k}={v}" for k, v in sorted(summary["penalty_table"].items())))
    return EXIT_OK


# --- bench-mc --------------------------------------------------------------------


def cmd_bench_mc(args) -> int:
    if args.scenarios < 0 or args.trials < 1:
        raise C.ConfigError("--scenarios must be >= 0 and --trials >= 1")
    if not (0 <= args.success_rate <= 1 and 0 <= args.penalty <= 1):
        raise C.ConfigError("--success-rate and --penalty must lie in [0, 1]")
    t0 = time.perf_counter()
    ds, inf = monte_carlo_ds(args.scenarios, args.success_rate, args.penalty, args.trials, stream(args.seed, "bench_mc"))
    elapsed = time.perf_counter() - t0
    ds_cf, inf_cf = expected_ds(args.scenarios, args.success_rate, args.penalty)
    result = {"mean_ds": ds, "mean_infractions": inf, "closed_form_ds": ds_cf, "closed_form_infractions": inf_cf, "seconds": elapsed}
    if args.json:
        print(json.dumps(result))
    else:
        print(f"mean DS {ds:.4f}  mean infractions {inf:.3f}  (closed form {ds_cf:.4f} / {inf_cf:.3f}, {args.trials} trials, {elapsed:.3f} s)")
    return EXIT_OK


# --- render-frame -----------------------------------------------------------------


def channel_grid(raster: np.ndarray, pad: int = 2) -> np.ndarray:
    """Tile ``[C, H, W]`` floats in [0, 1] into one uint8 image, row-major by channel."""
    c, h, w = raster.shape
    cols = int(math.ceil(math.sqrt(c)))
    rows = int(math.ceil(c / cols))
    img = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 64, np.uint8)
    tiles = np.round(np.clip(raster, 0, 1) * 255).astype(np.uint8)
    for i in range(c):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        img[y : y + h, x : x + w] = tiles[i]
    return img


def cmd_render_frame(args) -> int:
    try:
        replay = load_replay(args.replay)
    except FileNotFoundError:
        raise C.ConfigError(f"replay file {args.replay} not found") from None
    raster = replay_frame(replay, args.index)
    Image.fromarray(channel_grid(raster)).save(args.out, format="PNG")
    names = CARLA_CHANNELS if replay["config"]["profile"] == "carla" else NUPLAN_CHANNELS
    print(f"wrote {args.out} ({', '.join(names)})")
    return EXIT_OK


# --- entry --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carl", description="Route-completion driving RL: training, evaluation and metric tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run PPO training")
    t.add_argument("--config", help="YAML config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    t.add_argument("--resume", help="checkpoint file or run directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the mean action")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--out", help="report directory (default: <run dir>/eval)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-mc", help="Monte-Carlo driving score under independent scenario failures")
    b.add_argument("--scenarios", type=int, default=90)
    b.add_argument("--success-rate", type=float, default=0.84)
    b.add_argument("--penalty", type=float, default=0.65)
    b.add_argument("--trials", type=int, default=10000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", action="store_true", help="print a JSON object")
    b.set_defaults(func=cmd_bench_mc)

    r = sub.add_parser("render-frame", help="write one replay step as a channel-tiled PNG")
    r.add_argument("replay")
    r.add_argument("index", type=int)
    r.add_argument("out")
    r.set_defaults(func=cmd_render_frame)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
