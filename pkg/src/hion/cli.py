"""Command-line entry point: ``hion {train,finetune,tpbvp,simulate,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import Checkpoint
from .controller import TmanoController
from .errors import ConfigError, HionError, NumericOverflowError, SimulationAborted, TrainingAborted
from .simulator import HionPolicy, run_closed_loop, tpbvp_trajectory, write_metrics, write_tpbvp_csv
from .slmpc import SlmpcPolicy
from .systems import make_system
from .training import finetune, train

log = logging.getLogger("hion")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="TOML run configuration")
    common.add_argument("-o", "--outdir", required=True, help="directory for artifacts")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for gradient shards")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="hion", description="Train and run Hamiltonian-informed optimal neural controllers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a controller from scratch")
    sub.add_parser("finetune", parents=[common], help="continue training from a checkpoint")
    tp = sub.add_parser("tpbvp", parents=[common], help="solve one boundary value problem")
    tp.add_argument("--checkpoint", help="override [checkpoint].path")
    sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    sub.add_parser("compare", parents=[common], help="Hion vs SLMPC on one scenario")
    return p


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tool_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{version} ({desc})" if desc else version


def write_manifest(outdir: Path, command: str, cfg: cfgmod.RunConfig, seed, artifacts, wall: float) -> Path:
    manifest = {
        "command": command,
        "config_path": cfg.path,
        "config": cfg.raw,
        "seed": seed,
        "version": _tool_version(),
        "outdir": str(outdir),
        "wall_seconds": round(wall, 3),
        "artifacts": [{"path": p.name, "sha256": _sha256(p)} for p in artifacts],
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _hidden(values, field: str) -> tuple[int, ...]:
    if not values or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in values):
        raise ConfigError(f"{field} must be a non-empty list of positive integers", field)
    return tuple(values)


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}", "checkpoint.path") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}", "checkpoint.path") from None


def _progress(total_epochs: int, quiet: bool):
    every = max(1, total_epochs // 20)

    def report(epoch, b):
        if not quiet and (epoch % every == 0 or epoch == total_epochs - 1):
            vals = " ".join(f"{k}={v:.3e}" for k, v in b.as_dict().items())
            log.info("epoch %d/%d %s", epoch + 1, total_epochs, vals)

    return report


def _tag(sp) -> str:
    return sp if isinstance(sp, str) else format(sp, "g")


def _emit(rows, columns):
    print(",".join(columns))
    for r in rows:
        print(",".join(format(r[c], ".17g") if isinstance(r[c], float) else str(r[c]) for c in columns))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: cfgmod.RunConfig, outdir: Path, args) -> list[Path]:
    sysec = cfg.get("system")
    system = make_system(sysec.id, t_f=sysec.t_f, distribution=cfg.distribution())
    cost = cfg.cost_spec()
    model = cfg.get_or_default("model")
    tc = cfg.train_config(args.seed, args.threads)
    if tc.finetune_from:
        raise ConfigError("train.finetune_from is set; use the finetune command", "train.finetune_from")
    try:
        system.check_cost(cost)
    except ConfigError as exc:
        raise ConfigError(str(exc), "cost.id") from None
    controller = TmanoController.create(
        system, cost, np.random.default_rng(tc.seed),
        _hidden(model.state_hidden, "model.state_hidden"),
        _hidden(model.costate_hidden, "model.costate_hidden"),
    )
    ckpt, history = train(controller, tc, outdir=outdir, progress=_progress(tc.n_epochs, args.quiet))
    arts = [outdir / "checkpoint.json", outdir / "train.csv"]
    if not args.no_plots and history:
        from . import plotting

        arts.append(plotting.loss_history(history, outdir / "train_loss.png"))
    if history:
        _emit([history[-1]], ("epoch", "total", "l17b", "l17d", "l17e", "l17f"))
    return arts


def cmd_finetune(cfg: cfgmod.RunConfig, outdir: Path, args) -> list[Path]:
    tc = cfg.train_config(args.seed, args.threads)
    if not tc.finetune_from:
        raise ConfigError("missing required key train.finetune_from", "train.finetune_from")
    parent_path = Path(tc.finetune_from)
    if not parent_path.is_absolute() and cfg.path:
        parent_path = Path(cfg.path).parent / parent_path
    parent = _load_checkpoint(parent_path)
    system_id = t_f = dist = None
    if cfg.has("system"):
        s = cfg.get("system")
        system_id, t_f, dist = s.id, s.t_f, (cfg.distribution() if s.distribution else None)
    cost = cfg.cost_spec() if cfg.has("cost") else None
    if cost is not None:
        try:
            make_system(parent.system).check_cost(cost)
        except ConfigError as exc:
            raise ConfigError(str(exc), "cost.id") from None
    ckpt, history = finetune(
        parent, tc, system=system_id, cost=cost, t_f=t_f, distribution=dist,
        outdir=outdir, progress=_progress(tc.n_epochs, args.quiet),
    )
    arts = [outdir / "checkpoint.json", outdir / "train.csv"]
    if not args.no_plots and history:
        from . import plotting

        arts.append(plotting.loss_history(history, outdir / "train_loss.png"))
    if history:
        _emit([history[-1]], ("epoch", "total", "l17b", "l17d", "l17e", "l17f"))
    return arts


def _checkpoint_path(cfg: cfgmod.RunConfig, override=None) -> Path:
    path = Path(override or cfg.get("checkpoint").path)
    if override is None and not path.is_absolute() and cfg.path:
        path = Path(cfg.path).parent / path
    return path


def cmd_tpbvp(cfg: cfgmod.RunConfig, outdir: Path, args) -> list[Path]:
    ckpt = _load_checkpoint(_checkpoint_path(cfg, getattr(args, "checkpoint", None)))
    controller = ckpt.to_controller()
    tp = cfg.get("tpbvp")
    try:
        result = tpbvp_trajectory(controller, tp.x_o, tp.x_r, tp.n_points)
    except ConfigError as exc:
        raise ConfigError(str(exc), f"tpbvp.{exc.field}") from None
    arts = [write_tpbvp_csv(result, outdir / "tpbvp.csv")]
    if not args.no_plots:
        from . import plotting

        arts.append(plotting.tpbvp(result["t"], result["x"], result["u"], result["lam"], tp.x_r, outdir / "tpbvp.png"))
    err = float(result["x"][-1, 0] - np.atleast_1d(tp.x_r)[0])
    _emit([{"t_f": float(result["t"][-1]), "x0_tf": float(result["x"][-1, 0]), "terminal_error": err}],
          ("t_f", "x0_tf", "terminal_error"))
    return arts


def _run_policy(policy, scenario, outdir: Path, label: str, plots: bool, arts: list) -> dict:
    traj, m = run_closed_loop(policy, scenario)
    tag = f"{label}_{_tag(scenario.sampling_period)}"
    arts.append(traj.write_csv(outdir / f"trajectory_{tag}.csv"))
    if plots:
        from . import plotting

        arts.append(plotting.closed_loop(traj, outdir / f"trajectory_{tag}.png", title=f"{label}, sampling {_tag(scenario.sampling_period)}"))
    return {"controller": label, "sampling_period": _tag(scenario.sampling_period), "J": m["J"], "tracking": m["tracking"]}


def cmd_simulate(cfg: cfgmod.RunConfig, outdir: Path, args) -> list[Path]:
    sc = cfg.get("scenario")
    arts: list[Path] = []
    rows = []
    periods = [cfgmod.parse_sampling(v) for v in sc.sampling_periods]
    if cfg.has("checkpoint"):
        ckpt = _load_checkpoint(_checkpoint_path(cfg))
        controller = ckpt.to_controller()
        policy = HionPolicy(controller)
        for sp in periods:
            scenario = cfg.scenario(sp, ckpt.system, controller.cost, None)
            rows.append(_run_policy(policy, scenario, outdir, "hion", not args.no_plots, arts))
    elif cfg.has("slmpc"):
        system_id = sc.system or cfg.get("slmpc").system
        cost_id = sc.cost or cfg.get("slmpc").cost
        if system_id is None or cost_id is None:
            raise ConfigError("an SLMPC simulation needs scenario.system and scenario.cost", "scenario.system")
        from .systems import CostSpec

        cost = CostSpec(cost_id, sc.kappa)
        sl = cfg.slmpc_config(system_id, cost)
        scenario = cfg.scenario(sl.sampling_period, system_id, cost)
        rows.append(_run_policy(SlmpcPolicy(sl), scenario, outdir, "slmpc", not args.no_plots, arts))
    else:
        raise ConfigError("simulate needs a [checkpoint] or an [slmpc] section", "checkpoint")
    arts.append(write_metrics(outdir / "metrics.csv", rows))
    _emit(rows, ("controller", "sampling_period", "J", "tracking"))
    return arts


def cmd_compare(cfg: cfgmod.RunConfig, outdir: Path, args) -> list[Path]:
    ckpt = _load_checkpoint(_checkpoint_path(cfg))
    controller = ckpt.to_controller()
    cmp_sec = cfg.get_or_default("compare")
    arts: list[Path] = []
    rows = []
    plots = not args.no_plots
    for sp in [cfgmod.parse_sampling(v) for v in cmp_sec.hion_sampling_periods]:
        scenario = cfg.scenario(sp, ckpt.system, controller.cost)
        rows.append(_run_policy(HionPolicy(controller), scenario, outdir, "hion", plots, arts))
    sl = cfg.slmpc_config(ckpt.system, controller.cost)
    if sl.system != ckpt.system:
        raise ConfigError(f"slmpc.system {sl.system!r} does not match the checkpoint ({ckpt.system!r})", "slmpc.system")
    scenario = cfg.scenario(sl.sampling_period, ckpt.system, sl.cost)
    rows.append(_run_policy(SlmpcPolicy(sl), scenario, outdir, "slmpc", plots, arts))
    rows.sort(key=lambda r: r["J"])
    arts.append(write_metrics(outdir / "comparison.csv", rows))
    if plots:
        from . import plotting

        arts.append(plotting.comparison(rows, outdir / "comparison.png"))
    _emit(rows, ("controller", "sampling_period", "J", "tracking"))
    return arts


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "tpbvp": cmd_tpbvp,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    outdir = Path(args.outdir)
    t0 = time.perf_counter()
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1", "threads")
        cfg = cfgmod.load(args.config)
        outdir.mkdir(parents=True, exist_ok=True)
        arts = COMMANDS[args.command](cfg, outdir, args)
        seed = args.seed if args.seed is not None else cfg.get_or_default("train").seed
        write_manifest(outdir, args.command, cfg, seed, arts, time.perf_counter() - t0)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"hion: config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, SimulationAborted, NumericOverflowError) as exc:
        print(f"hion: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except HionError as exc:
        print(f"hion: error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
