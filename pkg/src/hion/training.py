"""Sampling, loss assembly and Adam updates for T-mano controllers."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import jets, pmp
from .checkpoint import Checkpoint
from .controller import TmanoController
from .errors import ConfigError, NumericOverflowError, TrainingAborted
from .jets import DTYPE
from .pmp import LossBreakdown
from .systems import CostSpec, StateDistribution

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "l17b", "l17d", "l17e", "l17f", "lr", "wall_ms")
MAX_CONSECUTIVE_ABORTS = 3


@dataclass
class TrainConfig:
    n_epochs: int = 20000
    batch_size: int = 256
    n_transient: int = 8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: dict = field(default_factory=pmp.default_weights)
    finetune_from: str | None = None
    cosine_decay: bool = False
    lr_min: float = 0.0
    n_shards: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.n_epochs < 0:
            raise ConfigError("n_epochs must be >= 0", "n_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.n_transient < 1:
            raise ConfigError("n_transient must be >= 1", "n_transient")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", "lr")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)", name)
        if self.n_shards < 1 or self.n_shards > self.batch_size:
            raise ConfigError("n_shards must lie in [1, batch_size]", "n_shards")
        unknown = set(self.loss_weights) - set(pmp.LOSS_IDS)
        if unknown:
            raise ConfigError(f"unknown loss weight {sorted(unknown)[0]!r}", "loss_weights")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigError("loss weights must be >= 0", "loss_weights")
        self.loss_weights = {**pmp.default_weights(), **self.loss_weights}

    def lr_at(self, epoch: int) -> float:
        if not self.cosine_decay or self.n_epochs <= 1:
            return self.lr
        frac = epoch / (self.n_epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamState:
    """Bias-corrected Adam on a flat parameter vector."""

    def __init__(self, n_params: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = torch.zeros(n_params, dtype=DTYPE)
        self.v = torch.zeros(n_params, dtype=DTYPE)
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, params: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.step)
        v_hat = self.v / (1.0 - b2**self.step)
        return params - lr * m_hat / (torch.sqrt(v_hat) + self.eps)

    def snapshot(self):
        return self.m.clone(), self.v.clone(), self.step

    def restore(self, snap) -> None:
        self.m, self.v, self.step = snap[0].clone(), snap[1].clone(), snap[2]


def sample_batch(controller: TmanoController, config: TrainConfig, epoch: int):
    """Observed states, references and interior times for one epoch."""
    rng = np.random.default_rng([config.seed, epoch])
    system = controller.system
    x_o = system.sample_observed(rng, config.batch_size)
    x_r = system.sample_reference(x_o, rng)
    t_int = rng.uniform(0.0, system.spec.t_f, size=(config.batch_size, config.n_transient))
    return x_o, x_r, t_int


def _shard_bounds(n: int, shards: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, shards + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def loss_and_grad(controller, x_o, x_r, t_int, weights, active, n_shards=1, threads=1):
    """Weighted loss and flat gradient, summed over shards in fixed order."""
    params = list(controller.parameters())
    B = x_o.shape[0]
    bounds = _shard_bounds(B, n_shards)

    def one(bound):
        a, b = bound
        frac = (b - a) / B
        parts = {}

        def evaluate():
            total, values = pmp.batch_losses(controller, x_o[a:b], x_r[a:b], t_int[a:b], weights, active)
            parts["values"] = values
            return total * frac

        loss, grad = jets.grad_scalar(evaluate, params)
        vals = {k: float(v.detach()) * frac for k, v in parts["values"].items()}
        return loss, grad, vals

    with jets.finite_checks(False):
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, bounds))
        else:
            results = [one(bd) for bd in bounds]

    total = results[0][0]
    grad = results[0][1]
    values = dict(results[0][2])
    for loss, g, vals in results[1:]:
        total = total + loss
        grad = grad + g
        for k, v in vals.items():
            values[k] += v
    return total, grad, values


def train_epoch(controller: TmanoController, config: TrainConfig, adam: AdamState, epoch: int, active=None) -> LossBreakdown:
    """One Adam step on a freshly sampled batch.

    On a non-finite loss the parameters and optimizer state are left as they
    were and :class:`TrainingAborted` is raised.
    """
    if active is None:
        active = pmp.active_losses(controller.system, has_reference=True)
    x_o, x_r, t_int = sample_batch(controller, config, epoch)
    params_before = controller.flat_parameters().clone()
    adam_before = adam.snapshot()
    try:
        total, grad, values = loss_and_grad(
            controller, x_o, x_r, t_int, config.loss_weights, active, config.n_shards, config.threads
        )
    except NumericOverflowError as exc:
        controller.load_flat_parameters(params_before)
        adam.restore(adam_before)
        raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
    vals = {k: (values.get(k) if k in active else None) for k in pmp.LOSS_IDS}
    result = LossBreakdown(
        values=vals,
        weights=dict(config.loss_weights),
        total=float(total),
        diagnostics={"l17a": values.get("l17a", 0.0)},
    )
    if not result.is_finite() or not bool(torch.isfinite(grad).all()):
        controller.load_flat_parameters(params_before)
        adam.restore(adam_before)
        raise TrainingAborted(f"epoch {epoch}: non-finite loss", result)
    new = adam.update(params_before, grad, config.lr_at(epoch))
    controller.load_flat_parameters(new)
    return result


def evaluate(controller: TmanoController, n_pairs: int = 256, seed: int = 12345, n_transient: int = 8, active=None) -> LossBreakdown:
    """Loss breakdown on a held-out batch, without updating anything."""
    cfg = TrainConfig(n_epochs=1, batch_size=n_pairs, n_transient=n_transient, seed=seed)
    if active is None:
        active = pmp.active_losses(controller.system, has_reference=True)
    x_o, x_r, t_int = sample_batch(controller, cfg, 0)
    with torch.no_grad():
        total, values = pmp.batch_losses(controller, x_o, x_r, t_int, cfg.loss_weights, active)
    return pmp.breakdown(total, values, cfg.loss_weights, active)


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def train(
    controller: TmanoController,
    config: TrainConfig,
    outdir=None,
    metadata: dict | None = None,
    epochs_before: int = 0,
    progress=None,
) -> tuple[Checkpoint, list[dict]]:
    """Run ``config.n_epochs`` epochs; optionally write checkpoint and CSV.

    ``progress(epoch, breakdown)`` is called after every epoch when given.
    """
    active = pmp.active_losses(controller.system, has_reference=True)
    adam = AdamState(
        controller.flat_parameters().numel(), config.adam_beta1, config.adam_beta2, config.adam_eps
    )
    history: list[dict] = []
    last: LossBreakdown | None = None
    failures = 0
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for epoch in range(config.n_epochs):
            t0 = time.perf_counter()
            try:
                last = train_epoch(controller, config, adam, epoch, active)
            except TrainingAborted as exc:
                failures += 1
                log.warning("%s (consecutive failures: %d)", exc, failures)
                if failures >= MAX_CONSECUTIVE_ABORTS:
                    raise
                continue
            failures = 0
            row = {"epoch": epoch, "total": last.total, "lr": config.lr_at(epoch)}
            for k in ("l17b", "l17d", "l17e", "l17f"):
                row[k] = last.values.get(k)
            # timing is the one column that differs between otherwise identical runs
            row["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
            history.append(row)
            if progress is not None:
                progress(epoch, last)
    finally:
        torch.set_num_threads(prev_threads)

    meta = dict(metadata or {})
    if last is not None:
        meta["final_loss"] = last.as_dict()
    ckpt = Checkpoint.from_controller(controller, config.seed, epochs_before + config.n_epochs, meta)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        ckpt.save(outdir / "checkpoint.json")
        _write_history(outdir / "train.csv", history)
    return ckpt, history


def finetune(
    parent: Checkpoint,
    config: TrainConfig,
    system: str | None = None,
    cost: CostSpec | None = None,
    t_f: float | None = None,
    distribution: StateDistribution | None = None,
    outdir=None,
    progress=None,
) -> tuple[Checkpoint, list[dict]]:
    """Continue training from ``parent`` under a new cost, t_f or distribution."""
    if system is not None and system != parent.system:
        raise ConfigError(
            f"cannot fine-tune a {parent.system!r} checkpoint for system {system!r}", "system"
        )
    base = parent.to_controller()
    new_cost = cost or base.cost
    new_sys = base.system
    if t_f is not None or distribution is not None:
        from .systems import make_system

        new_sys = make_system(
            parent.system,
            t_f=parent.t_f if t_f is None else t_f,
            distribution=distribution or base.system.distribution,
        )
    controller = TmanoController(new_sys, new_cost, base.state_gen, base.costate_gen)
    meta = {
        "parent_hash": parent.content_hash(),
        "lineage": list(parent.metadata.get("lineage", [])) + [parent.content_hash()],
    }
    return train(
        controller, config, outdir=outdir, metadata=meta, epochs_before=parent.epochs_trained, progress=progress
    )
