"""Closed-loop simulation of a plant driven by a receding-horizon policy.

The plant is integrated with classical RK4 on a uniform grid.  A *policy*
turns an observation ``(x_o, x_r)`` into a *plan* that can be queried at
local times ``t_hat`` for the estimated state, the control and the
co-states.  Phases start at observation instants, at reference changes
(from the estimated state, without reading the plant) and when a plan runs
out of horizon.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .controller import TmanoController
from .errors import ConfigError, SimulationAborted
from .systems import VALID_COSTS, CostSpec, DynamicalSystem, make_system

TRAJECTORY_COLUMNS = ("t", "x0", "x1", "u", "lambda0", "lambda1", "x_ref", "phase", "observed")
METRIC_COLUMNS = ("J", "tracking")
_GRID_TOL = 1e-9


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    system: str
    cost_id: str
    sampling_period: float | str
    duration: float
    reference_schedule: tuple[tuple[float, float], ...]
    initial_state: tuple[float, ...]
    kappa: float = 1.0
    integrator_step: float = 0.01
    t_f: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "reference_schedule", tuple((float(t), float(v)) for t, v in self.reference_schedule)
        )
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))
        if not self.duration > 0:
            raise ConfigError("duration must be positive", "duration")
        if not self.integrator_step > 0:
            raise ConfigError("integrator_step must be positive", "integrator_step")
        sched = self.reference_schedule
        if not sched or sched[0][0] != 0.0:
            raise ConfigError("reference schedule must start at t = 0", "reference_schedule")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("reference schedule times must be strictly increasing", "reference_schedule")
        sp = self.sampling_period
        if isinstance(sp, str):
            if sp not in ("realtime", "tf"):
                raise ConfigError(f"sampling_period must be a number, 'realtime' or 'tf', got {sp!r}", "sampling_period")
        elif not sp > 0:
            raise ConfigError("sampling_period must be positive", "sampling_period")
        elif self.integrator_step > sp + _GRID_TOL:
            raise ConfigError("integrator_step must not exceed sampling_period", "integrator_step")
        make_system(self.system).check_cost(self.cost)

    @property
    def cost(self) -> CostSpec:
        return CostSpec(self.cost_id, self.kappa)

    def reference_at(self, t: float) -> float:
        value = self.reference_schedule[0][1]
        for ts, v in self.reference_schedule:
            if ts <= t + _GRID_TOL:
                value = v
        return value

    def with_sampling(self, sampling_period) -> "Scenario":
        from dataclasses import replace

        return replace(self, sampling_period=sampling_period)


def comparison_scenario(sampling_period=0.5, system="vanderpol", cost_id="compare") -> Scenario:
    """15 s square wave between 1 and -1, switching every 5 s, from rest."""
    return Scenario(
        system=system,
        cost_id=cost_id,
        sampling_period=sampling_period,
        duration=15.0,
        reference_schedule=((0.0, 1.0), (5.0, -1.0), (10.0, 1.0)),
        initial_state=(0.0, 0.0),
    )


# ---------------------------------------------------------------- policies


class Plan(Protocol):
    horizon: float

    def query(self, t_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_h (m, n), u (m,), lam (m, n)) at local times ``t_hat``."""


class Policy(Protocol):
    system: DynamicalSystem
    horizon: float

    def plan(self, x_o: np.ndarray, x_r: np.ndarray) -> Plan: ...


@dataclass
class _HionPlan:
    controller: TmanoController
    x_o: np.ndarray
    x_r: np.ndarray
    horizon: float

    def query(self, t_hat):
        t = torch.as_tensor(np.asarray(t_hat, dtype=float))
        with torch.no_grad():
            out = self.controller(t, self.x_o, self.x_r)
        return out.x.value.numpy(), out.u.value[:, 0].numpy(), out.lam.value.numpy()


class HionPolicy:
    """Wraps a trained controller; plans are valid on ``[0, t_f]``."""

    def __init__(self, controller: TmanoController, name: str = "hion"):
        self.controller = controller
        self.system = controller.system
        self.horizon = controller.spec.t_f
        self.name = name

    def plan(self, x_o, x_r) -> _HionPlan:
        return _HionPlan(self.controller, np.asarray(x_o, float), np.atleast_1d(np.asarray(x_r, float)), self.horizon)


# ---------------------------------------------------------------- integration


def rk4_step(f: Callable, x: np.ndarray, u_fn: Callable[[float], float], dt: float, t0: float = 0.0) -> np.ndarray:
    """One classical RK4 step of ``x' = f(x, u)`` with ``u = u_fn(local time)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if isinstance(f, DynamicalSystem):
        f = _plant(f)
    x = np.asarray(x, dtype=float)
    h = dt / 2.0
    k1 = f(x, u_fn(t0))
    k2 = f(x + h * k1, u_fn(t0 + h))
    k3 = f(x + h * k2, u_fn(t0 + h))
    k4 = f(x + dt * k3, u_fn(t0 + dt))
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _plant(system: DynamicalSystem):
    def f(x, u):
        return system.dynamics_f(x, np.atleast_1d(np.asarray(u, dtype=float)))

    return f


# ---------------------------------------------------------------- trajectory


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    x_ref: np.ndarray
    phase: np.ndarray
    observed: np.ndarray
    x_est: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def head(self, n: int) -> "Trajectory":
        cut = {k: getattr(self, k)[:n] for k in ("t", "x", "u", "lam", "x_ref", "phase", "observed")}
        est = None if self.x_est is None else self.x_est[:n]
        return Trajectory(**cut, x_est=est, metadata=dict(self.metadata))

    def rows(self):
        for i in range(len(self.t)):
            yield (
                self.t[i], self.x[i, 0], self.x[i, 1], self.u[i], self.lam[i, 0], self.lam[i, 1],
                self.x_ref[i], int(self.phase[i]), int(bool(self.observed[i])),
            )

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for row in self.rows():
                w.writerow([fmt(v) for v in row])
        return path

    @classmethod
    def read_csv(cls, path) -> "Trajectory":
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        return cls(
            t=data["t"], x=np.stack([data["x0"], data["x1"]], -1), u=data["u"],
            lam=np.stack([data["lambda0"], data["lambda1"]], -1), x_ref=data["x_ref"],
            phase=data["phase"].astype(int), observed=data["observed"].astype(bool),
        )


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


# ---------------------------------------------------------------- closed loop


def _steps(seconds: float, h: float, what: str) -> int:
    n = seconds / h
    r = round(n)
    if abs(n - r) > 1e-6 * max(1.0, n):
        raise ConfigError(f"{what} ({seconds}) is not a multiple of integrator_step ({h})", what)
    return int(r)


def run_closed_loop(policy: Policy, scenario: Scenario) -> tuple[Trajectory, dict]:
    """Simulate ``scenario`` under ``policy``; returns the trajectory and metrics."""
    system = policy.system
    if system.spec.name != scenario.system:
        raise ConfigError(
            f"controller is for {system.spec.name!r} but the scenario is for {scenario.system!r}", "system"
        )
    if scenario.t_f is not None and abs(scenario.t_f - policy.horizon) > _GRID_TOL:
        raise ConfigError(f"scenario t_f {scenario.t_f} does not match controller horizon {policy.horizon}", "t_f")
    h = scenario.integrator_step
    n_rows = _steps(scenario.duration, h, "duration") + 1
    sp = scenario.sampling_period
    if sp == "realtime":
        obs_every = 1
    elif sp == "tf":
        obs_every = _steps(policy.horizon, h, "sampling_period")
    else:
        obs_every = _steps(float(sp), h, "sampling_period")
    rearm = None
    max_phase = getattr(policy, "max_phase", policy.horizon)
    if math.isfinite(max_phase):
        # queries never go past t_f
        rearm = max(1, int(math.floor(max_phase / h + 1e-9)))
        if rearm >= obs_every:
            rearm = None
    ref_steps = [_steps(t, h, "reference_schedule") for t, _ in scenario.reference_schedule[1:]]
    ref_steps = [s for s in ref_steps if s < n_rows - 1]

    if hasattr(policy, "reset"):
        policy.reset()
    f = _plant(system)
    n = system.spec.n_states
    t = np.arange(n_rows) * h
    X = np.full((n_rows, n), np.nan)
    Xe = np.full((n_rows, n), np.nan)
    U = np.full(n_rows, np.nan)
    LAM = np.full((n_rows, n), np.nan)
    REF = np.array([scenario.reference_at(ti) for ti in t])
    PH = np.zeros(n_rows, dtype=int)
    OBS = np.zeros(n_rows, dtype=bool)
    X[0] = scenario.initial_state
    if len(X[0]) != n:
        raise ConfigError(f"initial_state has {len(X[0])} components, expected {n}", "initial_state")

    def partial(last: int) -> Trajectory:
        return Trajectory(t[:last], X[:last], U[:last], LAM[:last], REF[:last], PH[:last], OBS[:last], Xe[:last])

    s = 0
    phase = -1
    x_o = X[0].copy()
    observe = True
    while s < n_rows - 1:
        phase += 1
        if observe:
            x_o = X[s].copy()
            OBS[s] = True
        e = min(((s // obs_every) + 1) * obs_every, n_rows - 1)
        nxt_ref = [r for r in ref_steps if r > s]
        ref_cut = nxt_ref[0] if nxt_ref and nxt_ref[0] < e else None
        if ref_cut is not None:
            e = ref_cut
        if rearm is not None and s + rearm < e:
            e = s + rearm
            ref_cut = None
        plan = policy.plan(x_o, np.array([REF[s]]))
        m = e - s
        t_hat = np.arange(2 * m + 1) * (h / 2.0)
        xq, uq, lq = plan.query(t_hat)
        if not (np.all(np.isfinite(uq)) and np.all(np.isfinite(xq))):
            raise SimulationAborted(f"non-finite controller output in phase {phase} at t={t[s]:.6g}", partial(s + 1))
        for i in range(m):
            row = s + i
            U[row], LAM[row], Xe[row], PH[row] = uq[2 * i], lq[2 * i], xq[2 * i], phase
            with np.errstate(over="ignore", invalid="ignore"):
                x_next = rk4_step(f, X[row], lambda tau, i=i: uq[2 * i + int(round(2 * tau / h))], h)
            if not np.all(np.isfinite(x_next)):
                raise SimulationAborted(f"non-finite plant state at t={t[row + 1]:.6g}", partial(row + 1))
            X[row + 1] = x_next
        # the closing row belongs to this phase unless another one starts there
        U[e], LAM[e], Xe[e], PH[e] = uq[2 * m], lq[2 * m], xq[2 * m], phase
        if e % obs_every == 0 or e == n_rows - 1:
            observe = True
        else:
            # reference change or re-arm: restart from the estimate
            observe = False
            x_o = xq[2 * m].copy()
        s = e
    traj = Trajectory(t, X, U, LAM, REF, PH, OBS, Xe, metadata={"sampling_period": sp})
    return traj, metrics(traj, scenario.cost, system)


# ---------------------------------------------------------------- metrics


def _trapezoid(y: np.ndarray, t: np.ndarray) -> float:
    if len(t) < 2:
        return 0.0
    dt = np.diff(t)
    # zero-width intervals are dropped rather than summed as zeros, so padding is bit-neutral
    keep = dt != 0
    return float(np.sum((0.5 * (y[1:] + y[:-1]) * dt)[keep]))


def metrics(traj: Trajectory, cost: CostSpec, system: DynamicalSystem | None = None) -> dict:
    """``J`` (integrated Lagrangian) and the tracking integral on the true rows."""
    if system is None:
        # the Lagrangian does not depend on the plant; any system that accepts the cost will do
        system = make_system(next(k for k, v in VALID_COSTS.items() if cost.cost_id in v))
    x = np.asarray(traj.x, dtype=float)
    u = np.asarray(traj.u, dtype=float)[:, None]
    r = np.asarray(traj.x_ref, dtype=float)[:, None]
    L = system.lagrangian(x, r, u, cost)
    track = (x[:, 0] - r[:, 0]) ** 2
    return {"J": _trapezoid(L, traj.t), "tracking": _trapezoid(track, traj.t)}


def write_metrics(path, rows: Sequence[dict], columns=("controller", "sampling_period") + METRIC_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) if isinstance(row[c], (float, np.floating)) else row[c] for c in columns])
    return path


# ---------------------------------------------------------------- open loop


def tpbvp_trajectory(controller: TmanoController, x_o, x_r, n_points: int = 101) -> dict:
    """Controller output on a uniform grid over ``[0, t_f]``."""
    if n_points < 2:
        raise ConfigError("n_points must be >= 2", "n_points")
    spec = controller.spec
    x_o = np.asarray(x_o, dtype=float).reshape(-1)
    x_r = np.atleast_1d(np.asarray(x_r, dtype=float)).reshape(-1)
    if x_o.shape[0] != spec.n_states:
        raise ConfigError(f"x_o has {x_o.shape[0]} components, {spec.name} needs {spec.n_states}", "x_o")
    if x_r.shape[0] != spec.n_references:
        raise ConfigError(f"x_r has {x_r.shape[0]} components, {spec.name} needs {spec.n_references}", "x_r")
    t = np.linspace(0.0, spec.t_f, n_points)
    x, u, lam = _HionPlan(controller, x_o, x_r, spec.t_f).query(t)
    return {"t": t, "x": x, "u": u, "lam": lam}


TPBVP_COLUMNS = ("t", "x0", "x1", "u", "lambda0", "lambda1")


def write_tpbvp_csv(result: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TPBVP_COLUMNS)
        for i, t in enumerate(result["t"]):
            x, lam = result["x"][i], result["lam"][i]
            w.writerow([fmt(v) for v in (t, x[0], x[1], result["u"][i], lam[0], lam[1])])
    return path
