"""Successive-linearization MPC baseline.

At each observation the plant is linearized at the current state and the
last applied control, discretized with forward Euler over the horizon, and
the summed Lagrangian is minimized over a piecewise-constant control
sequence by a regularized least-squares solve.  The first control is held
until the next observation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .systems import CostSpec, DynamicalSystem, make_system

log = logging.getLogger(__name__)

TIKHONOV = 1e-9
COND_WARN = 1e12


@dataclass(frozen=True)
class SlmpcConfig:
    system: str = "vanderpol"
    horizon: float = 2.5
    n_steps: int = 25
    sampling_period: float = 0.5
    cost: CostSpec = CostSpec("compare")
    u_bound: float | None = None
    # "sampling": one control per sampling period, matching how it is applied;
    # "step": one control per Euler step
    control_blocks: str = "sampling"

    def __post_init__(self):
        if self.control_blocks not in ("sampling", "step"):
            raise ConfigError("control_blocks must be 'sampling' or 'step'", "control_blocks")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive", "horizon")
        if self.n_steps < 2:
            raise ConfigError("n_steps must be >= 2", "n_steps")
        if not self.sampling_period > 0:
            raise ConfigError("sampling_period must be positive", "sampling_period")
        if self.u_bound is not None and not self.u_bound > 0:
            raise ConfigError("u_bound must be positive", "u_bound")
        make_system(self.system).check_cost(self.cost)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def steps_per_control(self) -> int:
        if self.control_blocks == "step":
            return 1
        return max(1, int(round(self.sampling_period / self.dt)))

    @property
    def n_controls(self) -> int:
        return -(-self.n_steps // self.steps_per_control)


def linearize(system: DynamicalSystem, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(A, B, c)`` with ``f(x', u') ~ A x' + B u' + c`` near ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d0, d1 = system.drift_partials(x[0], x[1])
    A = np.array([[0.0, 1.0], [float(d0), float(d1)]])
    B = np.array([[0.0], [1.0]])
    c = system.dynamics_f(x, u) - A @ x - B @ u
    return A, B, c


def _cost_rows(cost: CostSpec, r: float):
    """Lagrangian as ``sum_i (w_i . (x, u) - b_i)^2``: rows (wx, wu, b)."""
    k = cost.kappa
    if cost.cost_id == "compare":
        return [(np.array([1.0, 0.0]), 0.0, r), (np.array([0.0, np.sqrt(0.1)]), 0.0, 0.0)]
    if cost.cost_id == "vdp_track":
        return [(np.array([np.sqrt(k), 0.0]), 0.0, np.sqrt(k) * r)]
    if cost.cost_id == "vdp_min_speed":
        return [(np.array([0.0, np.sqrt(k)]), 0.0, 0.0)]
    if cost.cost_id == "linear_quadratic":
        return [(np.array([0.0, 1.0]), 0.0, 0.0), (np.zeros(2), np.sqrt(0.5), 0.0)]
    raise ConfigError(f"unknown cost id {cost.cost_id!r}", "cost_id")


def solve_sequence(system: DynamicalSystem, x_now, x_r, cfg: SlmpcConfig, u_lin: float = 0.0) -> np.ndarray:
    """Optimal piecewise-constant controls (one per block) for the linearized problem."""
    x_now = np.asarray(x_now, dtype=float)
    r = float(np.atleast_1d(x_r)[0])
    A, B, c = linearize(system, x_now, u_lin)
    N, dt = cfg.n_steps, cfg.dt
    per, n_u = cfg.steps_per_control, cfg.n_controls
    Ad = np.eye(2) + dt * A
    Bd = dt * B[:, 0]
    cd = dt * c
    # x_k = F_k x_now + G_k u + g_k, rolled forward
    F = np.eye(2)
    G = np.zeros((2, n_u))
    g = np.zeros(2)
    rows, rhs = [], []
    w = np.sqrt(dt)
    terms = _cost_rows(cfg.cost, r)
    for k in range(N):
        # stage k costs L(x_k, u_k); x_0 is fixed, so its state rows only shift the optimum's value
        x_aff = F @ x_now + g
        for wx, wu, b in terms:
            row = w * (wx @ G)
            row[k // per] += w * wu
            rows.append(row)
            rhs.append(w * (b - wx @ x_aff))
        G = Ad @ G
        G[:, k // per] += Bd
        F = Ad @ F
        g = Ad @ g + cd
    x_aff = F @ x_now + g
    for wx, wu, b in terms:
        # terminal state x_N closes the horizon
        if wx.any():
            rows.append(w * (wx @ G))
            rhs.append(w * (b - wx @ x_aff))
    M = np.array(rows)
    y = np.array(rhs)
    H = M.T @ M + TIKHONOV * np.eye(n_u)
    cond = np.linalg.cond(H)
    if cond > COND_WARN:
        log.warning("SLMPC normal equations ill-conditioned (cond %.3g); regularized solve", cond)
    u = scipy.linalg.solve(H, M.T @ y, assume_a="pos")
    if cfg.u_bound is not None:
        u = np.clip(u, -cfg.u_bound, cfg.u_bound)
    return u


def solve_step(x_now, x_r, cfg: SlmpcConfig, u_lin: float = 0.0, system: DynamicalSystem | None = None) -> float:
    """First control of the optimal sequence, to be held for one sampling period."""
    system = system or make_system(cfg.system)
    return float(solve_sequence(system, x_now, x_r, cfg, u_lin)[0])


@dataclass
class _HoldPlan:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    x_o: np.ndarray
    u: float
    horizon: float = float("inf")

    def query(self, t_hat):
        t_hat = np.asarray(t_hat, dtype=float)
        # exact propagation of the affine model under a held control
        M = np.zeros((3, 3))
        M[:2, :2] = self.A
        M[:2, 2] = self.B[:, 0] * self.u + self.c
        z0 = np.append(self.x_o, 1.0)
        xs = np.array([scipy.linalg.expm(M * ti) @ z0 for ti in t_hat])[:, :2]
        u = np.full(len(t_hat), self.u)
        lam = np.full((len(t_hat), 2), np.nan)
        return xs, u, lam


class SlmpcPolicy:
    """Closed-loop adapter: plans hold one control over the phase."""

    def __init__(self, cfg: SlmpcConfig, name: str = "slmpc"):
        self.cfg = cfg
        self.system = make_system(cfg.system)
        self.horizon = cfg.horizon
        # a held control never expires, so phases are not re-armed
        self.max_phase = float("inf")
        self.name = name
        self._u_prev = 0.0

    def reset(self) -> None:
        self._u_prev = 0.0

    def plan(self, x_o, x_r) -> _HoldPlan:
        x_o = np.asarray(x_o, dtype=float)
        u = solve_step(x_o, x_r, self.cfg, self._u_prev, self.system)
        self._u_prev = u
        A, B, c = linearize(self.system, x_o, u)
        return _HoldPlan(A, B, c, x_o, u)
