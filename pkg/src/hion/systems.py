"""Plants, costs and their closed-form Hamiltonian partials.

State vectors are laid out primitive-major: for each primitive state its
value followed by its time-derivatives up to ``ode_order - 1``.  Both
shipped plants are second order with one primitive, so ``x = (x0, x0')``.

The plant functions accept numpy arrays or torch tensors with the state on
the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError
from .jets import Jet, stack

SYSTEM_IDS = ("linear2", "vanderpol")
COST_IDS = ("linear_quadratic", "vdp_min_speed", "vdp_track", "compare")

VALID_COSTS = {
    "linear2": ("linear_quadratic", "compare"),
    "vanderpol": ("vdp_min_speed", "vdp_track", "compare"),
}


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_states: int
    n_controls: int
    ode_order: int
    invariant_flags: tuple[bool, ...]
    t_f: float
    reference_states: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.n_states < 1 or self.n_controls < 1 or self.ode_order < 1:
            raise ConfigError("state, control and ODE-order counts must be >= 1")
        if not self.t_f > 0:
            raise ConfigError(f"t_f must be positive, got {self.t_f}", "t_f")
        if self.n_states % self.ode_order:
            raise ConfigError("n_states must be a multiple of ode_order")
        if len(self.invariant_flags) != self.n_primitives:
            raise ConfigError("one invariant flag per primitive state")

    @property
    def n_primitives(self) -> int:
        return self.n_states // self.ode_order

    @property
    def n_references(self) -> int:
        return len(self.reference_states)

    @property
    def non_reference_states(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_states) if i not in self.reference_states)


@dataclass(frozen=True)
class CostSpec:
    cost_id: str
    kappa: float = 1.0

    def __post_init__(self):
        if self.cost_id not in COST_IDS:
            raise ConfigError(f"unknown cost id {self.cost_id!r}", "cost_id")
        if not self.kappa >= 0:
            raise ConfigError(f"kappa must be >= 0, got {self.kappa}", "kappa")


@dataclass(frozen=True)
class StateDistribution:
    """Training distribution of observed and reference states."""

    position_low: float = -5.0
    position_high: float = 5.0
    velocity_std: float = 1.0
    reference_std: float = 1.0


def _lib(x):
    return torch if isinstance(x, torch.Tensor) else np


def _stack(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _check_dims(x, n, what):
    if x.shape[-1] != n:
        raise ValueError(f"{what} has {x.shape[-1]} components, expected {n}")


class DynamicalSystem:
    """Base plant: one second-order primitive driven by one control."""

    name: str = ""
    default_t_f: float = 1.0
    invariant_flags: tuple[bool, ...] = (False,)
    # ODE rows that do not contain a control point (need loss 17c)
    rows_without_control: tuple[int, ...] = ()

    def __init__(self, t_f: float | None = None, distribution: StateDistribution | None = None):
        self.spec = SystemSpec(
            name=self.name,
            n_states=2,
            n_controls=1,
            ode_order=2,
            invariant_flags=self.invariant_flags,
            t_f=float(self.default_t_f if t_f is None else t_f),
        )
        self.distribution = distribution or StateDistribution()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(t_f={self.spec.t_f})"

    # plant ---------------------------------------------------------------

    def drift(self, x0, x1):
        """Acceleration of the unforced plant."""
        raise NotImplementedError

    def drift_partials(self, x0, x1):
        """(d drift/d x0, d drift/d x1)."""
        raise NotImplementedError

    def dynamics_f(self, x, u):
        _check_dims(x, self.spec.n_states, "state")
        _check_dims(u, self.spec.n_controls, "control")
        x0, x1 = x[..., 0], x[..., 1]
        return _stack([x1, self.drift(x0, x1) + u[..., 0]], x)

    def _drift_jet(self, p: Jet, v: Jet) -> Jet:
        raise NotImplementedError

    def _require(self, x_jets: Jet, order: int):
        if x_jets.order < order:
            raise ValueError(
                f"state jets carry order {x_jets.order}, need at least {order}"
            )

    def control_definition(self, x_jets: Jet) -> Jet:
        """Control that zeroes the ODE residual, as a jet.

        ``x_jets`` holds the primitive state(s) on the last axis; the result
        has order ``x_jets.order - ode_order``.
        """
        k = self.spec.ode_order
        self._require(x_jets, k)
        p = x_jets[..., 0]
        lower = p.order - k
        pos = p.truncate(lower)
        vel = p.diff().truncate(lower)
        acc = p.diff().diff()
        u = acc - self._drift_jet(pos, vel)
        return stack([u], dim=-1)

    def ode_residual(self, x_jets: Jet, u) -> torch.Tensor:
        """Full ODE residual ``x0'' - drift - u`` at the value coefficient."""
        k = self.spec.ode_order
        self._require(x_jets, k)
        pos, vel, acc = (c[..., 0] for c in x_jets.cs[:3])
        u = torch.as_tensor(u, dtype=pos.dtype)
        return (acc - self.drift(pos, vel) - u[..., 0]).unsqueeze(-1)

    # cost ----------------------------------------------------------------

    def check_cost(self, cost: CostSpec) -> None:
        if cost.cost_id not in VALID_COSTS[self.name]:
            raise ConfigError(
                f"cost {cost.cost_id!r} is not defined for system {self.name!r}",
                "cost_id",
            )

    def lagrangian(self, x, x_r, u, cost: CostSpec):
        self.check_cost(cost)
        x0, x1 = x[..., 0], x[..., 1]
        r = x_r[..., 0]
        k = cost.kappa
        if cost.cost_id == "linear_quadratic":
            return 0.5 * u[..., 0] ** 2 + x1**2
        if cost.cost_id == "vdp_min_speed":
            return k * x1**2
        if cost.cost_id == "vdp_track":
            return k * (x0 - r) ** 2
        if cost.cost_id == "compare":
            return (x0 - r) ** 2 + x1**2 / 10.0
        raise ConfigError(f"unknown cost id {cost.cost_id!r}", "cost_id")

    def lagrangian_partials(self, x, x_r, u, cost: CostSpec):
        """(dL/dx0, dL/dx1, dL/du) in closed form."""
        self.check_cost(cost)
        x0, x1 = x[..., 0], x[..., 1]
        r = x_r[..., 0]
        zero = 0.0 * x0
        k = cost.kappa
        if cost.cost_id == "linear_quadratic":
            return zero, 2.0 * x1, u[..., 0]
        if cost.cost_id == "vdp_min_speed":
            return zero, 2.0 * k * x1, zero
        if cost.cost_id == "vdp_track":
            return 2.0 * k * (x0 - r), zero, zero
        if cost.cost_id == "compare":
            return 2.0 * (x0 - r), x1 / 5.0, zero
        raise ConfigError(f"unknown cost id {cost.cost_id!r}", "cost_id")

    def hamiltonian_partials(self, x, x_r, u, lam, cost: CostSpec):
        """``H = L + lam . f`` with its x- and u-gradients."""
        _check_dims(lam, self.spec.n_states, "co-state")
        f = self.dynamics_f(x, u)
        L = self.lagrangian(x, x_r, u, cost)
        H = L + (lam * f).sum(-1) if isinstance(f, torch.Tensor) else L + np.sum(lam * f, axis=-1)
        lx0, lx1, lu = self.lagrangian_partials(x, x_r, u, cost)
        d0, d1 = self.drift_partials(x[..., 0], x[..., 1])
        l0, l1 = lam[..., 0], lam[..., 1]
        dH_dx = _stack([lx0 + l1 * d0, lx1 + l0 + l1 * d1], x)
        dH_du = _stack([lu + l1], x)
        return H, dH_dx, dH_du

    # sampling ------------------------------------------------------------

    def sample_observed(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        d = self.distribution
        size = () if n is None else (n,)
        pos = rng.uniform(d.position_low, d.position_high, size=size)
        vel = rng.normal(0.0, d.velocity_std, size=size)
        return np.stack([pos, vel], axis=-1)

    def sample_reference(self, x_o: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x_o = np.asarray(x_o, dtype=float)
        base = x_o[..., list(self.spec.reference_states)]
        return base + rng.normal(0.0, self.distribution.reference_std, size=base.shape)


class LinearSecondOrder(DynamicalSystem):
    """Unsprung mass: ``x0'' = u``."""

    name = "linear2"
    default_t_f = 2.0
    invariant_flags = (True,)

    def drift(self, x0, x1):
        return 0.0 * x1

    def drift_partials(self, x0, x1):
        return 0.0 * x0, 0.0 * x1

    def _drift_jet(self, p: Jet, v: Jet) -> Jet:
        return v * 0.0


class VanDerPol(DynamicalSystem):
    """Forced Van der Pol oscillator: ``x0'' = (1 - x0^2) x0' - x0 + u``."""

    name = "vanderpol"
    default_t_f = 5.0
    invariant_flags = (False,)

    def drift(self, x0, x1):
        return (1.0 - x0**2) * x1 - x0

    def drift_partials(self, x0, x1):
        return -2.0 * x0 * x1 - 1.0, 1.0 - x0**2

    def _drift_jet(self, p: Jet, v: Jet) -> Jet:
        return (1.0 - p.square()) * v - p


_REGISTRY = {cls.name: cls for cls in (LinearSecondOrder, VanDerPol)}


def make_system(
    name: str, t_f: float | None = None, distribution: StateDistribution | None = None
) -> DynamicalSystem:
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown system id {name!r}; expected one of {', '.join(SYSTEM_IDS)}",
            "system",
        ) from None
    return cls(t_f=t_f, distribution=distribution)
