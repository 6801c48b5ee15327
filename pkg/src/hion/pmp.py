"""Mean-square losses built from Pontryagin's necessary conditions.

Loss ids follow the six conditions: ``l17a`` initial state, ``l17b``
terminal state, ``l17c`` ODE residual, ``l17d`` co-state dynamics, ``l17e``
terminal co-state, ``l17f`` stationarity of the Hamiltonian in u.  Every
loss divides by its vector dimension and then averages over the batch,
which is the same as a plain mean over all entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .jets import DTYPE

LOSS_IDS = ("l17a", "l17b", "l17c", "l17d", "l17e", "l17f")


def _t(a) -> torch.Tensor:
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


@dataclass
class LossBreakdown:
    """Per-loss values; inactive losses are ``None``, not zero."""

    values: dict[str, float | None]
    weights: dict[str, float]
    total: float
    diagnostics: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float | None:
        return self.values.get(key)

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(k for k in LOSS_IDS if self.values.get(k) is not None)

    def is_finite(self) -> bool:
        vals = [self.total] + [v for v in self.values.values() if v is not None]
        return all(np.isfinite(v) for v in vals)

    def as_dict(self) -> dict:
        return {"total": self.total, **{k: v for k, v in self.values.items() if v is not None}}


def active_losses(system, has_reference: bool) -> frozenset[str]:
    """Loss ids the T-mano architecture still needs for ``system``.

    The Taylor operator makes the initial-state loss redundant and the
    control definition zeroes every ODE row that contains a control.
    """
    active = {"l17d", "l17e", "l17f"}
    if has_reference:
        active.add("l17b")
    if getattr(system, "rows_without_control", ()):
        active.add("l17c")
    return frozenset(active)


def loss_initial(x_h0, x_o) -> torch.Tensor:
    return ((_t(x_h0) - _t(x_o)) ** 2).mean()


def loss_terminal_state(x_h_tf, x_r, reference_states=(0,)) -> torch.Tensor:
    """Squared miss of the reference-associated states at ``t_f``.

    ``x_h_tf`` may hold the full state (it is then indexed by
    ``reference_states``) or only the reference components.
    """
    x = _t(x_h_tf)
    r = _t(x_r)
    if x.shape[-1] != r.shape[-1]:
        x = x[..., list(reference_states)]
    return ((x - r) ** 2).mean()


def loss_ode(residual) -> torch.Tensor:
    return (_t(residual) ** 2).mean()


def loss_costate_dynamics(lam_dot, dH_dx) -> torch.Tensor:
    return ((_t(lam_dot) + _t(dH_dx)) ** 2).mean()


def loss_costate_terminal(lam_tf, non_reference_states=None) -> torch.Tensor:
    """Mean square of the co-states that carry no reference at ``t_f``."""
    lam = _t(lam_tf)
    if non_reference_states is not None:
        lam = lam[..., list(non_reference_states)]
    return (lam**2).mean()


def loss_stationarity(dH_du) -> torch.Tensor:
    return (_t(dH_du) ** 2).mean()


def default_weights() -> dict[str, float]:
    return {k: 1.0 for k in LOSS_IDS}


def batch_losses(controller, x_o, x_r, t_interior, weights=None, active=None):
    """Evaluate the active losses on one batch.

    ``x_o`` is ``(B, n)``, ``x_r`` is ``(B, n_ref)`` and ``t_interior`` is
    ``(B, m)``.  Each pair is evaluated at ``t = 0``, ``t = t_f`` and its
    ``m`` interior times; the transient losses use all of them.

    Returns ``(total, values)`` where ``values`` maps loss id to a tensor
    (graph attached) and also carries the ``l17a`` diagnostic.
    """
    system = controller.system
    spec = system.spec
    weights = {**default_weights(), **(weights or {})}
    if active is None:
        active = active_losses(system, has_reference=True)
    x_o = _t(x_o)
    x_r = _t(x_r)
    t_int = _t(t_interior)
    B, m = t_int.shape
    zeros = torch.zeros(B, 1, dtype=DTYPE)
    times = torch.cat([zeros, zeros + spec.t_f, t_int], dim=1)  # (B, m + 2)
    per = m + 2
    t_flat = times.reshape(-1)
    xo_rep = x_o.repeat_interleave(per, dim=0)
    xr_rep = x_r.repeat_interleave(per, dim=0)

    out = controller(t_flat, xo_rep, xr_rep)
    x = out.x.value
    u = out.u.value
    lam = out.lam.value
    lam_dot = out.lam.cs[1]
    _, dH_dx, dH_du = system.hamiltonian_partials(x, xr_rep, u, lam, controller.cost)

    values: dict[str, torch.Tensor] = {}
    x_grid = x.view(B, per, -1)
    with torch.no_grad():
        values["l17a"] = loss_initial(x_grid[:, 0], x_o)
    if "l17b" in active:
        values["l17b"] = loss_terminal_state(x_grid[:, 1], x_r, spec.reference_states)
    if "l17c" in active:
        rows = list(system.rows_without_control)
        res = system.ode_residual(out.primitive, u)[..., rows]
        values["l17c"] = loss_ode(res)
    if "l17d" in active:
        values["l17d"] = loss_costate_dynamics(lam_dot, dH_dx)
    if "l17e" in active:
        values["l17e"] = loss_costate_terminal(lam.view(B, per, -1)[:, 1], spec.non_reference_states)
    if "l17f" in active:
        values["l17f"] = loss_stationarity(dH_du)

    total = None
    for key in LOSS_IDS:
        if key in active and key in values:
            term = weights[key] * values[key]
            total = term if total is None else total + term
    return total, values


def breakdown(total, values, weights=None, active=None) -> LossBreakdown:
    weights = {**default_weights(), **(weights or {})}
    vals: dict[str, float | None] = {}
    for key in LOSS_IDS:
        if active is not None and key not in active:
            vals[key] = None
        elif key in values:
            vals[key] = float(values[key].detach())
        else:
            vals[key] = None
    diag = {}
    if "l17a" in values:
        diag["l17a"] = float(values["l17a"])
        if active is not None and "l17a" not in active:
            vals["l17a"] = None
    return LossBreakdown(values=vals, weights=weights, total=float(total.detach()), diagnostics=diag)
