"""T-mano controller: invariant mask, state generator, Taylor operator,
control definition and co-state generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import jets
from .errors import NumericOverflowError
from .jets import DTYPE, Jet
from .systems import CostSpec, DynamicalSystem

DEFAULT_HIDDEN = (64, 64, 64)


class Mlp(nn.Module):
    """``h_k o silu o ... o silu o h_1`` evaluated on jets."""

    def __init__(self, weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]):
        super().__init__()
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input does not match layer {i - 1} output")
        self.weights = nn.ParameterList(nn.Parameter(torch.as_tensor(w, dtype=DTYPE)) for w in weights)
        self.biases = nn.ParameterList(nn.Parameter(torch.as_tensor(b, dtype=DTYPE)) for b in biases)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, z: Jet) -> Jet:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = z.linear(w, b)
            if i < last:
                z = z.silu()
        return z


def init_params(rng: np.random.Generator, layer_dims: Sequence[int]) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise ValueError(f"invalid layer dims {list(layer_dims)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(torch.from_numpy(rng.uniform(-limit, limit, size=(fan_out, fan_in))))
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return Mlp(weights, biases)


@dataclass
class ControllerOutput:
    """Batched controller outputs.

    ``x`` holds the state jets (order = ODE order), ``xbar`` additionally the
    highest derivative, ``u`` and ``lam`` are order-1 jets so that their
    time-derivatives are available.
    """

    x: Jet
    xbar: Jet
    u: Jet
    lam: Jet
    extrapolated: torch.Tensor
    primitive: Jet | None = None

    def detach(self) -> "ControllerOutput":
        return ControllerOutput(
            self.x.detach(),
            self.xbar.detach(),
            self.u.detach(),
            self.lam.detach(),
            self.extrapolated,
            None if self.primitive is None else self.primitive.detach(),
        )


def _add_to_value(j: Jet, offset: torch.Tensor) -> Jet:
    return Jet((j.cs[0] + offset,) + j.cs[1:])


def _to_batch(a, width: int | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a, dtype=float) if not isinstance(a, torch.Tensor) else a, dtype=DTYPE)
    if width is not None and t.dim() == 1 and t.shape[0] == width:
        t = t.unsqueeze(0)
    return t


class TmanoController(nn.Module):
    """Maps ``(t_hat, x_o, x_r)`` to predicted state, control and co-state."""

    def __init__(
        self,
        system: DynamicalSystem,
        cost: CostSpec,
        state_gen: Mlp,
        costate_gen: Mlp,
    ):
        super().__init__()
        system.check_cost(cost)
        self.system = system
        self.spec = system.spec
        self.cost = cost
        self.state_gen = state_gen
        self.costate_gen = costate_gen
        if state_gen.layer_dims[0] != self.state_input_dim or state_gen.layer_dims[-1] != self.spec.n_primitives:
            raise ValueError(f"state generator dims {state_gen.layer_dims} do not fit {self.spec.name}")
        if costate_gen.layer_dims[0] != self.costate_input_dim or costate_gen.layer_dims[-1] != self.spec.n_states:
            raise ValueError(f"co-state generator dims {costate_gen.layer_dims} do not fit {self.spec.name}")

    @classmethod
    def create(
        cls,
        system: DynamicalSystem,
        cost: CostSpec,
        rng: np.random.Generator,
        state_hidden: Sequence[int] = DEFAULT_HIDDEN,
        costate_hidden: Sequence[int] = DEFAULT_HIDDEN,
    ) -> "TmanoController":
        spec = system.spec
        sg = init_params(rng, [cls._state_in(spec), *state_hidden, spec.n_primitives])
        cg = init_params(rng, [cls._costate_in(spec), *costate_hidden, spec.n_states])
        return cls(system, cost, sg, cg)

    @staticmethod
    def _state_in(spec) -> int:
        return 1 + spec.n_states + spec.n_references

    @staticmethod
    def _costate_in(spec) -> int:
        # t, x_o, x_r, xbar_h (states plus highest derivative), u_h
        return 1 + spec.n_states + spec.n_references + spec.n_states + spec.n_primitives + spec.n_controls

    @property
    def state_input_dim(self) -> int:
        return self._state_in(self.spec)

    @property
    def costate_input_dim(self) -> int:
        return self._costate_in(self.spec)

    @property
    def jet_order(self) -> int:
        # one above the ODE order so that u and lambda get a first derivative
        return self.spec.ode_order + 1

    def flat_parameters(self) -> torch.Tensor:
        return jets.flatten(p.detach() for p in self.parameters())

    def load_flat_parameters(self, flat: torch.Tensor) -> None:
        n_total = sum(p.numel() for p in self.parameters())
        if flat.numel() != n_total:
            raise ValueError(f"expected {n_total} parameters, got {flat.numel()}")
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(flat[i : i + n].view_as(p))
                i += n

    # stages ---------------------------------------------------------------

    def invariant_mask(self, x_o, x_r):
        """Zero invariant primitive states and move the reference with them.

        Returns ``(masked x_o, shifted x_r, offset)``; ``offset`` has the
        state's shape and is non-zero only in invariant value slots.
        """
        x_o = _to_batch(x_o, self.spec.n_states)
        x_r = _to_batch(x_r, self.spec.n_references)
        k = self.spec.ode_order
        offset = torch.zeros_like(x_o)
        for j, flag in enumerate(self.spec.invariant_flags):
            if flag:
                offset[..., j * k] = x_o[..., j * k]
        masked = x_o - offset
        ref_offset = offset[..., list(self.spec.reference_states)]
        return masked, x_r - ref_offset, offset

    def taylor_operator(self, t: Jet, x_o: torch.Tensor, xhat: Jet, offset: torch.Tensor | None = None) -> Jet:
        """Known Taylor prefix of ``x_o`` plus ``xhat * t^k`` per primitive."""
        k = self.spec.ode_order
        if t.order < k:
            raise ValueError(f"Taylor operator needs jets of order >= {k}, got {t.order}")
        powers = [None, t]
        for _ in range(2, k + 1):
            powers.append(powers[-1] * t)
        cols = []
        for j in range(self.spec.n_primitives):
            base = x_o[..., j * k]
            acc = xhat[..., j] * powers[k][..., 0]
            for n in range(1, k):
                acc = acc + powers[n][..., 0] * (x_o[..., j * k + n] / math.factorial(n))
            acc = acc + base
            if offset is not None:
                acc = acc + offset[..., j * k]
            cols.append(acc)
        return jets.stack(cols, dim=-1)

    def forward(self, t, x_o, x_r) -> ControllerOutput:
        spec = self.spec
        k = spec.ode_order
        t = _to_batch(t)
        if t.dim() == 0:
            t = t.unsqueeze(0)
        x_o = _to_batch(x_o, spec.n_states)
        x_r = _to_batch(x_r, spec.n_references)
        B = t.shape[0]
        if x_o.shape[0] != B:
            x_o = x_o.expand(B, -1)
        if x_r.shape[0] != B:
            x_r = x_r.expand(B, -1)
        extrapolated = (t < 0) | (t > spec.t_f)

        K = self.jet_order
        tj = jets.lift_time(t, K)[..., None]
        xo_m, xr_s, offset = self.invariant_mask(x_o, x_r)

        inputs = jets.cat([tj, Jet.constant(xo_m, K), Jet.constant(xr_s, K)])
        try:
            xhat = self.state_gen(inputs)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"state generator: {exc}") from exc
        prim = self.taylor_operator(tj, xo_m, xhat)  # invariant frame

        # states and their derivatives, in the invariant frame
        derivs = [prim]
        for _ in range(k):
            derivs.append(derivs[-1].diff())
        lower = K - k  # order carried by the k-th derivative
        cols_masked = []
        for j in range(spec.n_primitives):
            for d in range(k + 1):
                cols_masked.append(derivs[d][..., j].truncate(lower))
        xbar_m = jets.stack(cols_masked, dim=-1)
        prim_abs = prim + offset[..., [j * k for j in range(spec.n_primitives)]]
        try:
            u = self.system.control_definition(prim_abs)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"control definition: {exc}") from exc

        # absolute-frame jets: re-add the invariant offsets to value slots
        order_x = K - (k - 1)
        x_state = jets.stack(
            [derivs[d][..., j].truncate(order_x) for j in range(spec.n_primitives) for d in range(k)],
            dim=-1,
        )
        x_state = _add_to_value(x_state, offset)
        xbar_offset = torch.zeros(xbar_m.shape, dtype=DTYPE)
        for j in range(spec.n_primitives):
            xbar_offset[..., j * (k + 1)] = offset[..., j * k]
        xbar_abs = _add_to_value(xbar_m, xbar_offset)

        L1 = 1
        cs_in = jets.cat(
            [
                tj.truncate(L1),
                Jet.constant(xo_m, L1),
                Jet.constant(xr_s, L1),
                xbar_m.truncate(L1),
                u.truncate(L1),
            ]
        )
        try:
            lam = self.costate_gen(cs_in)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"co-state generator: {exc}") from exc
        return ControllerOutput(
            x=x_state, xbar=xbar_abs, u=u.truncate(L1), lam=lam, extrapolated=extrapolated,
            primitive=prim_abs,
        )
