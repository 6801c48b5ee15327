"""Truncated Taylor jets in elapsed time, layered on torch autograd.

A :class:`Jet` stores the value and the first ``K`` time-derivatives of a
quantity as ``K + 1`` tensors of equal shape.  Coefficients are in
derivative form: ``coeffs[n]`` is the n-th derivative, not the n-th Taylor
coefficient.  Because the coefficients are ordinary torch tensors, any
scalar built from them (derivative coefficients included) can be
differentiated w.r.t. model parameters by reverse mode, which is what the
training losses need.
"""

from __future__ import annotations

import contextlib
import math
import os
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NumericOverflowError, SingularityError

DTYPE = torch.float64

_check_finite = True


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Temporarily switch the eager non-finite checks on or off."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


def check_finite(tensors, where: str) -> None:
    if not _check_finite:
        return
    if isinstance(tensors, torch.Tensor):
        tensors = (tensors,)
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericOverflowError(f"non-finite value produced by {where}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


class Jet:
    """Value plus time-derivatives up to a fixed order."""

    __slots__ = ("cs",)

    def __init__(self, coeffs):
        if isinstance(coeffs, torch.Tensor):
            c = _as_tensor(coeffs)
            if c.dim() == 0:
                raise ValueError("a jet needs a leading coefficient axis")
            cs = tuple(c.unbind(0))
        else:
            cs = tuple(_as_tensor(c) for c in coeffs)
        if not cs:
            raise ValueError("a jet needs at least the value coefficient")
        self.cs = cs

    @classmethod
    def constant(cls, value, order: int) -> "Jet":
        v = _as_tensor(value)
        z = torch.zeros_like(v)
        return cls((v,) + (z,) * order)

    @property
    def order(self) -> int:
        return len(self.cs) - 1

    @property
    def value(self) -> torch.Tensor:
        return self.cs[0]

    @property
    def coeffs(self) -> list[torch.Tensor]:
        return list(self.cs)

    @property
    def c(self) -> torch.Tensor:
        """All coefficients stacked on a leading axis."""
        return torch.stack(self.cs)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.cs[0].shape)

    def __getitem__(self, idx) -> "Jet":
        return Jet(tuple(c[idx] for c in self.cs))

    def __repr__(self) -> str:
        return f"Jet(order={self.order}, coeffs={self.tolist()})"

    def tolist(self) -> list:
        return [c.tolist() for c in self.cs]

    def detach(self) -> "Jet":
        return Jet(tuple(c.detach() for c in self.cs))

    # calculus -----------------------------------------------------------

    def diff(self) -> "Jet":
        """Jet of the time-derivative (one order lower)."""
        if self.order < 1:
            raise ValueError("cannot differentiate an order-0 jet")
        return Jet(self.cs[1:])

    def truncate(self, order: int) -> "Jet":
        if order > self.order:
            raise ValueError(f"cannot raise jet order {self.order} to {order}")
        return Jet(self.cs[: order + 1])

    # arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Jet":
        if isinstance(other, Jet):
            if other.order != self.order:
                raise ValueError(f"jet order mismatch: {self.order} vs {other.order}")
            return other
        return Jet.constant(other, self.order)

    def __add__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            v = self.cs[0] + _as_tensor(other)
            check_finite(v, "jet add")
            return Jet((v,) + self.cs[1:])
        o = self._coerce(other)
        out = tuple(a + b for a, b in zip(self.cs, o.cs))
        check_finite(out, "jet add")
        return Jet(out)

    __radd__ = __add__

    def __neg__(self) -> "Jet":
        return Jet(tuple(-c for c in self.cs))

    def __sub__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return self + (-_as_tensor(other))
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Jet":
        return (-self) + other

    def __mul__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            f = other if isinstance(other, (int, float)) else _as_tensor(other)
            out = tuple(c * f for c in self.cs)
            check_finite(out, "jet scale")
            return Jet(out)
        a, b = self.cs, self._coerce(other).cs
        out = []
        for n in range(len(a)):
            acc = a[0] * b[n]
            for i in range(1, n + 1):
                term = a[i] * b[n - i]
                acc = acc + (term if i == n else math.comb(n, i) * term)
            out.append(acc)
        check_finite(out, "jet mul")
        return Jet(out)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet":
        a = self.cs
        if bool((a[0] == 0).any()):
            raise SingularityError("division by a jet with zero value")
        # r * a = 1  =>  r_n = -(sum_{i>=1} C(n,i) a_i r_{n-i}) / a_0
        inv0 = 1.0 / a[0]
        rows = [inv0]
        for n in range(1, len(a)):
            acc = n * a[1] * rows[n - 1]
            for i in range(2, n + 1):
                acc = acc + math.comb(n, i) * a[i] * rows[n - i]
            rows.append(-acc * inv0)
        check_finite(rows, "jet reciprocal")
        return Jet(rows)

    def __truediv__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            d = _as_tensor(other)
            if bool((d == 0).any()):
                raise SingularityError("division of a jet by zero")
            return self * (1.0 / d)
        return self * self._coerce(other).reciprocal()

    def __rtruediv__(self, other) -> "Jet":
        return self.reciprocal() * other

    def __pow__(self, n: int) -> "Jet":
        if not isinstance(n, int) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = Jet.constant(torch.ones_like(self.cs[0]), self.order)
        for _ in range(n):
            out = out * self
        return out

    # elementwise functions ---------------------------------------------

    def square(self) -> "Jet":
        return self * self

    def scale(self, factor) -> "Jet":
        return self * factor

    def silu(self) -> "Jet":
        if self.order <= 3:
            out = _silu_kernel(self.order)(*self.cs)
            check_finite(out, "jet silu")
            return Jet(out)
        return compose(self, _silu_derivatives)

    def tanh(self) -> "Jet":
        return compose(self, _tanh_derivatives)

    def sigmoid(self) -> "Jet":
        return compose(self, _sigmoid_derivatives)

    # affine maps over the trailing feature axis -------------------------

    def linear(self, weight: torch.Tensor, bias: torch.Tensor | None = None) -> "Jet":
        """``W z + b`` on the last axis of every coefficient."""
        rows = self.cs[0].shape[0] if self.cs[0].dim() > 1 else None
        if rows is not None and self.cs[0].dim() == 2:
            # one matmul over all coefficients
            out = torch.cat(self.cs, dim=0) @ weight.T
            parts = list(out.split(rows, dim=0))
        else:
            parts = [c @ weight.T for c in self.cs]
        if bias is not None:
            parts[0] = parts[0] + bias
        check_finite(parts, "jet linear")
        return Jet(parts)


def cat(jets: Sequence[Jet], dim: int = -1) -> Jet:
    """Concatenate jets along a batch or feature axis."""
    orders = {j.order for j in jets}
    if len(orders) != 1:
        raise ValueError(f"cannot concatenate jets of orders {sorted(orders)}")
    return Jet(tuple(torch.cat(cs, dim=dim) for cs in zip(*(j.cs for j in jets))))


def stack(jets: Sequence[Jet], dim: int = -1) -> Jet:
    orders = {j.order for j in jets}
    if len(orders) != 1:
        raise ValueError(f"cannot stack jets of orders {sorted(orders)}")
    return Jet(tuple(torch.stack(cs, dim=dim) for cs in zip(*(j.cs for j in jets))))


def lift_time(t, order: int) -> Jet:
    """The identity function of time as a jet: ``[t, 1, 0, ..., 0]``."""
    if order < 1:
        raise ValueError(f"jet order must be >= 1, got {order}")
    t = _as_tensor(t)
    if not bool(torch.isfinite(t).all()):
        raise ValueError("elapsed time must be finite")
    zero = torch.zeros_like(t)
    return Jet((t, torch.ones_like(t)) + (zero,) * (order - 1))


def arith(a: Jet, b: Jet, op: str) -> Jet:
    """Binary jet arithmetic by name (``add``, ``sub``, ``mul``, ``div``)."""
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise ValueError(f"unknown jet operation {op!r}")


def unary(a: Jet, fn: str, factor: float | None = None) -> Jet:
    """Apply one of ``silu``, ``tanh``, ``square`` or ``scale``."""
    if fn == "silu":
        return a.silu()
    if fn == "tanh":
        return a.tanh()
    if fn == "square":
        return a.square()
    if fn == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return a.scale(factor)
    raise ValueError(f"unknown jet function {fn!r}")


# univariate composition -------------------------------------------------


def _bell_table(f: Sequence[torch.Tensor], K: int):
    """Partial Bell polynomials B[n][k](f_1, ..., f_{n-k+1}) for n, k <= K."""
    B = [[None] * (K + 1) for _ in range(K + 1)]
    B[0][0] = torch.ones_like(f[0])
    for n in range(1, K + 1):
        for k in range(1, n + 1):
            acc = None
            for i in range(1, n - k + 2):
                prev = B[n - i][k - 1]
                if prev is None:
                    continue
                term = math.comb(n - 1, i - 1) * f[i] * prev
                acc = term if acc is None else acc + term
            B[n][k] = acc
    return B


def compose(a: Jet, derivs: Callable[[torch.Tensor, int], list[torch.Tensor]]) -> Jet:
    """Faa di Bruno: jet of ``g(a(t))``.

    ``derivs(v, K)`` returns ``[g(v), g'(v), ..., g^(K)(v)]``.
    """
    K = a.order
    g = derivs(a.cs[0], K)
    rows = [g[0]]
    if K:
        B = _bell_table(a.cs, K)
        for n in range(1, K + 1):
            acc = g[1] * B[n][1]
            for k in range(2, n + 1):
                acc = acc + g[k] * B[n][k]
            rows.append(acc)
    check_finite(rows, "jet composition")
    return Jet(rows)


@lru_cache(maxsize=None)
def _sigmoid_polys(K: int) -> tuple[np.ndarray, ...]:
    # sigma^(n) = p_n(sigma), p_0(s) = s, p_{n+1} = p_n'(s) * (s - s^2)
    P = np.polynomial.polynomial
    polys = [np.array([0.0, 1.0])]
    for _ in range(K):
        polys.append(P.polymul(P.polyder(polys[-1]), [0.0, 1.0, -1.0]))
    return tuple(polys)


@lru_cache(maxsize=None)
def _tanh_polys(K: int) -> tuple[np.ndarray, ...]:
    # tanh^(n) = q_n(tanh), q_0(y) = y, q_{n+1} = q_n'(y) * (1 - y^2)
    P = np.polynomial.polynomial
    polys = [np.array([0.0, 1.0])]
    for _ in range(K):
        polys.append(P.polymul(P.polyder(polys[-1]), [1.0, 0.0, -1.0]))
    return tuple(polys)


def _horner(coeffs: np.ndarray, s: torch.Tensor) -> torch.Tensor:
    out = torch.full_like(s, float(coeffs[-1]))
    for c in coeffs[-2::-1]:
        out = out * s + float(c)
    return out


def _sigmoid_derivatives(v: torch.Tensor, K: int) -> list[torch.Tensor]:
    s = torch.sigmoid(v)
    return [s] + [_horner(p, s) for p in _sigmoid_polys(K)[1:]]


def _tanh_derivatives(v: torch.Tensor, K: int) -> list[torch.Tensor]:
    y = torch.tanh(v)
    return [y] + [_horner(p, y) for p in _tanh_polys(K)[1:]]


def _silu_derivatives(v: torch.Tensor, K: int) -> list[torch.Tensor]:
    # silu = v sigma  =>  silu^(m) = v sigma^(m) + m sigma^(m-1)
    sig = _sigmoid_derivatives(v, K)
    out = [v * sig[0]]
    for m in range(1, K + 1):
        out.append(v * sig[m] + m * sig[m - 1])
    return out


# Closed-form silu jets for the orders the controller uses.  These are the
# Faa di Bruno sums above written out, so they can be fused by torch.compile.


def _silu_k0(v):
    return (v * torch.sigmoid(v),)


def _silu_k1(v, f1):
    s = torch.sigmoid(v)
    g1 = s * (1.0 + v * (1.0 - s))
    return v * s, g1 * f1


def _silu_k2(v, f1, f2):
    s = torch.sigmoid(v)
    d1 = s * (1.0 - s)
    d2 = d1 * (1.0 - 2.0 * s)
    g1 = v * d1 + s
    g2 = v * d2 + 2.0 * d1
    return v * s, g1 * f1, g1 * f2 + g2 * f1 * f1


def _silu_k3(v, f1, f2, f3):
    s = torch.sigmoid(v)
    d1 = s * (1.0 - s)
    d2 = d1 * (1.0 - 2.0 * s)
    d3 = d1 * (1.0 - 6.0 * d1)
    g1 = v * d1 + s
    g2 = v * d2 + 2.0 * d1
    g3 = v * d3 + 3.0 * d2
    f1sq = f1 * f1
    return (
        v * s,
        g1 * f1,
        g1 * f2 + g2 * f1sq,
        g1 * f3 + f1 * (3.0 * g2 * f2 + g3 * f1sq),
    )


_SILU_EAGER = (_silu_k0, _silu_k1, _silu_k2, _silu_k3)
_silu_compiled: dict[int, Callable] = {}


def _compile_enabled() -> bool:
    return os.environ.get("HION_COMPILE", "0") not in ("", "0", "false", "no")


def _silu_kernel(order: int) -> Callable:
    fn = _SILU_EAGER[order]
    if not _compile_enabled():
        return fn
    if order not in _silu_compiled:
        try:
            _silu_compiled[order] = torch.compile(fn, dynamic=False)
        except Exception:  # no compiler toolchain: stay eager
            _silu_compiled[order] = fn
    return _silu_compiled[order]


# parameter gradients ------------------------------------------------------


def flatten(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])


def grad_scalar(
    loss_eval: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Evaluate a scalar loss and its gradient w.r.t. ``params``.

    Returns ``(loss, flat_gradient)``.  Parameters that do not take part in
    the loss get a zero gradient.  A non-finite loss is refused; the loss is
    then re-evaluated with eager checks on so the error names the first jet
    operation that went non-finite.
    """
    loss = loss_eval()
    if loss.dim() != 0:
        raise ValueError("grad_scalar needs a scalar loss")
    if not bool(torch.isfinite(loss)):
        with finite_checks(True):
            loss_eval()
        raise NumericOverflowError("loss is non-finite (no jet op flagged)")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    flat = flatten(torch.zeros_like(p) if g is None else g for p, g in zip(params, grads))
    return loss.detach(), flat
