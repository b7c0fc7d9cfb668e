"""Checked tensor primitives and a finite-difference gradient oracle.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
adds the shape contracts the rest of the package relies on (no implicit
broadcasting except a trailing gain/bias) and an independent central
difference checker used to validate every differentiable building block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ for {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul: batch dimensions differ for {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(x.shape)}")
    # torch.softmax subtracts the running max internally
    return torch.softmax(x, dim=axis)


def layer_norm(
    x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gain * x + bias``.

    ``gain`` and ``bias`` may be omitted for an affine-free norm (the AdaLN case).
    """
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} shape {tuple(p.shape)} != ({d},)")
    return F.layer_norm(x, (d,), gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    """Row lookup; backward scatter-adds into ``table``."""
    if ids.dtype not in (torch.int32, torch.int64):
        raise ShapeError(f"embedding: ids must be integer, got {ids.dtype}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    return F.embedding(ids, table)


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along the sequence axis; all other axes must agree."""
    ref = parts[0]
    ax = axis % ref.dim()
    for p in parts[1:]:
        if p.dim() != ref.dim() or any(
            p.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax
        ):
            raise ShapeError(
                f"concat: incompatible shapes {tuple(ref.shape)} and {tuple(p.shape)} on axis {axis}"
            )
    return torch.cat(list(parts), dim=axis)


def slice_seq(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for length {n}")
    return x.narrow(axis, start, stop - start)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse")
    return (pred - target).pow(2).mean()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    A second call on the same graph raises, matching the one-shot graph
    semantics of the training loop.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("backward: loss is not attached to a live graph")
    loss.backward()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: int
    dead_coordinates: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    coords: Sequence[int] | None = None,
    stencil: int = 2,
) -> GradCheckReport:
    """Compare autograd against central differences for coordinates of ``x``.

    ``stencil=2`` is the plain ``(f(x+h) - f(x-h)) / 2h``. ``stencil=4`` is the
    fourth-order ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``; at
    ``h=1e-3`` its truncation and roundoff errors are both near 1e-12, which
    resolves the tiny gradient entries of whole models that the two-point
    form cannot. Relative error is ``|a - n| / max(|a|, |n|, floor)``. Coordinates where both
    gradients are exactly zero are reported as dead rather than failed.
    ``coords`` restricts the check to those flat indices (all by default).
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    x = x.detach().to(torch.float64).clone()
    xr = x.clone().requires_grad_(True)
    out = f(xr)
    (analytic,) = torch.autograd.grad(out, xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    flat = x.reshape(-1)
    worst, worst_i, dead = 0.0, -1, []

    def at(i, value):
        flat[i] = value
        return f(x).item()

    with torch.no_grad():
        for i in range(flat.numel()) if coords is None else coords:
            orig = flat[i].item()
            if stencil == 2:
                numeric = (at(i, orig + h) - at(i, orig - h)) / (2.0 * h)
            else:
                numeric = (-at(i, orig + 2 * h) + 8 * at(i, orig + h) - 8 * at(i, orig - h) + at(i, orig - 2 * h)) / (
                    12.0 * h
                )
            flat[i] = orig
            a = analytic[i].item()
            if a == 0.0 and abs(numeric) < floor * 1e-3:
                dead.append(i)
                continue
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if not math.isfinite(err):
                err = math.inf
            if err > worst:
                worst, worst_i = err, i
    return GradCheckReport(worst, tol, worst_i, dead)
