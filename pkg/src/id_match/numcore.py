"""
Numeric Core
============

Dense tensor operations with hand-written reverse-mode rules, sufficient to
differentiate the identity matching loss end to end.

Tensors are plain ``torch.Tensor`` objects (float32 by default) and the tape is
torch's autograd graph: every differentiable op below is a
``torch.autograd.Function`` whose ``backward`` is written out explicitly, so the
gradient of the matching loss never depends on torch's derivative formulas for
these ops. ``id_match.testing.numcore`` holds plain-torch reference versions
that the tests compare against.

Ops on the tape: matmul, row_softmax, elementwise (add, sub, mul, scale, neg),
divide (by a scalar), mean and squared_error. ``masked_sum`` lives in
``id_match.graph``.
"""

import logging
import math

import torch

from id_match.errors import DomainError, NumericError, ShapeError

__all__ = [
    "DEFAULT_DTYPE",
    "matmul",
    "row_softmax",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "divide",
    "mean",
    "squared_error",
    "tape_leaves",
    "backward",
    "grad_check",
]

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float32

ELEMENTWISE_KINDS = ("add", "sub", "mul", "scale", "neg")


def _reduce_to(grad, like):
    # scalar operands are broadcast in forward, so their gradient is a sum
    if like.dim() == 0 and grad.dim() > 0:
        return grad.sum()
    return grad


class MatMul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return torch.matmul(a, b)

    @staticmethod
    def backward(ctx, do):
        a, b = ctx.saved_tensors
        da = db = None
        if ctx.needs_input_grad[0]:
            da = torch.matmul(do, b.transpose(0, 1))
        if ctx.needs_input_grad[1]:
            db = torch.matmul(a.transpose(0, 1), do)
        return da, db


class RowSoftmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, s, column_mask):
        """
        Softmax over the last dimension restricted to enabled columns.

        Arguments:
            s(torch.Tensor): logits, shape (..., q).
            column_mask(torch.Tensor or None): boolean (q,). Disabled columns get logit -inf.

        Returns:
            p(torch.Tensor): same shape as s, rows sum to one over enabled columns.
        """
        if column_mask is not None:
            s = s.masked_fill(~column_mask, float("-inf"))
        # stabilize with the row max over enabled columns
        s_max = s.amax(dim=-1, keepdim=True)
        p = torch.exp(s - s_max)
        p = p / p.sum(dim=-1, keepdim=True)
        ctx.save_for_backward(p)
        return p

    @staticmethod
    def backward(ctx, dp):
        (p,) = ctx.saved_tensors
        delta = (dp * p).sum(dim=-1, keepdim=True)
        ds = p * (dp - delta)
        return ds, None


class Elementwise(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b, kind):
        ctx.kind = kind
        ctx.b_is_tensor = isinstance(b, torch.Tensor)
        if kind == "add":
            out = a + b
        elif kind == "sub":
            out = a - b
        elif kind in ("mul", "scale"):
            out = a * b
        else:
            out = -a
        if kind in ("mul", "scale"):
            if ctx.b_is_tensor:
                ctx.save_for_backward(a, b)
            else:
                ctx.save_for_backward(a)
                ctx.b = b
        elif ctx.b_is_tensor:
            ctx.save_for_backward(b)
        return out

    @staticmethod
    def backward(ctx, do):
        kind = ctx.kind
        da = db = None
        if kind == "add":
            da = do
            if ctx.b_is_tensor:
                (b,) = ctx.saved_tensors
                db = _reduce_to(do, b)
        elif kind == "sub":
            da = do
            if ctx.b_is_tensor:
                (b,) = ctx.saved_tensors
                db = _reduce_to(-do, b)
        elif kind in ("mul", "scale"):
            if ctx.b_is_tensor:
                a, b = ctx.saved_tensors
                da = do * b
                db = _reduce_to(do * a, b)
            else:
                da = do * ctx.b
        else:
            da = -do
        if not ctx.b_is_tensor:
            db = None
        return da, db, None


class Divide(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, s):
        ctx.s_is_tensor = isinstance(s, torch.Tensor)
        if ctx.s_is_tensor:
            ctx.save_for_backward(x, s)
        else:
            ctx.s = s
        return x / s

    @staticmethod
    def backward(ctx, do):
        if not ctx.s_is_tensor:
            return do / ctx.s, None
        x, s = ctx.saved_tensors
        dx = do / s
        ds = None
        if ctx.needs_input_grad[1]:
            ds = -(do * x).sum() / (s * s)
        return dx, ds


class Mean(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.shape = x.shape
        ctx.numel = x.numel()
        return x.mean()

    @staticmethod
    def backward(ctx, do):
        return do.expand(ctx.shape) / ctx.numel


class SquaredError(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        diff = a - b
        ctx.save_for_backward(diff)
        return (diff * diff).mean()

    @staticmethod
    def backward(ctx, do):
        (diff,) = ctx.saved_tensors
        g = do * 2.0 * diff / diff.numel()
        return g, -g


def matmul(a, b):
    """Matrix product of a (p x d) and b (d x q)."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return MatMul.apply(a, b)


def row_softmax(s, column_mask=None):
    if column_mask is not None:
        column_mask = torch.as_tensor(column_mask, dtype=torch.bool, device=s.device)
        if column_mask.shape != s.shape[-1:]:
            raise ShapeError(
                f"row_softmax: column mask {tuple(column_mask.shape)} does not match logits {tuple(s.shape)}"
            )
        if not bool(column_mask.any()):
            raise DomainError("row_softmax: every column is disabled")
    return RowSoftmax.apply(s, column_mask)


def elementwise(kind, a, b=None):
    """
    Pointwise ops. ``b`` is a tensor of a's shape, a 0-d tensor, or a number;
    nothing else is broadcast. ``scale`` takes a number, ``neg`` ignores b.
    """
    if kind not in ELEMENTWISE_KINDS:
        raise DomainError(f"elementwise: unknown kind {kind!r}")
    if kind == "neg":
        return Elementwise.apply(a, None, kind)
    if kind == "scale":
        if isinstance(b, torch.Tensor):
            if b.numel() != 1:
                raise ShapeError(f"elementwise scale: factor must be a scalar, got {tuple(b.shape)}")
            b = b.item()
        return Elementwise.apply(a, float(b), kind)
    if isinstance(b, torch.Tensor):
        if b.dim() != 0 and b.shape != a.shape:
            raise ShapeError(f"elementwise {kind}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    elif b is None:
        raise DomainError(f"elementwise {kind}: missing second operand")
    else:
        b = float(b)
    return Elementwise.apply(a, b, kind)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, factor):
    return elementwise("scale", a, factor)


def neg(a):
    return elementwise("neg", a)


def divide(x, s):
    """x / s for a scalar s (0-d tensor, differentiable, or a number)."""
    if isinstance(s, torch.Tensor) and s.numel() != 1:
        raise ShapeError(f"divide: divisor must be a scalar, got {tuple(s.shape)}")
    if isinstance(s, torch.Tensor):
        s = s.reshape(())
    return Divide.apply(x, s)


def mean(x):
    return Mean.apply(x)


def squared_error(a, b):
    """Mean over all entries of (a - b)^2."""
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return SquaredError.apply(a, b)


def tape_leaves(loss):
    """Leaf tensors reachable from ``loss``, in depth-first discovery order."""
    leaves, seen = [], set()
    stack = [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        variable = getattr(fn, "variable", None)
        if variable is not None:
            leaves.append(variable)
        stack.extend(next_fn for next_fn, _ in reversed(fn.next_functions))
    return leaves


def backward(loss, leaves=None):
    """
    Reverse pass from a scalar loss.

    Arguments:
        loss(torch.Tensor): single-element tensor on the tape.
        leaves(sequence of torch.Tensor or None): tensors to differentiate against,
            defaults to every leaf of the tape (see ``tape_leaves``).

    Returns:
        grads(tuple of torch.Tensor): d loss / d leaf, zeros for leaves the loss does not reach.
    """
    if loss.numel() != 1:
        raise DomainError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if leaves is None:
        leaves = tape_leaves(loss)
    leaves = tuple(leaves)
    if not leaves:
        return ()
    if not loss.requires_grad:
        return tuple(torch.zeros_like(leaf) for leaf in leaves)
    wanted = [leaf for leaf in leaves if leaf.requires_grad]
    if not wanted:
        return tuple(torch.zeros_like(leaf) for leaf in leaves)
    found = torch.autograd.grad(loss.reshape(()), wanted, retain_graph=True, allow_unused=True)
    by_leaf = {id(leaf): g for leaf, g in zip(wanted, found)}
    grads = []
    for leaf in leaves:
        g = by_leaf.get(id(leaf))
        grads.append(torch.zeros_like(leaf) if g is None else g)
    return tuple(grads)


def _evaluate(f, x):
    y = f(x)
    if not isinstance(y, torch.Tensor):
        y = torch.as_tensor(y, dtype=x.dtype)
    if y.numel() != 1:
        raise DomainError(f"grad_check: f must be scalar-valued, got shape {tuple(y.shape)}")
    if not bool(torch.isfinite(y).all()):
        raise NumericError("grad_check: f evaluated to a non-finite value")
    return y


def grad_check(f, x, eps=1e-3):
    """
    Max relative error between the tape gradient of ``f`` at ``x`` and central
    differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    The relative error of a coordinate is |a - n| / max(1e-8, |a| + |n|).
    Computation runs in x's dtype; pass float64 for tight tolerances.
    """
    if not eps > 0:
        raise DomainError(f"grad_check: eps must be positive, got {eps}")
    x0 = x.detach()
    xa = x0.clone().requires_grad_(True)
    y = _evaluate(f, xa)
    (analytic,) = backward(y, (xa,))

    numeric = torch.empty_like(x0)
    flat = x0.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            fp = _evaluate(f, xp.view_as(x0)).item()
            fm = _evaluate(f, xm.view_as(x0)).item()
            numeric.view(-1)[i] = (fp - fm) / (2 * eps)

    analytic = analytic.detach()
    denom = torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)
    err = ((analytic - numeric).abs() / denom).max().item()
    if math.isnan(err):
        raise NumericError("grad_check: relative error is NaN")
    logger.debug("grad_check over %d coordinates: max relative error %.3e", flat.numel(), err)
    return err
