"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float64 by default, float32 selectable)
and every primitive here registers a backward rule on the active gradient
tape. There is no broadcasting beyond row-vector bias addition: shapes are
explicit everywhere, and mismatches raise DimensionError with both shapes in
the message.

Set GRAPHORMER_DEBUG_CHECKS=1 (or call set_debug_checks) to have every
primitive verify its output is finite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Shape mismatch between operands."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf with debug checks enabled, or training diverged."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


# Python floats: NumPy f64 scalars would promote float32 tensors under NEP 50.
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_debug_checks = os.environ.get("GRAPHORMER_DEBUG_CHECKS", "") == "1"


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(np.float64)


class Tensor:
    """Dense n-dimensional real array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_produced_by")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._produced_by: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# Stack of active tapes; ops record onto the innermost one.
_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of executed primitives.

    Execution order is a topological order by construction, so replaying the
    record backwards visits every op exactly once, after all its consumers.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Populate d(loss)/d(leaf) on every requires_grad leaf feeding loss.

        Gradients accumulate additively, both across multiple uses of a tensor
        within the graph and across repeated backward calls.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss._produced_by is not self:
            if loss._produced_by is None and loss.requires_grad:
                # Degenerate graph: the loss is itself a leaf.
                seed = np.ones_like(loss.data)
                loss.grad = seed if loss.grad is None else loss.grad + seed
                return
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            in_grads = vjp(g_out)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t._produced_by is self:
                    acc = grads.get(id(t))
                    grads[id(t)] = g if acc is None else acc + g
                else:
                    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss through its tape."""
    tape = loss._produced_by
    if tape is None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ContractError("loss was not produced through taped ops")
    tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._produced_by = tape
        tape._entries.append((out, inputs, vjp))
    return out


def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-d tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"subtract shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"multiply shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "multiply")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x by a 0-d tensor; the gradient flows to both operands."""
    if s.data.size != 1:
        raise DimensionError(f"mul_scalar expects a scalar tensor, got shape {s.shape}")
    xd, sd = x.data, s.data.reshape(())
    return _record(
        xd * sd,
        (x, s),
        lambda g: (g * sd, np.asarray(np.sum(g * xd)).reshape(s.shape)),
        "mul_scalar",
    )


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Row-vector bias addition, the one permitted broadcast."""
    _require_2d(x, "add_rowvec")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(
            f"add_rowvec bias shape {b.shape} incompatible with {x.shape}"
        )
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape {x.shape} -> {shape} changes element count")
    xshape = x.shape
    return _record(
        x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(xshape),), "reshape"
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _record(out, tuple(parts), vjp, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if axis >= x.data.ndim or start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow(axis={axis}, start={start}, length={length}) out of range for {x.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    xshape = x.shape
    xdtype = x.data.dtype

    def vjp(g):
        full = np.zeros(xshape, dtype=xdtype)
        full[idx] = g
        return (full,)

    return _record(x.data[idx].copy(), (x,), vjp, "narrow")


def sum_all(x: Tensor) -> Tensor:
    xshape, xdtype = x.shape, x.data.dtype
    return _record(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.full(xshape, float(g), dtype=xdtype),),
        "sum_all",
    )


def mean_all(x: Tensor) -> Tensor:
    xshape, xdtype = x.shape, x.data.dtype
    n = x.size
    return _record(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.full(xshape, float(g) / n, dtype=xdtype),),
        "mean_all",
    )


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows of an n x d tensor, returned as 1 x d."""
    _require_2d(x, "mean_rows")
    n = x.shape[0]
    return _record(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g / n, n, axis=0),),
        "mean_rows",
    )


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all coordinates (scalar output)."""
    if a.shape != b.shape:
        raise DimensionError(f"l1_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        s = np.sign(diff) * (float(g) / n)
        return s, -s

    return _record(np.asarray(np.abs(diff).mean()), (a, b), vjp, "l1_distance")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def _gelu_forward(x: np.ndarray) -> np.ndarray:
    # Exact Gaussian CDF form, not the tanh approximation.
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))  # shared with the backward rule

    def vjp(g):
        pdf = np.exp(np.maximum(-0.5 * xd * xd, -700.0)) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return _record(xd * phi, (x,), vjp, "gelu")


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax, stabilized by per-row max subtraction."""
    _require_2d(x, "softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(np.maximum(shifted, -700.0))  # keep tails out of subnormal range
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (x,), vjp, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then affine gamma/beta."""
    _require_2d(x, "layer_norm")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} incompatible with {x.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gd = gamma.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gd
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv_std
        return dx, dgamma, dbeta

    return _record(xhat * gd + beta.data, (x, gamma, beta), vjp, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws the mask from rng. p=0 returns x unchanged."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Per-head softmax(Q K^T / sqrt(d/h)) V with heads re-concatenated.

    One fused primitive (the hot path of every block): inputs are the already
    projected n x d matrices; returns the n x d output and the (h, n, n)
    attention maps. The backward rule reuses the stored maps.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise DimensionError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    if heads < 1 or d % heads != 0:
        raise DimensionError(f"heads={heads} does not divide hidden size {d}")
    dh = d // heads
    inv_sqrt = float(1.0 / np.sqrt(dh))

    def split(m: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(m.reshape(n, heads, dh).transpose(1, 0, 2))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = qh @ kh.transpose(0, 2, 1) * inv_sqrt
    scores -= scores.max(axis=2, keepdims=True)
    # Clamp keeps exp out of the subnormal range (exp(-700) ~ 1e-304); the
    # affected tail weights are zero at working precision either way.
    e = np.exp(np.maximum(scores, -700.0))
    attn = e / e.sum(axis=2, keepdims=True)
    out = (attn @ vh).transpose(1, 0, 2).reshape(n, d)

    def vjp(g):
        gh = np.ascontiguousarray(g.reshape(n, heads, dh).transpose(1, 0, 2))
        dv = attn.transpose(0, 2, 1) @ gh
        dattn = gh @ vh.transpose(0, 2, 1)
        ds = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
        dq = ds @ kh * inv_sqrt
        dk = ds.transpose(0, 2, 1) @ qh * inv_sqrt

        def merge(m):
            return np.ascontiguousarray(m.transpose(1, 0, 2)).reshape(n, d)

        return merge(dq), merge(dk), merge(dv)

    return _record(out, (q, k, v), vjp, "scaled_dot_attention"), attn


# ---------------------------------------------------------------------------
# Convolution support: strided 2-d patch extraction (im2col)
# ---------------------------------------------------------------------------


def conv_patches(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Extract k x k patches from an H x W x C tensor into (oH*oW, k*k*C).

    Patch layout is row-major over (ki, kj, channel), so a conv layer is this
    op followed by a matmul with a (k*k*C, C_out) weight.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv_patches expects H x W x C, got shape {x.shape}")
    h, w, c = x.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(0, 1))
    win = win[::stride, ::stride]  # (oh, ow, C, k, k)
    patches = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kernel * kernel * c)

    def vjp(g):
        gv = g.reshape(oh, ow, kernel, kernel, c)
        gpad = np.zeros_like(xp)
        for di in range(kernel):
            rows = di + stride * np.arange(oh)
            for dj in range(kernel):
                cols = dj + stride * np.arange(ow)
                gpad[np.ix_(rows, cols)] += gv[:, :, di, dj, :]
        if pad:
            return (gpad[pad : pad + h, pad : pad + w, :],)
        return (gpad,)

    return _record(patches.copy(), (x,), vjp, "conv_patches")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst relative error between analytic and central-difference gradients."""

    per_param: dict[str, float]
    max_rel_error: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _normalize_params(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    if isinstance(params, Tensor):
        return [("param0", params)]
    return [(f"param{i}", t) for i, t in enumerate(params)]


def grad_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tol: float = 1e-5,
    entries_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of a taped scalar function to central differences.

    f must be a deterministic closure over `params` (a dict name->Tensor, a
    sequence, or a single tensor). Each checked coordinate is perturbed by
    +/- h and the relative error |analytic - fd| / max(1, |analytic|, |fd|)
    is reported per parameter. entries_per_param, when set, deterministically
    subsamples coordinates of large parameters (seeded); None checks every
    coordinate.
    """
    named = _normalize_params(params)

    v1 = f()
    v2 = f()
    if v1.data.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {v1.shape}")
    if not np.array_equal(v1.data, v2.data):
        raise DeterminismError(
            "function returned differing forward values between evaluations"
        )

    saved = [(t, t.grad) for _, t in named]
    for _, t in named:
        t.grad = None
    with GradTape() as tape:
        loss = f()
    if loss._produced_by is tape:
        tape.backward(loss)
    # else: f does not depend on any taped input; analytic gradients are zero.
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named
    }
    for t, g in saved:
        t.grad = g

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst = 0.0
    for name, t in named:
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        n = flat.size
        if entries_per_param is not None and n > entries_per_param:
            coords = np.sort(rng.choice(n, size=entries_per_param, replace=False))
        else:
            coords = np.arange(n)
        err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f().data)
            flat[c] = orig - h
            fm = float(f().data)
            flat[c] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(1.0, abs(ana[c]), abs(fd))
            err = max(err, abs(ana[c] - fd) / denom)
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckReport(per_param=per_param, max_rel_error=worst)
