"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs at 64-bit precision. A forward pass records one backward
closure per differentiable op on the active :class:`Tape`; replaying the
tape in reverse order propagates gradients to every tensor that requires
them. Ops executed without an active tape are plain numpy arithmetic.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NonFiniteError",
    "active_tape",
    "param",
    "matmul",
    "matmul_t",
    "masked_matmul",
    "windowed_matmul_t",
    "windowed_matmul",
    "linear",
    "add",
    "scale",
    "relu",
    "gelu",
    "layer_norm",
    "causal_softmax_weights",
    "dropout",
    "take_rows",
    "compose_rows",
    "sum_all",
    "mean_all",
    "mean_of",
    "sq_loss_rows",
    "nll_loss_rows",
    "mse_masked",
    "cross_entropy_masked",
    "grad_check",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class TapeError(RuntimeError):
    """A tape was replayed twice, or backward was called on a non-scalar."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data, rng=None) -> Tensor:
    """Wrap ``data`` as a learnable tensor (gradient slot enabled)."""
    return Tensor(data, requires_grad=True)


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of one forward pass.

    Reverse iteration over the recorded ops is a valid topological order,
    so :meth:`backward` is a single reversed replay. A tape may be
    replayed exactly once; build a fresh forward pass for another
    backward call.
    """

    __slots__ = ("_nodes", "_spent")

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        top = _tape_stack().pop()
        assert top is self, "tape stack corrupted"

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("tape already replayed; record a fresh forward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            g = out.grad
            if g is not None:
                fn(g)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy on first write: g may alias another tensor's grad buffer.
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _record(out: Tensor, needs: bool, backward: Callable[[np.ndarray], None]) -> None:
    out.requires_grad = needs
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ bd.T)
        if b.requires_grad:
            _accum(b, ad.T @ g)

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for ``a: (m, k)`` and ``b: (n, k)``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_t shape mismatch: {a.data.shape} @ {b.data.shape}.T")
    out = Tensor(a.data @ b.data.T)
    ad, bd = a.data, b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ bd)
        if b.requires_grad:
            _accum(b, g.T @ ad)

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def masked_matmul(a: Tensor, b: Tensor, mask: np.ndarray, n_windows: int = 1) -> Tensor:
    """``(a * mask) @ b``; masked-out entries of ``a`` receive zero gradient.

    With ``n_windows > 1``, ``b`` holds that many stacked row segments and
    the same masked matrix is applied to each segment independently.
    """
    if a.data.shape != mask.shape:
        raise ShapeError(f"masked_matmul: matrix {a.data.shape} vs mask {mask.shape}")
    n = a.data.shape[1]
    if b.data.shape[0] != n_windows * n:
        raise ShapeError(
            f"masked_matmul: {n_windows} windows of {n} rows need {n_windows * n} rows, "
            f"got {b.data.shape}"
        )
    am = a.data * mask
    d = b.data.shape[1]
    bw = b.data.reshape(n_windows, n, d)
    out = Tensor(np.einsum("nm,wmd->wnd", am, bw).reshape(n_windows * n, d))

    def backward(g: np.ndarray) -> None:
        gw = g.reshape(n_windows, n, d)
        if a.requires_grad:
            _accum(a, np.einsum("wnd,wmd->nm", gw, bw) * mask)
        if b.requires_grad:
            _accum(b, np.einsum("nm,wnd->wmd", am, gw).reshape(n_windows * n, d))

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def windowed_matmul_t(a: Tensor, b: Tensor, n_windows: int = 1) -> Tensor:
    """Per-window ``a_w @ b_w.T`` over stacked row segments.

    ``a`` and ``b`` hold ``n_windows`` segments of equal length; the output
    stacks one score block per window, shape ``(n_windows * n, n)``.
    """
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"windowed_matmul_t shape mismatch: {a.data.shape} vs {b.data.shape}")
    rows, k = a.data.shape
    if rows % n_windows:
        raise ShapeError(f"{rows} rows do not split into {n_windows} windows")
    n = rows // n_windows
    aw = a.data.reshape(n_windows, n, k)
    bw = b.data.reshape(n_windows, n, k)
    out = Tensor(np.einsum("wik,wjk->wij", aw, bw).reshape(rows, n))

    def backward(g: np.ndarray) -> None:
        gw = g.reshape(n_windows, n, n)
        if a.requires_grad:
            _accum(a, np.einsum("wij,wjk->wik", gw, bw).reshape(rows, k))
        if b.requires_grad:
            _accum(b, np.einsum("wij,wik->wjk", gw, aw).reshape(rows, k))

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def windowed_matmul(a: Tensor, b: Tensor, n_windows: int = 1) -> Tensor:
    """Per-window ``a_w @ b_w`` where ``a`` stacks one square block per window."""
    rows, n = a.data.shape
    if rows != n_windows * n or b.data.shape[0] != rows:
        raise ShapeError(
            f"windowed_matmul: blocks {a.data.shape} with {n_windows} windows vs {b.data.shape}"
        )
    d = b.data.shape[1]
    aw = a.data.reshape(n_windows, n, n)
    bw = b.data.reshape(n_windows, n, d)
    out = Tensor(np.einsum("wij,wjd->wid", aw, bw).reshape(rows, d))

    def backward(g: np.ndarray) -> None:
        gw = g.reshape(n_windows, n, d)
        if a.requires_grad:
            _accum(a, np.einsum("wid,wjd->wij", gw, bw).reshape(rows, n))
        if b.requires_grad:
            _accum(b, np.einsum("wij,wid->wjd", aw, gw).reshape(rows, d))

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` over rows of ``x``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.data.shape} @ {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[1]},)")
        y = y + b.data
    out = Tensor(y)
    xd, wd = x.data, w.data
    needs = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ wd.T)
        if w.requires_grad:
            _accum(w, xd.T @ g)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    _record(out, needs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    _record(out, a.requires_grad or b.requires_grad, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * c)

    _record(out, a.requires_grad, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    pos = x.data > 0.0

    def backward(g: np.ndarray) -> None:
        _accum(x, g * pos)

    _record(out, x.requires_grad, backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf)

    def backward(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        _accum(x, g * (cdf + xd * pdf))

    _record(out, x.requires_grad, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit population variance, then scale and shift.

    With ``eps = 0`` a constant row maps to zeros (the normalized limit)
    rather than dividing by zero.
    """
    xd = x.data
    d = xd.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias shapes {gain.data.shape}/{bias.data.shape} != ({d},)"
        )
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    denom_sq = var + eps
    inv = np.where(denom_sq > 0.0, 1.0 / np.sqrt(np.where(denom_sq > 0.0, denom_sq, 1.0)), 0.0)
    xhat = (xd - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data
    needs = x.requires_grad or gain.requires_grad or bias.requires_grad

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gd
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    _record(out, needs, backward)
    return out


def causal_softmax_weights(scores: Tensor, n_windows: int = 1) -> Tensor:
    """Row-wise softmax over the causal prefix of a square score matrix.

    Row ``i`` is a softmax over columns ``0..i``; entries above the
    diagonal are exactly zero. Each row is stabilized by subtracting its
    prefix maximum. With ``n_windows > 1``, ``scores`` stacks one square
    block per window and each block is masked independently.
    """
    sd = scores.data
    if sd.ndim != 2 or sd.shape[0] != n_windows * sd.shape[1]:
        raise ShapeError(
            f"causal_softmax_weights requires {n_windows} stacked square blocks, got {sd.shape}"
        )
    n = sd.shape[1]
    tril = np.tril(np.ones((n, n), dtype=bool))
    if n_windows > 1:
        tril = np.tile(tril, (n_windows, 1))
    masked = np.where(tril, sd, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    alpha = e / e.sum(axis=1, keepdims=True)
    out = Tensor(alpha)

    def backward(g: np.ndarray) -> None:
        inner = (g * alpha).sum(axis=1, keepdims=True)
        _accum(scores, alpha * (g - inner))

    _record(out, scores.requires_grad, backward)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one Bernoulli mask from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep
    out = Tensor(x.data * mask)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * mask)

    _record(out, x.requires_grad, backward)
    return out


# ---------------------------------------------------------------------------
# row selection / assembly


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``x``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    _record(out, x.requires_grad, backward)
    return out


def compose_rows(n_rows: int, parts: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Assemble an ``(n_rows, d)`` tensor by placing each part's rows at given indices.

    Indices must be disjoint across parts and cover ``0..n_rows-1``.
    """
    parts = [(t, np.asarray(idx, dtype=np.intp)) for t, idx in parts if len(idx) > 0]
    if not parts:
        raise ShapeError("compose_rows needs at least one non-empty part")
    d = parts[0][0].data.shape[1]
    data = np.zeros((n_rows, d))
    filled = np.zeros(n_rows, dtype=bool)
    for t, idx in parts:
        if t.data.shape != (len(idx), d):
            raise ShapeError(f"compose_rows part shape {t.data.shape} != ({len(idx)}, {d})")
        if filled[idx].any():
            raise ShapeError("compose_rows indices overlap")
        data[idx] = t.data
        filled[idx] = True
    if not filled.all():
        raise ShapeError("compose_rows indices do not cover every row")
    out = Tensor(data)
    needs = any(t.requires_grad for t, _ in parts)

    def backward(g: np.ndarray) -> None:
        for t, idx in parts:
            if t.requires_grad:
                _accum(t, g[idx])

    _record(out, needs, backward)
    return out


# ---------------------------------------------------------------------------
# reductions / losses


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape))

    _record(out, x.requires_grad, backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean()))

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    _record(out, x.requires_grad, backward)
    return out


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors (batch reduction)."""
    if not terms:
        raise ValueError("mean_of needs at least one term")
    n = len(terms)
    out = Tensor(np.asarray(sum(float(t.data) for t in terms) / n))
    needs = any(t.requires_grad for t in terms)

    def backward(g: np.ndarray) -> None:
        share = g / n
        for t in terms:
            if t.requires_grad:
                _accum(t, np.asarray(share))

    _record(out, needs, backward)
    return out


def sq_loss_rows(pred: Tensor, target: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """Weighted squared error: ``sum_r w_r * mean_d (pred - target)^2``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"sq_loss_rows shape mismatch: {pred.data.shape} vs {target.shape}")
    w = np.asarray(row_weights, dtype=np.float64)[:, None]
    d = pred.data.shape[1]
    diff = pred.data - target
    out = Tensor(np.asarray((w * diff * diff).sum() / d))

    def backward(g: np.ndarray) -> None:
        _accum(pred, (2.0 * g) * w * diff / d)

    _record(out, pred.requires_grad, backward)
    return out


def nll_loss_rows(logits: Tensor, labels: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """Weighted negative log-likelihood: ``sum_r w_r * nll_r`` over logit rows."""
    labels = np.asarray(labels, dtype=np.intp)
    k = logits.data.shape[0]
    if labels.shape != (k,):
        raise ShapeError(f"nll_loss_rows: labels {labels.shape} vs logits {logits.data.shape}")
    w = np.asarray(row_weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(k)
    out = Tensor(np.asarray((-logp[rows, labels] * w).sum()))

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        p *= w[:, None]
        _accum(logits, g * p)

    _record(out, logits.requires_grad, backward)
    return out


def mse_masked(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over valid rows of the per-row mean squared error.

    ``mask`` selects valid rows; each valid row contributes the average of
    its per-dimension squared errors.
    """
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("mse_masked: no valid timesteps in mask")
    return sq_loss_rows(pred, target, mask / n_valid)


def cross_entropy_masked(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over valid rows of the negative log-likelihood of ``labels``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy_masked: mask {mask.shape} vs logits {logits.data.shape}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy_masked: no valid timesteps in mask")
    return nll_loss_rows(logits, labels, mask / n_valid)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare tape gradients of ``f`` against central differences in ``x``.

    ``f`` must be a deterministic scalar-valued closure over ``x``. Returns
    the max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x.grad = None
    with Tape() as tape:
        y = f()
        tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(
                f"grad_check: non-finite probe at coordinate {i}: f(+eps)={fp}, f(-eps)={fm}"
            )
        numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
