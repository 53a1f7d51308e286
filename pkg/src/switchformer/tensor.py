"""Dense tensors with reverse-mode automatic differentiation.

Every array is a row-major contiguous numpy buffer in float32 or float64.
Operations record closures on a per-result basis; ``backward`` walks the
recorded graph once, in reverse topological order, and accumulates
gradients additively into every grad-enabled ancestor.

The op set is deliberately small: exactly what a masked multi-head
encoder, its routers, and its losses need. Reductions delegate to numpy,
whose summation order is fixed for a given shape, so repeated runs on one
platform are bit-identical.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, OracleError

_ALLOWED_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """A contiguous float array plus an optional gradient buffer.

    Attributes:
        data: the values, row-major contiguous.
        grad_enabled: whether backward passes write into ``grad``.
        grad: accumulated gradient, same shape as ``data``, or None.
    """

    __slots__ = ("data", "grad_enabled", "grad", "_parents", "_backward_fn")

    def __init__(self, data, grad_enabled: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(arr)
        self.grad_enabled = bool(grad_enabled)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad_enabled = any(p.grad_enabled for p in parents)
        out.grad = None
        out._parents = parents if out.grad_enabled else ()
        out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _acc_grad(self, g: np.ndarray) -> None:
        # copy on first write: g may alias a buffer shared with other edges
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(g, self.data.shape).astype(self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad_enabled={self.grad_enabled})"


class ParamStore:
    """Ordered name -> Tensor map for trainable parameters.

    Iteration follows insertion order, which fixes the coordinate order
    seen by the optimizer, the checkpoint writer, and the
    finite-difference oracle.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.grad_enabled = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and affine ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b, "add")
    out = Tensor._from_op(a.data + b.data, (a, b))
    if out.grad_enabled:
        def bwd(dout):
            if a.grad_enabled:
                a._acc_grad(dout)
            if b.grad_enabled:
                b._acc_grad(dout)
        out._backward_fn = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b, "sub")
    out = Tensor._from_op(a.data - b.data, (a, b))
    if out.grad_enabled:
        def bwd(dout):
            if a.grad_enabled:
                a._acc_grad(dout)
            if b.grad_enabled:
                b._acc_grad(-dout)
        out._backward_fn = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _check_same_shape(a, b, "mul")
    _check_same_dtype(a, b, "mul")
    out = Tensor._from_op(a.data * b.data, (a, b))
    if out.grad_enabled:
        def bwd(dout):
            if a.grad_enabled:
                a._acc_grad(dout * b.data)
            if b.grad_enabled:
                b._acc_grad(dout * a.data)
        out._backward_fn = bwd
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = Tensor._from_op(x.data * x.data.dtype.type(c), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(dout * x.data.dtype.type(c))
        out._backward_fn = bwd
    return out


def add_const(x: Tensor, c) -> Tensor:
    """Add a constant array (no gradient through ``c``).

    ``c`` may broadcast against ``x`` as long as the result keeps
    ``x``'s shape, so padding masks of shape [1, N] or [B, 1, N, N]
    can shift larger activations.
    """
    c = np.asarray(c, dtype=x.data.dtype)
    data = x.data + c
    if data.shape != x.shape:
        raise DimensionError(f"add_const: constant {c.shape} changes shape {x.shape}")
    out = Tensor._from_op(data, (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(dout)
        out._backward_fn = bwd
    return out


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant array under the same broadcast rule as add_const."""
    c = np.asarray(c, dtype=x.data.dtype)
    data = x.data * c
    if data.shape != x.shape:
        raise DimensionError(f"mul_const: constant {c.shape} changes shape {x.shape}")
    out = Tensor._from_op(data, (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(dout * c)
        out._backward_fn = bwd
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a trailing-dimension bias vector to every row."""
    _check_same_dtype(x, bias, "add_bias")
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: x {x.shape} vs bias {bias.shape}")
    out = Tensor._from_op(x.data + bias.data, (x, bias))
    if out.grad_enabled:
        def bwd(dout):
            if x.grad_enabled:
                x._acc_grad(dout)
            if bias.grad_enabled:
                bias._acc_grad(dout.reshape(-1, bias.shape[0]).sum(axis=0))
        out._backward_fn = bwd
    return out


def add_suffix(x: Tensor, y: Tensor) -> Tensor:
    """Add a tensor whose shape matches x's trailing dimensions.

    Generalizes add_bias to multi-dim affine terms, e.g. a learned
    [N, d] offset applied across a [B, N, d] batch.
    """
    _check_same_dtype(x, y, "add_suffix")
    if x.ndim < y.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise DimensionError(f"add_suffix: x {x.shape} vs suffix {y.shape}")
    out = Tensor._from_op(x.data + y.data, (x, y))
    if out.grad_enabled:
        def bwd(dout):
            if x.grad_enabled:
                x._acc_grad(dout)
            if y.grad_enabled:
                y._acc_grad(dout.reshape(-1, *y.shape).sum(axis=0))
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor._from_op(x.data.reshape(shape), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(dout.reshape(x.shape))
        out._backward_fn = bwd
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._from_op(np.transpose(x.data, axes), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(np.transpose(dout, inv))
        out._backward_fn = bwd
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor._from_op(x.data[idx], (x,))
    if out.grad_enabled:
        def bwd(dout):
            g = np.zeros_like(x.data)
            g[idx] = dout
            x._acc_grad(g)
        out._backward_fn = bwd
    return out


def concat_axis(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_axis: empty part list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor._from_op(data, tuple(parts))
    if out.grad_enabled:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd(dout):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.grad_enabled:
                    idx = [slice(None)] * dout.ndim
                    idx[axis] = slice(lo, hi)
                    p._acc_grad(dout[tuple(idx)])
        out._backward_fn = bwd
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table by integer index; ids may be any shape.

    Output shape is ``ids.shape + (row_width,)``. Backward scatter-adds,
    so repeated ids accumulate.
    """
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"gather_rows: index out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")
    out = Tensor._from_op(table.data[ids], (table,))
    if out.grad_enabled:
        def bwd(dout):
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), dout.reshape(-1, table.shape[1]))
            table._acc_grad(g)
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional shared leading batch dimensions.

    Accepts 2-D x 2-D, ND x 2-D, 2-D x ND (leading dims on one side only),
    or ND x ND with identical leading dims.
    """
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ, {a.shape} x {b.shape}")
    out = Tensor._from_op(a.data @ b.data, (a, b))
    if out.grad_enabled:
        def bwd(dout):
            if a.grad_enabled:
                ga = dout @ np.swapaxes(b.data, -1, -2)
                if ga.ndim > a.ndim:
                    ga = ga.reshape(-1, *a.shape).sum(axis=0)
                a._acc_grad(ga)
            if b.grad_enabled:
                gb = np.swapaxes(a.data, -1, -2) @ dout
                if gb.ndim > b.ndim:
                    gb = gb.reshape(-1, *b.shape).sum(axis=0)
                b._acc_grad(gb)
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last dimension, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._from_op(p, (x,))
    if out.grad_enabled:
        def bwd(dout):
            dot = (dout * p).sum(axis=-1, keepdims=True)
            x._acc_grad(p * (dout - dot))
        out._backward_fn = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu, x * Phi(x) (not the tanh approximation)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * x.data.dtype.type(_INV_SQRT2)))
    out = Tensor._from_op(x.data * phi_cdf, (x,))
    if out.grad_enabled:
        def bwd(dout):
            pdf = np.exp(-0.5 * x.data * x.data) * x.data.dtype.type(_INV_SQRT_2PI)
            x._acc_grad(dout * (phi_cdf + x.data * pdf))
        out._backward_fn = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-dim row to mean 0 / variance 1, then affine.

    Uses the population variance. ``gain`` and ``bias`` are 1-D of width
    ``x.shape[-1]``.
    """
    if eps <= 0:
        raise ContractError("layer_norm: eps must be > 0")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    _check_same_dtype(x, gain, "layer_norm")
    _check_same_dtype(x, bias, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv_std
    out = Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias))
    if out.grad_enabled:
        def bwd(dout):
            if gain.grad_enabled:
                gain._acc_grad((dout * xhat).reshape(-1, d).sum(axis=0))
            if bias.grad_enabled:
                bias._acc_grad(dout.reshape(-1, d).sum(axis=0))
            if x.grad_enabled:
                dxhat = dout * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._acc_grad(term * inv_std)
        out._backward_fn = bwd
    return out


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero where the clamp is active."""
    clamped = np.maximum(x.data, x.data.dtype.type(floor))
    out = Tensor._from_op(np.log(clamped), (x,))
    if out.grad_enabled:
        active = x.data > floor
        def bwd(dout):
            x._acc_grad(np.where(active, dout / clamped, 0.0))
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# reductions and pooling


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._from_op(x.data.sum(), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(np.broadcast_to(dout, x.shape).astype(x.data.dtype, copy=True))
        out._backward_fn = bwd
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor._from_op(x.data.mean(), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(np.full(x.shape, dout / n, dtype=x.data.dtype))
        out._backward_fn = bwd
    return out


def masked_mean_rows(x: Tensor, keep) -> Tensor:
    """Mean over the second-to-last axis, restricted to rows where keep.

    ``keep`` is a constant boolean array of shape ``x.shape[:-1]``; every
    trailing slice must keep at least one row.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean_rows: keep {keep.shape} vs x {x.shape}")
    counts = keep.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("masked_mean_rows: a slice has zero kept rows")
    w = keep.astype(x.data.dtype) / counts[..., None].astype(x.data.dtype)
    out = Tensor._from_op((x.data * w[..., None]).sum(axis=-2), (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(dout[..., None, :] * w[..., None])
        out._backward_fn = bwd
    return out


def weighted_sum(weights: Tensor, candidates: Sequence[Tensor]) -> Tensor:
    """Convex-style combination sum_k weights[..., k] * candidates[k].

    ``weights`` has shape ``leading + (K,)``; every candidate has shape
    ``leading + rest``. Gradients flow into the weights and into every
    candidate.
    """
    cands = list(candidates)
    k = weights.shape[-1]
    if len(cands) != k:
        raise DimensionError(
            f"weighted_sum: {len(cands)} candidates vs {k} weights")
    lead = weights.shape[:-1]
    base = cands[0].shape
    for c in cands:
        if c.shape != base:
            raise DimensionError(f"weighted_sum: candidate shapes differ: {c.shape} vs {base}")
        _check_same_dtype(weights, c, "weighted_sum")
    if base[:len(lead)] != lead:
        raise DimensionError(
            f"weighted_sum: weights lead {lead} vs candidate shape {base}")
    expand = lead + (1,) * (len(base) - len(lead))
    data = np.zeros(base, dtype=weights.data.dtype)
    for i, c in enumerate(cands):
        data += weights.data[..., i].reshape(expand) * c.data
    out = Tensor._from_op(data, (weights, *cands))
    if out.grad_enabled:
        trailing = tuple(range(len(lead), len(base)))
        def bwd(dout):
            if weights.grad_enabled:
                gw = np.empty(weights.shape, dtype=weights.data.dtype)
                for i, c in enumerate(cands):
                    gw[..., i] = (dout * c.data).sum(axis=trailing) if trailing \
                        else dout * c.data
                weights._acc_grad(gw)
            for i, c in enumerate(cands):
                if c.grad_enabled:
                    c._acc_grad(weights.data[..., i].reshape(expand) * dout)
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# loss kernels (stable fused forms with hand-derived gradients)


def nll_from_logits(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    ids = np.asarray(target_ids)
    if logits.ndim != 2 or ids.shape != (logits.shape[0],):
        raise DimensionError(
            f"nll_from_logits: logits {logits.shape} vs targets {ids.shape}")
    m = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    logp = shifted[np.arange(m), ids] - lse
    out = Tensor._from_op(np.asarray(-logp.mean(), dtype=logits.data.dtype), (logits,))
    if out.grad_enabled:
        def bwd(dout):
            p = np.exp(shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(m), ids] -= 1.0
            logits._acc_grad(p * (dout / m))
        out._backward_fn = bwd
    return out


def kl_from_logits(logits: Tensor, target_probs) -> Tensor:
    """Mean KL(target || softmax(logits)) over rows; targets are constants."""
    t = np.asarray(target_probs, dtype=logits.data.dtype)
    if logits.shape != t.shape or logits.ndim != 2:
        raise DimensionError(
            f"kl_from_logits: logits {logits.shape} vs targets {t.shape}")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ContractError("kl_from_logits: target rows must sum to 1 +- 1e-4")
    m = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logq = shifted - lse
    with np.errstate(divide="ignore", invalid="ignore"):
        tlogt = np.where(t > 0, t * np.log(np.maximum(t, 1e-300)), 0.0)
    val = (tlogt - t * logq).sum(axis=-1).mean()
    out = Tensor._from_op(np.asarray(val, dtype=logits.data.dtype), (logits,))
    if out.grad_enabled:
        def bwd(dout):
            q = np.exp(logq)
            logits._acc_grad((q * sums[:, None] - t) * (dout / m))
        out._backward_fn = bwd
    return out


def bce_with_logits(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw scores, computed in stable form."""
    y = np.asarray(labels, dtype=scores.data.dtype)
    if y.shape != scores.shape:
        raise DimensionError(f"bce_with_logits: scores {scores.shape} vs labels {y.shape}")
    s = scores.data
    m = s.size
    val = (np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))).mean()
    out = Tensor._from_op(np.asarray(val, dtype=s.dtype), (scores,))
    if out.grad_enabled:
        def bwd(dout):
            sig = 1.0 / (1.0 + np.exp(-s))
            scores._acc_grad((sig - y) * (dout / m))
        out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# reverse pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Populate grads of every grad-enabled ancestor of a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.grad_enabled:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.grad_enabled and id(p) not in seen:
                stack.append((p, False))
    loss._acc_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def finite_diff_grad(f: Callable[[ParamStore], float], params: ParamStore,
                     step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar objective, per coordinate.

    ``f`` must be deterministic; it is evaluated twice up front and an
    ``OracleError`` is raised if the results differ. Parameter buffers are
    perturbed in place and restored before returning.
    """
    if step <= 0:
        raise ContractError("finite_diff_grad: step must be > 0")
    first = float(f(params))
    second = float(f(params))
    if first != second:
        raise OracleError(
            f"objective is not deterministic: {first!r} vs {second!r}")
    grads: dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        g = np.zeros_like(flat, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(params))
            flat[i] = orig - step
            f_minus = float(f(params))
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g.reshape(tensor.shape)
    return grads
