"""The learned switcher shared by the attention-mode and input blocks.

Pipeline per decision: pool each modality, take the elementwise product
of the pooled vectors as an alignment signal, run a small MLP + softmax
for route probabilities, perturb with Gumbel noise at a temperature, and
either soft-mix candidates (training) or pick the argmax (inference).

Routing functions accept both single decisions (probability vectors of
shape [K]) and batched ones ([B, K]); candidates carry matching leading
dimensions.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError

PI_FLOOR = 1e-12
UNIFORM_CLAMP = 1e-9

Candidate = T.Tensor | Callable[[], T.Tensor]


@dataclass
class RouterParams:
    """Two-layer MLP (width d -> d -> n_routes) with gelu in between.

    Each switching block owns its own instance; none are shared.
    """

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    @property
    def n_routes(self) -> int:
        return self.w2.shape[1]

    @staticmethod
    def create(store: T.ParamStore, prefix: str, d: int, n_routes: int,
               rng: np.random.Generator, dtype=np.float32) -> "RouterParams":
        std = 1.0 / np.sqrt(d)
        return RouterParams(
            w1=store.add(f"{prefix}.w1",
                         T.Tensor(rng.normal(0.0, std, size=(d, d)), dtype=dtype)),
            b1=store.add(f"{prefix}.b1", T.Tensor(np.zeros(d), dtype=dtype)),
            w2=store.add(f"{prefix}.w2",
                         T.Tensor(rng.normal(0.0, std, size=(d, n_routes)), dtype=dtype)),
            b2=store.add(f"{prefix}.b2", T.Tensor(np.zeros(n_routes), dtype=dtype)),
        )


@dataclass
class RouteDecision:
    """Record of one routing choice for one sample at one block."""

    layer: int
    block: str  # "SAB" | "SIB"
    pi: list[float]
    p: list[float]
    choice: int
    tau: float
    mode: str  # "train" | "infer"
    sample: int = 0
    extra: dict = field(default_factory=dict)

    def to_record(self, step: int) -> dict:
        return {"step": step, "sample": self.sample, "layer": self.layer,
                "block": self.block, "pi": self.pi, "p": self.p,
                "choice": self.choice, "tau": self.tau}


def pool_modality(x_mod: T.Tensor, pad=None) -> T.Tensor:
    """Average over non-padding token rows (special markers included)."""
    if pad is None:
        keep = np.ones(x_mod.shape[:-1], dtype=bool)
    else:
        pad = np.asarray(pad, dtype=bool)
        if pad.shape != x_mod.shape[:-1]:
            raise ContractError(f"pad shape {pad.shape} vs tokens {x_mod.shape[:-1]}")
        keep = ~pad
    if not keep.any(axis=-1).all():
        raise DegenerateInputError("pool_modality: a sample has no non-padding tokens")
    return T.masked_mean_rows(x_mod, keep)


def alignment_degree(z_i: T.Tensor, z_t: T.Tensor) -> T.Tensor:
    """Elementwise product of the two pooled modality vectors."""
    return T.mul(z_i, z_t)


def mode_distribution(d_l: T.Tensor, params: RouterParams,
                      allowed: Sequence[int] | None = None) -> T.Tensor:
    """Route probabilities: softmax over the MLP head.

    ``allowed`` optionally restricts the route space; excluded routes get
    a large negative logit and hence (numerically) zero probability.
    """
    h = T.gelu(_affine(d_l, params.w1, params.b1))
    logits = _affine(h, params.w2, params.b2)
    if allowed is not None:
        k = params.n_routes
        allowed = sorted(set(int(a) for a in allowed))
        if not allowed or any(a < 0 or a >= k for a in allowed):
            raise ContractError(f"allowed routes {allowed} out of range [0, {k})")
        if len(allowed) < k:
            block = np.full(k, -1e9, dtype=logits.dtype)
            block[allowed] = 0.0
            logits = T.add_const(logits, block)
    return T.softmax_lastdim(logits)


def _affine(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    """x @ w + b where x may be a bare vector [d] or batched [B, d]."""
    if x.ndim == 1:
        out = T.matmul(T.reshape(x, (1, x.shape[0])), w)
        return T.reshape(T.add_bias(out, b), (w.shape[1],))
    return T.add_bias(T.matmul(x, w), b)


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Gumbel(0, 1) noise, -log(-log u), with u clamped away from {0, 1}."""
    u = rng.random(size=shape)
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(pi: T.Tensor, tau: float, noise=None) -> T.Tensor:
    """Temperature-smoothed reparameterized route distribution.

    ``noise`` is a constant array of Gumbel draws (training) or None /
    zeros (inference). p_n is proportional to exp((log pi_n + g_n) / tau).
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    logits = T.log_clamped(pi, PI_FLOOR)
    if noise is not None:
        noise = np.asarray(noise, dtype=pi.dtype)
        if noise.shape != pi.shape:
            raise ContractError(f"noise shape {noise.shape} vs pi {pi.shape}")
        logits = T.add_const(logits, noise)
    return T.softmax_lastdim(T.scale(logits, 1.0 / tau))


def apply_topk(p: T.Tensor, k: int) -> T.Tensor:
    """Keep the k largest routes (ties -> lowest index) and renormalize."""
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"topk k={k} out of range [1, {n}]")
    if k == n:
        return p
    flat = p.data.reshape(-1, n)
    keep = np.zeros_like(flat, dtype=bool)
    for row in range(flat.shape[0]):
        order = np.argsort(-flat[row], kind="stable")
        keep[row, order[:k]] = True
    keep = keep.reshape(p.shape)
    masked = T.mul_const(p, keep.astype(p.dtype))
    return _renormalize(masked)


def _renormalize(p: T.Tensor) -> T.Tensor:
    """Divide by the last-dim sum, differentiably."""
    n = p.shape[-1]
    s = T.matmul(p if p.ndim > 1 else T.reshape(p, (1, n)),
                 T.Tensor(np.ones((n, 1)), dtype=p.dtype))  # [..., 1]
    if p.ndim == 1:
        s = T.reshape(s, (1,))
    inv = _reciprocal(s)
    tiled = T.concat_axis([inv] * n, axis=-1)
    return T.mul(p, tiled if p.ndim > 1 else T.reshape(tiled, (n,)))


def _reciprocal(x: T.Tensor) -> T.Tensor:
    out = T.Tensor._from_op(1.0 / x.data, (x,))
    if out.grad_enabled:
        def bwd(dout):
            x._acc_grad(-dout / (x.data * x.data))
        out._backward_fn = bwd
    return out


def _materialize(c: Candidate) -> T.Tensor:
    return c() if callable(c) else c


def combine_soft(p: T.Tensor, candidates: Sequence[Candidate]) -> T.Tensor:
    """Probability-weighted mixture of candidates.

    Candidates with exactly zero weight (for every sample in the batch)
    are never evaluated, so a top-k-restricted mixture only pays for the
    activated routes.
    """
    n = p.shape[-1]
    if len(candidates) != n:
        raise ContractError(f"{len(candidates)} candidates vs {n} routes")
    weights = p.data.reshape(-1, n)
    active = [i for i in range(n) if np.any(weights[:, i] != 0.0)]
    if not active:
        raise ContractError("combine_soft: all routes have zero weight")
    tensors = {i: _materialize(candidates[i]) for i in active}
    base = tensors[active[0]]
    zeros = None
    full: list[T.Tensor] = []
    for i in range(n):
        if i in tensors:
            full.append(tensors[i])
        else:
            if zeros is None:
                zeros = T.Tensor(np.zeros(base.shape), dtype=base.dtype)
            full.append(zeros)
    return T.weighted_sum(p, full)


def select_hard(p: T.Tensor, candidates: Sequence[Candidate]) -> tuple[T.Tensor, int]:
    """Return the argmax-probability candidate; only that one is evaluated.

    Expects a single decision vector [K] (ties break to the lowest index).
    """
    if p.ndim != 1:
        raise ContractError("select_hard expects a single probability vector")
    if len(candidates) != p.shape[0]:
        raise ContractError(f"{len(candidates)} candidates vs {p.shape[0]} routes")
    choice = int(np.argmax(p.data))
    return _materialize(candidates[choice]), choice


def hard_choices(p: T.Tensor) -> np.ndarray:
    """Argmax per row with lowest-index tie-breaking; works batched."""
    flat = p.data.reshape(-1, p.shape[-1])
    return np.argmax(flat, axis=-1)
