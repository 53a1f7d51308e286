"""Masking procedures, prediction heads, and the three pretraining losses:
masked token prediction over multimodal context, masked-region class
distribution matching (KL), and pair matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import MASK_ID, NUM_SPECIAL_TOKENS, EncoderConfig, MultimodalBatch
from .errors import ContractError


@dataclass
class MaskingOutcome:
    """A corrupted batch plus everything needed to score the corruption.

    Masked-token positions keep their position ids; targets are stored
    only for masked slots, flattened in row-major (sample, position) order.
    """

    corrupted: MultimodalBatch
    text_mask: np.ndarray | None = None      # [B, N_t] bool
    text_targets: np.ndarray | None = None   # [M] original token ids
    region_mask: np.ndarray | None = None    # [B, N_i] bool
    region_targets: np.ndarray | None = None  # [M, C] detector distributions

    def n_text_masked(self) -> int:
        return 0 if self.text_mask is None else int(self.text_mask.sum())

    def n_regions_masked(self) -> int:
        return 0 if self.region_mask is None else int(self.region_mask.sum())


@dataclass
class HeadParams:
    """Task heads. The classification heads start at zero so an untrained
    model scores every class uniformly (analytic starting losses); the
    match head may start random so the encoder sees gradient before the
    head warms up."""

    mlm_w: T.Tensor
    mlm_b: T.Tensor
    mrc_w: T.Tensor
    mrc_b: T.Tensor
    itm_w: T.Tensor
    itm_b: T.Tensor

    @staticmethod
    def create(store: T.ParamStore, config: EncoderConfig,
               rng: np.random.Generator | None = None) -> "HeadParams":
        dt = config.np_dtype()
        d = config.dim
        def zeros(name, shape):
            return store.add(f"head.{name}", T.Tensor(np.zeros(shape), dtype=dt))
        if rng is None:
            itm_w = zeros("itm_w", (d, 1))
        else:
            itm_w = store.add("head.itm_w", T.Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)), dtype=dt))
        return HeadParams(
            mlm_w=zeros("mlm_w", (d, config.vocab)), mlm_b=zeros("mlm_b", config.vocab),
            mrc_w=zeros("mrc_w", (d, config.n_classes)), mrc_b=zeros("mrc_b", config.n_classes),
            itm_w=itm_w, itm_b=zeros("itm_b", 1),
        )


def mask_text_tokens(batch: MultimodalBatch, rate: float = 0.15,
                     rng: np.random.Generator | None = None, *,
                     vocab: int, force_min: bool = True) -> MaskingOutcome:
    """BERT-style corruption of ordinary text tokens.

    Special markers and padding are never maskable. Each maskable token is
    selected independently at ``rate``; a selected token becomes the mask
    id 80% of the time, a random vocabulary word 10%, and stays unchanged
    10%. With ``force_min`` a sample that drew no selection gets one
    maskable position chosen for it.
    """
    rng = rng or np.random.default_rng()
    tokens = batch.text_tokens
    b, n = tokens.shape
    maskable = (~batch.pad_txt) & (tokens >= NUM_SPECIAL_TOKENS)
    u_sel = rng.random((b, n))
    u_kind = rng.random((b, n))
    repl = rng.integers(NUM_SPECIAL_TOKENS, vocab, size=(b, n))
    forced_pick = rng.random(b)

    selected = maskable & (u_sel < rate)
    if force_min:
        for s in range(b):
            if not selected[s].any() and maskable[s].any():
                options = np.flatnonzero(maskable[s])
                selected[s, options[int(forced_pick[s] * len(options))]] = True

    corrupted = batch.copy()
    new_tokens = corrupted.text_tokens
    mask_as_mask = selected & (u_kind < 0.8)
    mask_as_random = selected & (u_kind >= 0.8) & (u_kind < 0.9)
    new_tokens[mask_as_mask] = MASK_ID
    new_tokens[mask_as_random] = repl[mask_as_random]
    return MaskingOutcome(
        corrupted=corrupted,
        text_mask=selected,
        text_targets=tokens[selected].copy(),
    )


def mask_regions(batch: MultimodalBatch, rate: float = 0.15,
                 rng: np.random.Generator | None = None) -> MaskingOutcome:
    """Zero out a random subset of region features, keeping their detector
    class distributions as prediction targets. The whole-image slot is
    never masked."""
    rng = rng or np.random.default_rng()
    b, n_i = batch.pad_img.shape
    maskable = ~batch.pad_img
    maskable[:, 0] = False
    selected = maskable & (rng.random((b, n_i)) < rate)
    corrupted = batch.copy()
    corrupted.visual_features[selected] = 0.0
    targets = None
    if selected.any():
        if batch.region_class_probs is None:
            raise ContractError("mask_regions needs region_class_probs targets")
        targets = batch.region_class_probs[selected].copy()
    return MaskingOutcome(
        corrupted=corrupted,
        region_mask=selected,
        region_targets=targets,
    )


def _masked_states(states: T.Tensor, mask: np.ndarray) -> T.Tensor:
    b, n, d = states.shape
    flat_idx = np.flatnonzero(mask.reshape(-1))
    return T.gather_rows(T.reshape(states, (b * n, d)), flat_idx)


def mlm_loss(text_states: T.Tensor, outcome: MaskingOutcome,
             head: HeadParams) -> T.Tensor:
    """Mean cross-entropy over masked text positions only."""
    if outcome.n_text_masked() == 0:
        raise ContractError("mlm_loss: no masked text positions")
    sel = _masked_states(text_states, outcome.text_mask)
    logits = T.add_bias(T.matmul(sel, head.mlm_w), head.mlm_b)
    return T.nll_from_logits(logits, outcome.text_targets)


def mrc_kl_loss(visual_states: T.Tensor, outcome: MaskingOutcome,
                head: HeadParams) -> T.Tensor:
    """Mean KL(detector distribution || predicted) over masked regions."""
    if outcome.n_regions_masked() == 0:
        raise ContractError("mrc_kl_loss: no masked regions")
    sel = _masked_states(visual_states, outcome.region_mask)
    logits = T.add_bias(T.matmul(sel, head.mrc_w), head.mrc_b)
    return T.kl_from_logits(logits, outcome.region_targets)


def itm_scores(fused: T.Tensor, head: HeadParams) -> T.Tensor:
    """Match score per fused pair vector: [M, d] -> [M]."""
    s = T.add_bias(T.matmul(fused, head.itm_w), head.itm_b)
    return T.reshape(s, (fused.shape[0],))


def itm_loss(fused: T.Tensor, labels, head: HeadParams,
             form: str = "pairwise") -> T.Tensor:
    """Match loss over candidate pairs.

    ``pairwise``: ``labels`` are binary per pair; binary cross-entropy on
    the raw scores. ``fourway``: pairs come in consecutive groups of four
    and ``labels`` holds each group's positive index; softmax
    cross-entropy across the group's scores.
    """
    labels = np.asarray(labels)
    scores = itm_scores(fused, head)
    if form == "pairwise":
        if labels.shape != (fused.shape[0],) or not np.isin(labels, (0, 1)).all():
            raise ContractError("pairwise itm needs one binary label per pair")
        return T.bce_with_logits(scores, labels)
    if form == "fourway":
        m = fused.shape[0]
        if m % 4 != 0:
            raise ContractError(f"fourway itm needs groups of 4, got {m} pairs")
        groups = m // 4
        if labels.shape != (groups,) or labels.min() < 0 or labels.max() > 3:
            raise ContractError("fourway itm needs one positive index in [0,4) per group")
        return T.nll_from_logits(T.reshape(scores, (groups, 4)), labels)
    raise ContractError(f"unknown itm form {form!r}")
