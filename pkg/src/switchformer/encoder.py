"""The switched multimodal encoder: embeddings, per-layer attention-mode
switching, cross-layer input switching, the full stack, and a matmul-level
cost model for routed forward passes.

Layer indexing: depth 0 is the embedding output; layers run 1..L. The
input switch applies from layer 2 onward and chooses, per modality,
between the representations at depths l-1 and l-2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    ALL_MODES,
    AttentionMask,
    InteractionMode,
    LayerParams,
    _merge_heads,
    _split_heads,
    build_mode_mask,
    ffn_block,
    generalized_mha,
    mask_bias,
    residual_norm,
)
from .errors import ConfigError, ContractError, NumericError
from .router import (
    RouteDecision,
    RouterParams,
    alignment_degree,
    apply_topk,
    combine_soft,
    gumbel_softmax,
    mode_distribution,
    pool_modality,
    sample_gumbel,
)

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
NUM_SPECIAL_TOKENS = 4

N_MODES = len(ALL_MODES)
N_INPUT_ROUTES = 4
WHOLE_IMAGE_BOX = (0.0, 0.0, 1.0, 1.0)


@dataclass
class EncoderConfig:
    """Architecture and routing hyperparameters."""

    n_layers: int = 4
    dim: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_img: int = 8
    n_txt: int = 16
    vocab: int = 1000
    d_visual: int = 32
    n_classes: int = 16
    topk: int = 4
    dtype: str = "f32"
    allowed_modes: tuple[int, ...] = (0, 1, 2, 3)

    def np_dtype(self):
        if self.dtype == "f32":
            return np.float32
        if self.dtype == "f64":
            return np.float64
        raise ConfigError(f"unknown dtype {self.dtype!r}")

    def validate(self) -> "EncoderConfig":
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"heads {self.n_heads} must divide dim {self.dim}")
        if not 1 <= self.topk <= N_MODES:
            raise ConfigError(f"topk {self.topk} out of range [1, {N_MODES}]")
        if self.n_img < 1 or self.n_txt < 3:
            raise ConfigError("need n_img >= 1 and n_txt >= 3 (CLS + token + SEP)")
        if not self.allowed_modes or any(m not in range(N_MODES) for m in self.allowed_modes):
            raise ConfigError(f"bad mode subset {self.allowed_modes}")
        if self.vocab <= NUM_SPECIAL_TOKENS:
            raise ConfigError("vocab too small for the reserved special tokens")
        return self


@dataclass
class MultimodalBatch:
    """Paired region and token sequences with padding masks.

    Slot 0 of the visual sequence is the whole-image marker; text starts
    with CLS and ends with SEP before padding. ``region_class_probs``
    carries detector distributions when the corpus provides them.
    """

    visual_features: np.ndarray  # [B, N_i, d_visual]
    visual_boxes: np.ndarray     # [B, N_i, 4] in [0, 1]
    text_tokens: np.ndarray      # [B, N_t] int
    text_positions: np.ndarray   # [B, N_t] int
    pad_img: np.ndarray          # [B, N_i] bool, True = padding
    pad_txt: np.ndarray          # [B, N_t] bool
    region_class_probs: np.ndarray | None = None  # [B, N_i, C]

    @property
    def batch_size(self) -> int:
        return self.text_tokens.shape[0]

    @property
    def n_img(self) -> int:
        return self.visual_features.shape[1]

    @property
    def n_txt(self) -> int:
        return self.text_tokens.shape[1]

    def img_counts(self) -> np.ndarray:
        return (~self.pad_img).sum(axis=1)

    def txt_counts(self) -> np.ndarray:
        return (~self.pad_txt).sum(axis=1)

    def validate(self) -> "MultimodalBatch":
        b, n_i = self.pad_img.shape
        n_t = self.pad_txt.shape[1]
        if n_i < 1 or n_t < 3:
            raise ContractError("need n_img >= 1 and n_txt >= 3")
        if self.pad_img[:, 0].any():
            raise ContractError("whole-image slot must never be padding")
        if (self.text_tokens[:, 0] != CLS_ID).any():
            raise ContractError("text must start with CLS")
        for s in range(b):
            real = int((~self.pad_txt[s]).sum())
            if real < 3 or self.text_tokens[s, real - 1] != SEP_ID:
                raise ContractError(f"sample {s}: text must end with SEP before padding")
        return self

    def copy(self) -> "MultimodalBatch":
        return MultimodalBatch(
            visual_features=self.visual_features.copy(),
            visual_boxes=self.visual_boxes.copy(),
            text_tokens=self.text_tokens.copy(),
            text_positions=self.text_positions.copy(),
            pad_img=self.pad_img.copy(),
            pad_txt=self.pad_txt.copy(),
            region_class_probs=None if self.region_class_probs is None
            else self.region_class_probs.copy(),
        )


@dataclass
class EmbeddingParams:
    """Lookup tables and projections that lift raw inputs to model width."""

    visual_proj: T.Tensor   # [d_visual, d]
    box_proj: T.Tensor      # [4, d]
    img_marker: T.Tensor    # [d], learned whole-image embedding
    token_table: T.Tensor   # [vocab, d]
    pos_table: T.Tensor     # [max_positions, d]
    type_img: T.Tensor      # [d]
    type_txt: T.Tensor      # [d]
    ln_gain: T.Tensor
    ln_bias: T.Tensor

    @staticmethod
    def create(store: T.ParamStore, config: EncoderConfig,
               rng: np.random.Generator, init_std: float = 0.02) -> "EmbeddingParams":
        dt = config.np_dtype()
        d = config.dim
        def w(name, shape):
            return store.add(f"embed.{name}",
                             T.Tensor(rng.normal(0.0, init_std, size=shape), dtype=dt))
        return EmbeddingParams(
            visual_proj=w("visual_proj", (config.d_visual, d)),
            box_proj=w("box_proj", (4, d)),
            img_marker=w("img_marker", (d,)),
            token_table=w("token_table", (config.vocab, d)),
            pos_table=w("pos_table", (config.n_txt, d)),
            type_img=w("type_img", (d,)),
            type_txt=w("type_txt", (d,)),
            ln_gain=store.add("embed.ln_gain", T.Tensor(np.ones(d), dtype=dt)),
            ln_bias=store.add("embed.ln_bias", T.Tensor(np.zeros(d), dtype=dt)),
        )


def embed_text(tokens, positions, params: EmbeddingParams) -> T.Tensor:
    """Token + position + text-type embedding, then layer norm."""
    tok = T.gather_rows(params.token_table, np.asarray(tokens))
    pos = T.gather_rows(params.pos_table, np.asarray(positions))
    x = T.add_bias(T.add(tok, pos), params.type_txt)
    return T.layer_norm(x, params.ln_gain, params.ln_bias)


def embed_visual(features, boxes, params: EmbeddingParams) -> T.Tensor:
    """Projected region features + projected geometry + visual type, with
    the whole-image slot's feature path replaced by the learned marker."""
    features = np.asarray(features)
    boxes = np.asarray(boxes)
    if boxes.min(initial=0.0) < 0.0 or boxes.max(initial=0.0) > 1.0:
        raise ContractError("box coordinates must lie in [0, 1]")
    dt = params.visual_proj.dtype
    n_img = features.shape[-2]
    feat_path = T.matmul(T.Tensor(features, dtype=dt), params.visual_proj)
    # slot 0 carries the learned marker instead of its projected feature
    keep = np.ones((n_img, 1), dtype=bool)
    keep[0] = False
    feat_path = T.mul_const(feat_path, keep.astype(dt))
    sel0 = np.zeros((n_img, 1))
    sel0[0] = 1.0
    marker = T.matmul(T.Tensor(sel0, dtype=dt),
                      T.reshape(params.img_marker, (1, params.img_marker.shape[0])))
    box_path = T.matmul(T.Tensor(boxes, dtype=dt), params.box_proj)
    x = T.add_bias(T.add(feat_path, box_path), params.type_img)
    x = T.add_suffix(x, marker)
    return T.layer_norm(x, params.ln_gain, params.ln_bias)


@dataclass
class EncoderParams:
    """Everything the encoder stack owns, registered in one ParamStore."""

    config: EncoderConfig
    store: T.ParamStore
    embedding: EmbeddingParams
    layers: list[LayerParams]          # index 0 -> layer 1
    sab_routers: list[RouterParams]    # index 0 -> layer 1
    sib_routers: list[RouterParams]    # index 0 -> layer 2

    @staticmethod
    def create(config: EncoderConfig, rng: np.random.Generator,
               store: T.ParamStore | None = None) -> "EncoderParams":
        config.validate()
        store = store if store is not None else T.ParamStore()
        dt = config.np_dtype()
        embedding = EmbeddingParams.create(store, config, rng)
        layers = [LayerParams.create(store, f"layer{l}", config.dim, config.n_heads,
                                     config.d_ffn, rng, dtype=dt)
                  for l in range(1, config.n_layers + 1)]
        sab_routers = [RouterParams.create(store, f"sab{l}", config.dim, N_MODES,
                                           rng, dtype=dt)
                       for l in range(1, config.n_layers + 1)]
        sib_routers = [RouterParams.create(store, f"sib{l}", config.dim, N_INPUT_ROUTES,
                                           rng, dtype=dt)
                       for l in range(2, config.n_layers + 1)]
        return EncoderParams(config=config, store=store, embedding=embedding,
                             layers=layers, sab_routers=sab_routers,
                             sib_routers=sib_routers)


class ForcedRoutes:
    """Debug overrides pinning specific blocks to fixed routes.

    Keys are (block, layer); layer None acts as a wildcard for the block.
    """

    def __init__(self, entries: dict[tuple[str, int | None], int] | None = None):
        self.entries = dict(entries or {})

    def get(self, block: str, layer: int) -> int | None:
        if (block, layer) in self.entries:
            return self.entries[(block, layer)]
        return self.entries.get((block, None))

    def __bool__(self) -> bool:
        return bool(self.entries)

    @staticmethod
    def parse(text: str) -> "ForcedRoutes":
        """Parse e.g. "SAB:*=M3,SIB:*=0,SAB:2=M0" (layers 1-based)."""
        entries: dict[tuple[str, int | None], int] = {}
        mode_names = {m.name: int(m) for m in InteractionMode}
        mode_names.update({f"M{int(m)}": int(m) for m in InteractionMode})
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                target, value = part.split("=")
                block, layer_s = target.split(":")
            except ValueError as exc:
                raise ConfigError(f"bad route override {part!r}") from exc
            block = block.strip().upper()
            if block not in ("SAB", "SIB"):
                raise ConfigError(f"unknown block {block!r} in route override")
            layer = None if layer_s.strip() == "*" else int(layer_s)
            value = value.strip()
            if block == "SAB":
                if value.upper() in mode_names:
                    idx = mode_names[value.upper()]
                else:
                    idx = int(value)
            else:
                idx = int(value)
            limit = N_MODES if block == "SAB" else N_INPUT_ROUTES
            if not 0 <= idx < limit:
                raise ConfigError(f"route index {idx} out of range for {block}")
            entries[(block, layer)] = idx
        return ForcedRoutes(entries)


def _combined_pad(pad_img: np.ndarray, pad_txt: np.ndarray) -> np.ndarray:
    return np.concatenate([pad_img, pad_txt], axis=-1)


def _mode_masks(batch_pad: np.ndarray, n_img: int, n_txt: int) -> list[np.ndarray]:
    """Per-mode boolean masks; [N, N] if the batch has uniform padding,
    else [B, N, N] with one mask per sample."""
    uniform = (batch_pad == batch_pad[0]).all()
    out = []
    for mode in ALL_MODES:
        if uniform:
            out.append(build_mode_mask(mode, n_img, n_txt, batch_pad[0]).allowed)
        else:
            out.append(np.stack([
                build_mode_mask(mode, n_img, n_txt, row).allowed
                for row in batch_pad]))
    return out


def _route_distribution(d_l: T.Tensor, router: RouterParams, tau: float,
                        mode: str, topk: int, rng: np.random.Generator | None,
                        allowed: tuple[int, ...] | None):
    """Shared Eq.-style pipeline: route probs, noised probs, mixture weights."""
    pi = mode_distribution(d_l, router, allowed=allowed)
    if mode == "train":
        noise = None
        if rng is not None:
            noise = sample_gumbel(rng, pi.shape, dtype=pi.dtype)
        p = gumbel_softmax(pi, tau, noise)
        weights = apply_topk(p, topk)
    elif mode == "infer":
        p = gumbel_softmax(pi, tau, None)
        flat = p.data.reshape(-1, p.shape[-1])
        hard = np.zeros_like(flat)
        hard[np.arange(flat.shape[0]), np.argmax(flat, axis=-1)] = 1.0
        weights = T.Tensor(hard.reshape(p.shape), dtype=p.dtype)
    else:
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    return pi, p, weights


def _forced_weights(index: int, n_routes: int, batch: int | None, dt):
    onehot = np.zeros(n_routes)
    onehot[index] = 1.0
    if batch is not None:
        onehot = np.tile(onehot, (batch, 1))
    w = T.Tensor(onehot, dtype=dt)
    return w


def _decisions(layer: int, block: str, pi: T.Tensor, p: T.Tensor, tau: float,
               mode: str) -> list[RouteDecision]:
    pis = pi.data.reshape(-1, pi.shape[-1])
    ps = p.data.reshape(-1, p.shape[-1])
    return [RouteDecision(layer=layer, block=block,
                          pi=[float(v) for v in pis[s]],
                          p=[float(v) for v in ps[s]],
                          choice=int(np.argmax(ps[s])), tau=float(tau),
                          mode=mode, sample=s)
            for s in range(ps.shape[0])]


def _mode_tail(scores: T.Tensor, v: T.Tensor, bias: np.ndarray,
               layer: LayerParams) -> T.Tensor:
    """Per-mode completion of shared-projection attention: mask, softmax,
    value weighting, head merge, output projection."""
    attn = T.softmax_lastdim(T.add_const(scores, bias))
    ctx = _merge_heads(T.matmul(attn, v))
    return T.matmul(ctx, layer.wo)


def sab_forward(x_i: T.Tensor, x_t: T.Tensor, layer: LayerParams,
                router: RouterParams, tau: float, mode: str, topk: int,
                pad_img=None, pad_txt=None, rng: np.random.Generator | None = None,
                layer_index: int = 1, allowed_modes: tuple[int, ...] = (0, 1, 2, 3),
                forced: int | None = None):
    """One switched layer: pick/mix attention modes, then add+norm and FFN.

    The query/key/value projections and raw scores are mode-independent,
    so they are computed once and shared; each activated mode evaluates
    only its own masked softmax, value mix, and output projection. The
    result is identical to running generalized_mha per mode.

    Returns (y_i, y_t, decisions) where decisions has one entry per sample.
    """
    batched = x_i.ndim == 3
    b = x_i.shape[0] if batched else None
    n_i, n_t = x_i.shape[-2], x_t.shape[-2]
    dt = x_i.dtype
    if pad_img is None:
        pad_img = np.zeros((b, n_i) if batched else (n_i,), dtype=bool)
    if pad_txt is None:
        pad_txt = np.zeros((b, n_t) if batched else (n_t,), dtype=bool)
    pad_img = np.asarray(pad_img, dtype=bool)
    pad_txt = np.asarray(pad_txt, dtype=bool)

    if forced is not None:
        weights = _forced_weights(forced, N_MODES, b, dt)
        pi = p = weights
    else:
        z_i = pool_modality(x_i, pad_img)
        z_t = pool_modality(x_t, pad_txt)
        d_l = alignment_degree(z_i, z_t)
        pi, p, weights = _route_distribution(
            d_l, router, tau, mode, topk, rng, allowed_modes)

    x = T.concat_axis([x_i, x_t], -2)
    pad = _combined_pad(np.atleast_2d(pad_img), np.atleast_2d(pad_txt))
    masks = _mode_masks(pad, n_i, n_t)

    d = layer.dim
    q = _split_heads(T.matmul(x, layer.wq), layer.n_heads)
    k = _split_heads(T.matmul(x, layer.wk), layer.n_heads)
    v = _split_heads(T.matmul(x, layer.wv), layer.n_heads)
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, axes)),
                     1.0 / math.sqrt(d // layer.n_heads))
    if np.isnan(scores.data).any():
        raise NumericError(f"NaN in attention scores at layer {layer_index}")

    def candidate(m):
        bias = mask_bias(masks[m], dtype=dt)
        if bias.ndim == 3:
            bias = bias[:, None, :, :]
        def thunk():
            return _mode_tail(scores, v, bias, layer)
        return thunk

    attn = combine_soft(weights, [candidate(m) for m in range(N_MODES)])
    normed = residual_norm(attn, x, layer.ln1_gain, layer.ln1_bias)
    y = ffn_block(normed, layer)
    y_i = T.slice_axis(y, -2, 0, n_i)
    y_t = T.slice_axis(y, -2, n_i, n_i + n_t)
    return y_i, y_t, _decisions(layer_index, "SAB", pi, p, tau, mode)


@dataclass
class EncoderState:
    """Per-depth modality representations; index 0 is the embedding output."""

    img: list[T.Tensor] = field(default_factory=list)
    txt: list[T.Tensor] = field(default_factory=list)


def sib_candidates(state: EncoderState, l: int):
    """The four (visual depth, text depth) input pairs for layer l >= 2,
    ordered [(l-1, l-1), (l-1, l-2), (l-2, l-1), (l-2, l-2)]."""
    if l < 2:
        raise ContractError(f"input switching starts at layer 2, got {l}")
    if len(state.img) <= l - 1 or len(state.txt) <= l - 1:
        raise ContractError(f"state holds {len(state.img)} depths; layer {l} needs {l}")
    return [
        (state.img[l - 1], state.txt[l - 1]),
        (state.img[l - 1], state.txt[l - 2]),
        (state.img[l - 2], state.txt[l - 1]),
        (state.img[l - 2], state.txt[l - 2]),
    ]


def sib_forward(state: EncoderState, l: int, router: RouterParams, tau: float,
                mode: str, topk: int, pad_img=None, pad_txt=None,
                rng: np.random.Generator | None = None,
                forced: int | None = None):
    """Choose/mix each modality's layer input from depths l-1 and l-2."""
    cands = sib_candidates(state, l)
    x_prev_i, x_prev_t = cands[0]
    batched = x_prev_i.ndim == 3
    b = x_prev_i.shape[0] if batched else None
    dt = x_prev_i.dtype

    if forced is not None:
        weights = _forced_weights(forced, N_INPUT_ROUTES, b, dt)
        pi = p = weights
    else:
        z_i = pool_modality(x_prev_i, None if pad_img is None else np.asarray(pad_img, bool))
        z_t = pool_modality(x_prev_t, None if pad_txt is None else np.asarray(pad_txt, bool))
        d_l = alignment_degree(z_i, z_t)
        pi, p, weights = _route_distribution(d_l, router, tau, mode, topk, rng, None)

    x_i_in = combine_soft(weights, [c[0] for c in cands])
    x_t_in = combine_soft(weights, [c[1] for c in cands])
    return x_i_in, x_t_in, _decisions(l, "SIB", pi, p, tau, mode)


@dataclass
class EncoderOutput:
    x_i: T.Tensor          # final visual states, padded rows zero-filled
    x_t: T.Tensor          # final text states, padded rows zero-filled
    z_img: T.Tensor        # whole-image marker vector per sample
    z_cls: T.Tensor        # CLS vector per sample
    fused: T.Tensor        # elementwise product of the two marker vectors
    decisions: list[RouteDecision]
    state: EncoderState


def encoder_forward(batch: MultimodalBatch, params: EncoderParams, tau: float,
                    mode: str = "train", topk: int | None = None,
                    rng: np.random.Generator | None = None,
                    force: ForcedRoutes | None = None) -> EncoderOutput:
    """Embed both modalities and run the switched stack.

    Emits 2L-1 routing decisions per sample: one attention switch per
    layer plus one input switch between each consecutive pair.
    """
    config = params.config
    force = force or ForcedRoutes()
    topk = config.topk if topk is None else topk
    if not 1 <= topk <= N_MODES:
        raise ContractError(f"topk {topk} out of range")

    x_t0 = embed_text(batch.text_tokens, batch.text_positions, params.embedding)
    x_i0 = embed_visual(batch.visual_features, batch.visual_boxes, params.embedding)
    state = EncoderState(img=[x_i0], txt=[x_t0])
    decisions: list[RouteDecision] = []

    kw = dict(tau=tau, mode=mode, topk=topk, pad_img=batch.pad_img,
              pad_txt=batch.pad_txt, rng=rng)
    for l in range(1, config.n_layers + 1):
        if l >= 2:
            x_i_in, x_t_in, ds = sib_forward(
                state, l, params.sib_routers[l - 2],
                forced=force.get("SIB", l), **kw)
            decisions.extend(ds)
        else:
            x_i_in, x_t_in = state.img[0], state.txt[0]
        y_i, y_t, ds = sab_forward(
            x_i_in, x_t_in, params.layers[l - 1], params.sab_routers[l - 1],
            layer_index=l, allowed_modes=config.allowed_modes,
            forced=force.get("SAB", l), **kw)
        decisions.extend(ds)
        state.img.append(y_i)
        state.txt.append(y_t)

    x_i, x_t = state.img[-1], state.txt[-1]
    keep_i = (~batch.pad_img).astype(x_i.dtype)[..., None]
    keep_t = (~batch.pad_txt).astype(x_t.dtype)[..., None]
    x_i = T.mul_const(x_i, keep_i)
    x_t = T.mul_const(x_t, keep_t)
    d = config.dim
    b = batch.batch_size
    z_img = T.reshape(T.slice_axis(x_i, -2, 0, 1), (b, d))
    z_cls = T.reshape(T.slice_axis(x_t, -2, 0, 1), (b, d))
    fused = T.mul(z_img, z_cls)
    return EncoderOutput(x_i=x_i, x_t=x_t, z_img=z_img, z_cls=z_cls,
                         fused=fused, decisions=decisions, state=state)


# ---------------------------------------------------------------------------
# matmul cost model


def matmul_flops(m: int, k: int, n: int) -> int:
    """2*m*k*n multiply-adds for an [m,k] x [k,n] product."""
    return 2 * m * k * n


def _mode_pair_count(mode: int, n_img: int, n_txt: int) -> int:
    n = n_img + n_txt
    if mode == InteractionMode.SELF_SELF:
        return n_img * n_img + n_txt * n_txt
    if mode == InteractionMode.SELF_CROSS:
        return n * n_img
    if mode == InteractionMode.CROSS_SELF:
        return n * n_txt
    return n * n


def _mode_attention_flops(mode: int, config: EncoderConfig) -> int:
    n = config.n_img + config.n_txt
    d = config.dim
    proj = 4 * matmul_flops(n, d, d)  # q, k, v, output
    pairs = _mode_pair_count(mode, config.n_img, config.n_txt)
    return proj + 2 * 2 * pairs * d  # score products + value weighting


def _router_flops(config: EncoderConfig, n_routes: int) -> int:
    d = config.dim
    return matmul_flops(1, d, d) + matmul_flops(1, d, n_routes)


def _ffn_flops(config: EncoderConfig) -> int:
    n = config.n_img + config.n_txt
    return matmul_flops(n, config.dim, config.d_ffn) + \
        matmul_flops(n, config.d_ffn, config.dim)


def count_flops(config: EncoderConfig, route=None, phase: str = "train") -> int:
    """Matmul operation count for routed forward passes.

    ``route`` is either an int top-K (a-priori per-sample estimate that
    charges the K most expensive modes per layer, each as its own
    attention path) or an iterable of trace records, in which case the
    actually-activated paths of every recorded decision are summed.
    ``phase`` tells the trace branch whether records came from soft
    training (top-K paths active) or hard inference (one path active);
    the wire format itself does not carry this.

    Counts attention projections, score/value products, the feed-forward
    block, and both routers; everything that is not a matmul is ignored.
    """
    if route is None:
        route = config.topk
    if isinstance(route, (int, np.integer)):
        k = int(route)
        if not 1 <= k <= N_MODES:
            raise ContractError(f"topk {k} out of range")
        by_cost = sorted(range(N_MODES),
                         key=lambda m: (-_mode_attention_flops(m, config), m))
        active = by_cost[:k]
        total = 0
        for l in range(1, config.n_layers + 1):
            total += _router_flops(config, N_MODES)
            if l >= 2:
                total += _router_flops(config, N_INPUT_ROUTES)
            total += sum(_mode_attention_flops(m, config) for m in active)
            total += _ffn_flops(config)
        return total

    total = 0
    for rec in route:
        is_dict = isinstance(rec, dict)
        block = rec["block"] if is_dict else rec.block
        p = np.asarray(rec["p"] if is_dict else rec.p)
        rec_phase = phase if is_dict else rec.mode
        if block == "SIB":
            total += _router_flops(config, N_INPUT_ROUTES)
            continue
        total += _router_flops(config, N_MODES)
        if rec_phase == "train":
            order = np.argsort(-p, kind="stable")
            active = [int(i) for i in order[:min(config.topk, N_MODES)]]
        else:
            active = [int(np.argmax(p))]
        total += sum(_mode_attention_flops(m, config) for m in active)
        total += _ffn_flops(config)
    return total
