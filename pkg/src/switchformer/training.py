"""Training and evaluation loops, checkpoint persistence, temperature
annealing, route tracing, and learned-architecture extraction.

Reproducibility contract: everything a run does is a function of its
TrainConfig. Per-step randomness comes from generators seeded by
(seed, purpose-tag, step), so a reloaded run replays identically and
corpus generation order never matters.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    Corpus,
    CorpusConfig,
    gen_corpus,
    gen_fourway_batch,
    groups_to_batch,
    load_corpus,
    samples_to_batch,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    ForcedRoutes,
    count_flops,
    encoder_forward,
)
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    CheckpointLoadError,
    ConfigError,
    ContractError,
    NumericError,
)
from .objectives import (
    HeadParams,
    itm_loss,
    itm_scores,
    mask_regions,
    mask_text_tokens,
    mlm_loss,
    mrc_kl_loss,
)

_TAG_INIT = 101
_TAG_STEP = 202
_TAG_EVAL = 303


@dataclass
class TrainConfig:
    task: str = "pretrain"          # "pretrain" | "fourway"
    steps: int = 200
    batch_size: int = 8             # samples per step; groups per step for fourway
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    tau0: float = 5.0
    tau_min: float = 0.5
    decay: float = 0.999
    topk: int = 4
    seed: int = 0
    dtype: str = "f32"
    # model geometry
    n_layers: int = 4
    dim: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_img: int = 8
    n_txt: int = 16
    vocab: int = 1000
    d_visual: int = 32
    n_classes: int = 16
    allowed_modes: tuple[int, ...] = (0, 1, 2, 3)
    force_route: str | None = None
    # data
    corpus_path: str | None = None
    corpus_size: int = 4000
    corpus_seed: int = 1
    eval_size: int = 2000
    k_min: int = 1
    k_max: int = 4
    n_attrs: int = 8
    n_buckets: int = 4
    mask_rate: float = 0.15
    # io
    ckpt_path: str | None = None
    trace_path: str | None = None
    init_from: str | None = None
    log_every: int = 50

    def validate(self) -> "TrainConfig":
        if self.task not in ("pretrain", "fourway"):
            raise ConfigError(f"unknown task {self.task!r}")
        if not (self.tau0 >= self.tau_min > 0):
            raise ConfigError("need tau0 >= tau_min > 0")
        if not 1 <= self.topk <= 4:
            raise ConfigError("topk must be in [1, 4]")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("bad steps/batch size")
        self.encoder_config()
        self.corpus_config()
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.n_layers, dim=self.dim, n_heads=self.n_heads,
            d_ffn=self.d_ffn, n_img=self.n_img, n_txt=self.n_txt,
            vocab=self.vocab, d_visual=self.d_visual, n_classes=self.n_classes,
            topk=self.topk, dtype=self.dtype,
            allowed_modes=tuple(self.allowed_modes)).validate()

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_classes=self.n_classes, n_attrs=self.n_attrs,
            n_buckets=self.n_buckets, k_min=self.k_min, k_max=self.k_max,
            d_visual=self.d_visual, n_img=self.n_img, n_txt=self.n_txt,
            vocab=self.vocab).validate()

    def forced_routes(self) -> ForcedRoutes:
        return ForcedRoutes.parse(self.force_route) if self.force_route else ForcedRoutes()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig(**d)
        cfg.allowed_modes = tuple(cfg.allowed_modes)
        return cfg.validate()


def temperature_schedule(step: int, config: TrainConfig) -> float:
    """Exponential annealing with a floor: tau0 * decay^step, never below
    tau_min."""
    if step < 0:
        raise ContractError("step must be >= 0")
    return max(config.tau_min, config.tau0 * config.decay ** step)


class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, store: T.ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 1.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the pre-clip
        global gradient norm."""
        sq = 0.0
        for _, tensor in self.store.items():
            if tensor.grad is not None:
                sq += float((tensor.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.store.items():
            g = tensor.grad
            if g is None:
                continue
            g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))
            tensor.data -= update.astype(tensor.data.dtype)
        return norm


@dataclass
class TrainState:
    config: TrainConfig
    params: EncoderParams
    heads: HeadParams
    opt: Adam
    step: int = 0


def build_model(config: TrainConfig) -> TrainState:
    enc_cfg = config.encoder_config()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_INIT]))
    params = EncoderParams.create(enc_cfg, rng)
    heads = HeadParams.create(params.store, enc_cfg, rng)
    opt = Adam(params.store, config.lr, config.beta1, config.beta2,
               config.adam_eps, config.clip_norm)
    return TrainState(config=config, params=params, heads=heads, opt=opt)


def obtain_corpus(config: TrainConfig, log=None) -> Corpus:
    """Load the corpus if the path exists; otherwise generate (and persist
    when a path was requested)."""
    from .data import save_corpus
    if config.corpus_path and Path(config.corpus_path).exists():
        return load_corpus(config.corpus_path)
    corpus = gen_corpus(config.corpus_size, config.corpus_config(),
                        seed=config.corpus_seed)
    if config.corpus_path:
        save_corpus(corpus, config.corpus_path)
        if log:
            log(f"wrote corpus ({len(corpus)} samples) to {config.corpus_path}")
    return corpus


def eval_corpus_for(config: TrainConfig) -> Corpus:
    """Held-out samples: same generator family, disjoint seed."""
    return gen_corpus(config.eval_size, config.corpus_config(),
                      seed=config.corpus_seed + 1)


def _step_rng(config: TrainConfig, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_STEP, step]))


def _write_trace(fh, decisions, step: int, sample_offset: int = 0) -> int:
    n = 0
    for d in decisions:
        rec = d.to_record(step)
        rec["sample"] += sample_offset
        fh.write(json.dumps(rec) + "\n")
        n += 1
    return n


def _pretrain_losses(state: TrainState, batch, rng, tau: float, mode: str,
                     force: ForcedRoutes, noise_rng=None):
    """Corrupt, encode, and score all three objectives on one batch.

    Returns (total, parts dict, decisions). The matching term scores the
    corrupted positives against caption-rolled negatives so both sides of
    the binary task see the same corruption statistics.
    """
    config = state.config
    t_out = mask_text_tokens(batch, config.mask_rate, rng, vocab=config.vocab)
    r_out = mask_regions(t_out.corrupted, config.mask_rate, rng)
    corrupted = r_out.corrupted
    enc = encoder_forward(corrupted, state.params, tau, mode, config.topk,
                          rng=noise_rng, force=force)
    parts = {}
    total = mlm_loss(enc.x_t, t_out, state.heads)
    parts["mlm"] = total.item()
    if r_out.n_regions_masked() > 0:
        mrc = mrc_kl_loss(enc.x_i, r_out, state.heads)
        parts["mrc_kl"] = mrc.item()
        total = T.add(total, mrc)
    else:
        parts["mrc_kl"] = 0.0

    b = corrupted.batch_size
    neg = corrupted.copy()
    neg.text_tokens = np.roll(neg.text_tokens, 1, axis=0)
    neg.pad_txt = np.roll(neg.pad_txt, 1, axis=0)
    enc_neg = encoder_forward(neg, state.params, tau, mode, config.topk,
                              rng=noise_rng, force=force)
    fused = T.concat_axis([enc.fused, enc_neg.fused], 0)
    labels = np.concatenate([np.ones(b), np.zeros(b)])
    itm = itm_loss(fused, labels, state.heads, form="pairwise")
    parts["itm"] = itm.item()
    total = T.add(total, itm)
    parts["total"] = total.item()
    return total, parts, enc.decisions


def _fourway_loss(state: TrainState, groups, tau: float, mode: str,
                  force: ForcedRoutes, noise_rng=None):
    batch, labels = groups_to_batch(groups)
    enc = encoder_forward(batch, state.params, tau, mode, state.config.topk,
                          rng=noise_rng, force=force)
    loss = itm_loss(enc.fused, labels, state.heads, form="fourway")
    scores = itm_scores(enc.fused, state.heads).data.reshape(-1, 4)
    acc = float((scores.argmax(axis=1) == labels).mean())
    return loss, {"fourway_ce": loss.item(), "batch_acc": acc, "total": loss.item()}, \
        enc.decisions


def train(config: TrainConfig, log=None) -> dict:
    """Run the configured task; returns a metrics summary dict.

    Aborts on a non-finite loss, retaining the last periodic checkpoint.
    """
    config.validate()
    log = log or (lambda msg: print(msg, file=sys.stderr))
    state = build_model(config)
    if config.init_from:
        restore_parameters(state, load_checkpoint(config.init_from))
    corpus = obtain_corpus(config, log)
    force = config.forced_routes()
    trace_fh = open(config.trace_path, "w", encoding="utf-8") if config.trace_path else None
    history = []
    route_counts = np.zeros(4, dtype=np.int64)
    started = time.time()
    try:
        for step in range(config.steps):
            tau = temperature_schedule(step, config)
            rng = _step_rng(config, step)
            if config.task == "pretrain":
                idx = rng.choice(len(corpus), size=min(config.batch_size, len(corpus)),
                                 replace=False)
                batch = samples_to_batch([corpus[int(i)] for i in idx])
                loss, parts, decisions = _pretrain_losses(
                    state, batch, rng, tau, "train", force, noise_rng=rng)
            else:
                groups = gen_fourway_batch(corpus, rng, n_groups=config.batch_size)
                loss, parts, decisions = _fourway_loss(
                    state, groups, tau, "train", force, noise_rng=rng)
            if not math.isfinite(parts["total"]):
                raise NumericError(
                    f"non-finite loss at step {step}; last-good checkpoint retained")
            state.params.store.zero_grad()
            T.backward(loss)
            grad_norm = state.opt.step()
            state.step = step + 1
            history.append(parts["total"])
            for d in decisions:
                if d.block == "SAB":
                    route_counts[d.choice] += 1
            if trace_fh:
                _write_trace(trace_fh, decisions, step)
            if config.log_every and (step % config.log_every == 0 or
                                     step == config.steps - 1):
                hist = (route_counts / max(1, route_counts.sum())).round(3).tolist()
                log(f"step {step} loss {parts['total']:.4f} tau {tau:.3f} "
                    f"grad_norm {grad_norm:.3f} route_hist {hist} "
                    f"parts {({k: round(v, 4) for k, v in parts.items()})}")
                if config.ckpt_path:
                    save_checkpoint(state, config.ckpt_path)
    finally:
        if trace_fh:
            trace_fh.close()
    if config.ckpt_path:
        save_checkpoint(state, config.ckpt_path)
    summary = {
        "task": config.task,
        "steps": config.steps,
        "final_loss": history[-1] if history else None,
        "first_loss": history[0] if history else None,
        "route_histogram": (route_counts / max(1, route_counts.sum())).tolist(),
        "seconds": round(time.time() - started, 2),
        "ckpt": config.ckpt_path,
        "trace": config.trace_path,
    }
    if config.task == "pretrain" and history:
        summary["final_parts"] = parts
    return summary


def evaluate(ckpt, task: str | None = None, corpus: Corpus | None = None,
             n_groups: int = 2000, batch_groups: int = 64, seed: int = 0,
             trace_path: str | None = None, soft_tau: float | None = None,
             log=None) -> dict:
    """Deterministic evaluation: zero routing noise, hard selection
    (or a soft mixture at ``soft_tau`` when given).

    ``ckpt`` may be a Checkpoint, a path, or a live TrainState.
    """
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    if isinstance(ckpt, Checkpoint):
        state = build_model(ckpt.config)
        restore_parameters(state, ckpt)
    else:
        state = ckpt
    config = state.config
    task = task or config.task
    force = config.forced_routes()
    corpus = corpus or eval_corpus_for(config)
    mode = "train" if soft_tau is not None else "infer"
    tau = soft_tau if soft_tau is not None else config.tau_min
    trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        if task == "fourway":
            rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_EVAL]))
            groups = gen_fourway_batch(corpus, rng, n_groups=n_groups)
            correct = 0
            offset = 0
            for i in range(0, len(groups), batch_groups):
                chunk = groups[i:i + batch_groups]
                batch, labels = groups_to_batch(chunk)
                enc = encoder_forward(batch, state.params, tau, mode,
                                      config.topk, rng=None, force=force)
                scores = itm_scores(enc.fused, state.heads).data.reshape(-1, 4)
                correct += int((scores.argmax(axis=1) == labels).sum())
                if trace_fh:
                    _write_trace(trace_fh, enc.decisions, 0, sample_offset=offset)
                offset += len(chunk) * 4
            return {"task": "fourway", "groups": len(groups),
                    "accuracy": correct / len(groups)}

        if task == "pretrain":
            rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_EVAL]))
            metrics = {"mlm": 0.0, "mrc_kl": 0.0, "itm": 0.0}
            batches = 0
            offset = 0
            size = min(batch_groups, len(corpus))
            for i in range(0, min(len(corpus), 512), size):
                samples = [corpus[j] for j in range(i, min(i + size, len(corpus)))]
                if len(samples) < 2:
                    break
                batch = samples_to_batch(samples)
                _, parts, decisions = _pretrain_losses(
                    state, batch, rng, tau, mode, force, noise_rng=None)
                for k in metrics:
                    metrics[k] += parts[k]
                batches += 1
                if trace_fh:
                    _write_trace(trace_fh, decisions, 0, sample_offset=offset)
                offset += len(samples)
            out = {f"{k}_loss": v / max(1, batches) for k, v in metrics.items()}
            out["mlm_perplexity"] = math.exp(out["mlm_loss"])
            out["task"] = "pretrain"
            return out
    finally:
        if trace_fh:
            trace_fh.close()
    raise ConfigError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# learned-architecture extraction


def extract_architecture(trace_path) -> dict:
    """Rank complete per-sample route paths by occurrence frequency.

    A path is the tuple of hard choices across all blocks, keyed by
    (step, sample). Samples with missing decisions are skipped and
    counted. Frequencies are percentages and sum to 100 +- 0.1.
    """
    by_sample: dict[tuple, list] = {}
    with open(trace_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            by_sample.setdefault((rec["step"], rec["sample"]), []).append(rec)
    if not by_sample:
        raise ContractError(f"{trace_path}: no trace records")
    n_layers = max(r["layer"] for recs in by_sample.values() for r in recs)
    expected = 2 * n_layers - 1
    counts: dict[str, int] = {}
    skipped = 0
    for _, recs in sorted(by_sample.items()):
        if len(recs) != expected:
            skipped += 1
            continue
        recs.sort(key=lambda r: (r["layer"], 0 if r["block"] == "SIB" else 1))
        path = "|".join(f"{r['block']}{r['layer']}={r['choice']}" for r in recs)
        counts[path] = counts.get(path, 0) + 1
    if not counts:
        raise ContractError("no complete route paths in trace")
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {
        "paths": [{"path": p, "count": c, "percent": 100.0 * c / total}
                  for p, c in ranked],
        "complete_samples": total,
        "skipped_incomplete": skipped,
    }


# ---------------------------------------------------------------------------
# checkpoint format


CKPT_MAGIC = b"SWBT"
CKPT_VERSION = 1
_DTYPE_TO_CODE = {"float32": 0, "float64": 1, "bytes": 2}
_CODE_TO_DTYPE = {0: np.float32, 1: np.float64}


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    step: int
    rng_state: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0


def _write_entry(fh, name: str, payload: bytes, code: int, dims: tuple[int, ...]):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", code, len(dims)))
    for d in dims:
        fh.write(struct.pack("<Q", d))
    fh.write(payload)


def save_checkpoint(state: TrainState, path) -> None:
    """Binary layout: magic, u32 version, u32 entry count, then per entry
    u16 name length + name, u8 dtype code, u8 rank, little-endian u64
    dims, raw little-endian payload."""
    entries: list[tuple[str, bytes, int, tuple[int, ...]]] = []
    for name, tensor in state.params.store.items():
        arr = tensor.data
        code = _DTYPE_TO_CODE[arr.dtype.name]
        entries.append((name, arr.astype(arr.dtype.newbyteorder("<")).tobytes(),
                        code, arr.shape))
    for prefix, table in (("opt.m:", state.opt.m), ("opt.v:", state.opt.v)):
        for name, arr in table.items():
            code = _DTYPE_TO_CODE[arr.dtype.name]
            entries.append((prefix + name,
                            arr.astype(arr.dtype.newbyteorder("<")).tobytes(),
                            code, arr.shape))
    meta = {
        "config": dataclasses.asdict(state.config),
        "step": state.step,
        "opt_t": state.opt.t,
        "rng_state": {"seed": state.config.seed, "step": state.step},
    }
    blob = json.dumps(meta).encode("utf-8")
    entries.append(("__meta__", blob, _DTYPE_TO_CODE["bytes"], (len(blob),)))

    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, payload, code, dims in entries:
            _write_entry(fh, name, payload, code, dims)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointCorruptionError("checkpoint file is truncated")
    return data


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        count = struct.unpack("<I", _read_exact(fh, 4))[0]
        raw: dict[str, tuple[int, tuple[int, ...], bytes]] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            dims = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0]
                         for _ in range(rank))
            if code == _DTYPE_TO_CODE["bytes"]:
                payload = _read_exact(fh, dims[0] if dims else 0)
            else:
                if code not in _CODE_TO_DTYPE:
                    raise CheckpointFormatError(f"{path}: unknown dtype code {code}")
                itemsize = np.dtype(_CODE_TO_DTYPE[code]).itemsize
                payload = _read_exact(fh, itemsize * int(np.prod(dims, dtype=np.int64)))
            raw[name] = (code, dims, payload)
        if fh.read(1):
            raise CheckpointCorruptionError(f"{path}: trailing bytes after entries")

    if "__meta__" not in raw:
        raise CheckpointCorruptionError(f"{path}: missing metadata entry")
    meta = json.loads(raw.pop("__meta__")[2].decode("utf-8"))
    config = TrainConfig.from_dict(meta["config"])
    ckpt = Checkpoint(version=CKPT_VERSION, config=config, step=meta["step"],
                      rng_state=meta.get("rng_state", {}), opt_t=meta.get("opt_t", 0))
    for name, (code, dims, payload) in raw.items():
        arr = np.frombuffer(payload, dtype=np.dtype(_CODE_TO_DTYPE[code]).newbyteorder("<"))
        arr = arr.reshape(dims).astype(_CODE_TO_DTYPE[code])
        if name.startswith("opt.m:"):
            ckpt.opt_m[name[6:]] = arr
        elif name.startswith("opt.v:"):
            ckpt.opt_v[name[6:]] = arr
        else:
            ckpt.arrays[name] = arr
    return ckpt


def restore_parameters(state: TrainState, ckpt: Checkpoint,
                       with_optimizer: bool = True) -> TrainState:
    """Copy checkpoint arrays into a built model, dims checked."""
    store = state.params.store
    for name, tensor in store.items():
        if name not in ckpt.arrays:
            raise CheckpointLoadError(f"checkpoint missing parameter {name!r}")
        arr = ckpt.arrays[name]
        if arr.shape != tensor.shape or arr.dtype != tensor.data.dtype:
            raise CheckpointLoadError(
                f"parameter {name!r}: checkpoint {arr.shape}/{arr.dtype} vs "
                f"model {tensor.shape}/{tensor.data.dtype}")
        tensor.data[...] = arr
    extra = set(ckpt.arrays) - set(store.names())
    if extra:
        raise CheckpointLoadError(f"checkpoint has unknown parameters {sorted(extra)}")
    if with_optimizer and ckpt.opt_m:
        for name in store.names():
            if name in ckpt.opt_m:
                state.opt.m[name][...] = ckpt.opt_m[name]
                state.opt.v[name][...] = ckpt.opt_v[name]
        state.opt.t = ckpt.opt_t
    state.step = ckpt.step
    return state


def flops_report(config: TrainConfig) -> dict:
    enc = config.encoder_config()
    return {"per_sample_forward": {str(k): count_flops(enc, k) for k in (1, 2, 4)},
            "topk": config.topk,
            "configured": count_flops(enc, config.topk)}
