"""Deterministic synthetic paired-modality corpus.

Each scene is a handful of object slots; a slot binds a class, a
categorical attribute, and a coarse position bucket. Region features are
class prototype + attribute component (+ clamped noise); captions
verbalize the slots in left-to-right bucket order as
``class-word attr-word pos-word`` triples.

Matching ground truth is designed so that cross-modal interaction is
load-bearing: a hard negative image keeps the positive's class set,
attribute multiset, and bucket set but permutes the binding between
them, so bag-of-symbols codes computed inside a single modality cannot
tell it from the positive.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import CLS_ID, NUM_SPECIAL_TOKENS, PAD_ID, SEP_ID, MultimodalBatch, WHOLE_IMAGE_BOX
from .errors import ConfigError, ContractError

CORPUS_FORMAT_VERSION = 1


@dataclass
class CorpusConfig:
    n_classes: int = 16
    n_attrs: int = 8
    n_buckets: int = 4
    k_min: int = 1
    k_max: int = 4
    d_visual: int = 32
    n_img: int = 8
    n_txt: int = 16
    vocab: int = 1000
    feature_noise: float = 0.1
    attr_sigma: float = 0.35
    noise_norm_clamp: float = 2.0
    detector_scale: float = 10.0
    min_proto_dist_sq: float = 40.0

    def validate(self) -> "CorpusConfig":
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ConfigError(f"bad slot range [{self.k_min}, {self.k_max}]")
        if self.k_max > self.n_buckets:
            raise ConfigError("more slots than position buckets")
        if self.k_max > self.n_classes:
            raise ConfigError("more slots than classes")
        if self.n_img < 1 + self.k_max:
            raise ConfigError("n_img must hold the marker slot plus k_max regions")
        if self.n_txt < 2 + 3 * self.k_max:
            raise ConfigError("n_txt too short for the caption template")
        if self.vocab < NUM_SPECIAL_TOKENS + self.n_classes + self.n_attrs + self.n_buckets:
            raise ConfigError("vocab too small for the caption template words")
        return self

    # token layout: [specials][class words][attr words][position words]
    def class_word(self, c: int) -> int:
        return NUM_SPECIAL_TOKENS + c

    def attr_word(self, a: int) -> int:
        return NUM_SPECIAL_TOKENS + self.n_classes + a

    def pos_word(self, b: int) -> int:
        return NUM_SPECIAL_TOKENS + self.n_classes + self.n_attrs + b


@dataclass
class SceneSlot:
    class_id: int
    attr_id: int
    bucket: int
    box: np.ndarray       # [4] in [0, 1], x1 < x2, y1 < y2
    attr_vec: np.ndarray  # continuous attribute component added to the prototype


@dataclass
class LatentScene:
    slots: list[SceneSlot]

    def class_ids(self) -> list[int]:
        return [s.class_id for s in self.slots]

    def binding(self) -> tuple:
        return tuple(sorted((s.class_id, s.attr_id, s.bucket) for s in self.slots))


@dataclass
class PairedSample:
    index: int
    scene: LatentScene
    visual_features: np.ndarray  # [n_img, d_visual]; slot 0 is the marker slot
    visual_boxes: np.ndarray     # [n_img, 4]
    class_probs: np.ndarray      # [n_img, n_classes]
    tokens: np.ndarray           # [n_txt]
    pad_img: np.ndarray          # [n_img] bool
    pad_txt: np.ndarray          # [n_txt] bool


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    class_prototypes: np.ndarray  # [C, d_visual]
    attr_prototypes: np.ndarray   # [A, d_visual]
    samples: list[PairedSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PairedSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def make_prototypes(config: CorpusConfig, seed: int):
    """Class codebook (rejection-sampled to keep classes well separated)
    plus a smaller attribute codebook."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    for _ in range(200):
        protos = rng.normal(size=(config.n_classes, config.d_visual))
        diff = protos[:, None, :] - protos[None, :, :]
        d2 = (diff ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        if d2.min() >= config.min_proto_dist_sq:
            break
    else:
        raise ConfigError("could not separate class prototypes; lower min_proto_dist_sq")
    attr = rng.normal(0.0, config.attr_sigma, size=(config.n_attrs, config.d_visual))
    return protos.astype(np.float32), attr.astype(np.float32)


def _slot_box(bucket: int, n_buckets: int, rng: np.random.Generator) -> np.ndarray:
    """A box whose x-extent stays inside its bucket strip."""
    width = 1.0 / n_buckets
    x1 = bucket * width + rng.uniform(0.02, 0.3) * width
    x2 = min((bucket + 1) * width - 0.02 * width,
             x1 + rng.uniform(0.3, 0.6) * width)
    y1 = rng.uniform(0.05, 0.5)
    y2 = y1 + rng.uniform(0.2, 0.45)
    return np.array([x1, y1, x2, min(y2, 0.98)], dtype=np.float32)


def _attr_component(attr_id: int, corpus_attr_protos: np.ndarray,
                    config: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, config.feature_noise, size=config.d_visual)
    norm = float(np.linalg.norm(noise))
    if norm > config.noise_norm_clamp:
        noise *= config.noise_norm_clamp / norm
    return (corpus_attr_protos[attr_id] + noise).astype(np.float32)


def gen_scene(config: CorpusConfig, attr_protos: np.ndarray,
              rng: np.random.Generator) -> LatentScene:
    k = int(rng.integers(config.k_min, config.k_max + 1))
    classes = rng.choice(config.n_classes, size=k, replace=False)
    buckets = np.sort(rng.choice(config.n_buckets, size=k, replace=False))
    attrs = rng.integers(0, config.n_attrs, size=k)
    slots = [SceneSlot(class_id=int(c), attr_id=int(a), bucket=int(b),
                       box=_slot_box(int(b), config.n_buckets, rng),
                       attr_vec=_attr_component(int(a), attr_protos, config, rng))
             for c, a, b in zip(classes, attrs, buckets)]
    return LatentScene(slots=slots)


def slot_feature(slot: SceneSlot, class_prototypes: np.ndarray) -> np.ndarray:
    return (class_prototypes[slot.class_id] + slot.attr_vec).astype(np.float32)


def detector_distribution(slot: SceneSlot, class_prototypes: np.ndarray,
                          scale: float = 10.0) -> np.ndarray:
    """Synthetic detector posterior: softmax of scaled negative squared
    distances from the slot's feature to every class prototype."""
    f = slot_feature(slot, class_prototypes)
    d2 = ((class_prototypes - f[None, :]) ** 2).sum(axis=1).astype(np.float64)
    logits = -scale * d2
    logits -= logits.max()
    p = np.exp(logits)
    return (p / p.sum()).astype(np.float64)


def caption_tokens(scene: LatentScene, config: CorpusConfig) -> list[int]:
    """CLS + (class-word attr-word pos-word) per slot in bucket order + SEP."""
    words: list[int] = [CLS_ID]
    for slot in sorted(scene.slots, key=lambda s: s.bucket):
        words.extend([config.class_word(slot.class_id),
                      config.attr_word(slot.attr_id),
                      config.pos_word(slot.bucket)])
    words.append(SEP_ID)
    return words


def render_sample(index: int, scene: LatentScene, corpus: Corpus) -> PairedSample:
    config = corpus.config
    feats = np.zeros((config.n_img, config.d_visual), dtype=np.float32)
    boxes = np.zeros((config.n_img, 4), dtype=np.float32)
    boxes[0] = WHOLE_IMAGE_BOX
    probs = np.full((config.n_img, config.n_classes), 1.0 / config.n_classes,
                    dtype=np.float64)
    pad_img = np.ones(config.n_img, dtype=bool)
    pad_img[0] = False
    ordered = sorted(scene.slots, key=lambda s: s.bucket)
    for j, slot in enumerate(ordered, start=1):
        feats[j] = slot_feature(slot, corpus.class_prototypes)
        boxes[j] = slot.box
        probs[j] = detector_distribution(slot, corpus.class_prototypes,
                                         config.detector_scale)
        pad_img[j] = False
    words = caption_tokens(scene, config)
    tokens = np.full(config.n_txt, PAD_ID, dtype=np.int64)
    tokens[:len(words)] = words
    pad_txt = np.ones(config.n_txt, dtype=bool)
    pad_txt[:len(words)] = False
    return PairedSample(index=index, scene=scene, visual_features=feats,
                        visual_boxes=boxes, class_probs=probs, tokens=tokens,
                        pad_img=pad_img, pad_txt=pad_txt)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # seed space partitioned per sample, so generation order never matters
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5A17, index]))


def gen_corpus(n: int, config: CorpusConfig | None = None, seed: int = 0) -> Corpus:
    """Deterministic corpus of paired samples."""
    if n < 1:
        raise ContractError("need n >= 1 samples")
    config = (config or CorpusConfig()).validate()
    protos, attr_protos = make_prototypes(config, seed)
    corpus = Corpus(config=config, seed=seed, class_prototypes=protos,
                    attr_prototypes=attr_protos)
    for i in range(n):
        scene = gen_scene(config, attr_protos, _sample_rng(seed, i))
        corpus.samples.append(render_sample(i, scene, corpus))
    return corpus


# ---------------------------------------------------------------------------
# four-way matching groups


@dataclass
class FourwayGroup:
    """Four image-text pairs, exactly one of which is aligned."""

    images: list[PairedSample]
    captions: list[PairedSample]
    positive: int
    kinds: list[str] = field(default_factory=list)
    hard_fallback: bool = False


def hard_negative_scene(scene: LatentScene, config: CorpusConfig,
                        attr_protos: np.ndarray,
                        rng: np.random.Generator) -> LatentScene | None:
    """A scene with the same class set, attribute multiset, and buckets,
    but a different class->attribute binding. None if impossible."""
    k = len(scene.slots)
    ordered = sorted(scene.slots, key=lambda s: s.bucket)
    attrs = [s.attr_id for s in ordered]
    if k >= 2 and len(set(attrs)) >= 2:
        for _ in range(20):
            perm = rng.permutation(k)
            new_attrs = [attrs[j] for j in perm]
            if new_attrs != attrs:
                break
        else:
            return None
    elif k >= 1:
        # single slot (or uniform attrs): swap one attribute value instead
        target = int(rng.integers(0, k))
        new_attrs = list(attrs)
        choices = [a for a in range(config.n_attrs) if a != attrs[target]]
        new_attrs[target] = int(rng.choice(choices))
    slots = [SceneSlot(class_id=s.class_id, attr_id=int(a), bucket=s.bucket,
                       box=s.box.copy(),
                       attr_vec=_attr_component(int(a), attr_protos, config, rng))
             for s, a in zip(ordered, new_attrs)]
    return LatentScene(slots=slots)


def gen_fourway_batch(corpus: Corpus, rng: np.random.Generator,
                      n_groups: int = 1, start: int | None = None) -> list[FourwayGroup]:
    """Groups of four pairs: the positive, a random-caption negative, a
    random-image negative, and a hard-image negative whose scene shares
    the positive's classes but binds them differently."""
    if len(corpus) < 4:
        raise ContractError("need at least 4 corpus samples for grouping")
    config = corpus.config
    groups = []
    for g in range(n_groups):
        if start is None:
            pos_idx = int(rng.integers(0, len(corpus)))
        else:
            pos_idx = (start + g) % len(corpus)
        pos = corpus[pos_idx]

        cap_idx = pos_idx
        for _ in range(100):
            cap_idx = int(rng.integers(0, len(corpus)))
            if cap_idx != pos_idx and \
                    not np.array_equal(corpus[cap_idx].tokens, pos.tokens):
                break
        img_idx = pos_idx
        while img_idx == pos_idx:
            img_idx = int(rng.integers(0, len(corpus)))

        hard_scene = hard_negative_scene(pos.scene, config,
                                         corpus.attr_prototypes, rng)
        fallback = hard_scene is None
        if fallback:
            hard_idx = pos_idx
            while hard_idx in (pos_idx, img_idx):
                hard_idx = int(rng.integers(0, len(corpus)))
            hard_img = corpus[hard_idx]
        else:
            hard_img = render_sample(-1, hard_scene, corpus)

        entries = [
            ("positive", pos, pos),
            ("random_caption", pos, corpus[cap_idx]),
            ("random_image", corpus[img_idx], pos),
            ("hard_image", hard_img, pos),
        ]
        order = rng.permutation(4)
        images = [entries[i][1] for i in order]
        captions = [entries[i][2] for i in order]
        kinds = [entries[i][0] for i in order]
        positive = int(np.flatnonzero(order == 0)[0])
        groups.append(FourwayGroup(images=images, captions=captions,
                                   positive=positive, kinds=kinds,
                                   hard_fallback=fallback))
    return groups


# ---------------------------------------------------------------------------
# batch assembly


def samples_to_batch(images: list[PairedSample],
                     captions: list[PairedSample] | None = None) -> MultimodalBatch:
    """Stack samples into a batch; ``captions`` (defaulting to the same
    samples) supplies the text side, letting callers mix pairs."""
    captions = captions or images
    if len(captions) != len(images):
        raise ContractError("image and caption lists must align")
    n_txt = len(captions[0].tokens)
    positions = np.tile(np.arange(n_txt), (len(images), 1))
    return MultimodalBatch(
        visual_features=np.stack([s.visual_features for s in images]),
        visual_boxes=np.stack([s.visual_boxes for s in images]),
        text_tokens=np.stack([s.tokens for s in captions]),
        text_positions=positions,
        pad_img=np.stack([s.pad_img for s in images]),
        pad_txt=np.stack([s.pad_txt for s in captions]),
        region_class_probs=np.stack([s.class_probs for s in images]),
    )


def groups_to_batch(groups: list[FourwayGroup]) -> tuple[MultimodalBatch, np.ndarray]:
    """Flatten groups (group-major) into one batch plus positive indices."""
    images, captions = [], []
    for g in groups:
        images.extend(g.images)
        captions.extend(g.captions)
    labels = np.array([g.positive for g in groups], dtype=np.int64)
    return samples_to_batch(images, captions), labels


# ---------------------------------------------------------------------------
# serialization


def _encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")


def _decode_f32(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape).copy()


def save_corpus(corpus: Corpus, path) -> None:
    """Line-delimited records: a header object, then one object per sample."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"kind": "header", "version": CORPUS_FORMAT_VERSION,
                  "seed": corpus.seed, "n_samples": len(corpus),
                  "config": vars(corpus.config)}
        fh.write(json.dumps(header) + "\n")
        for s in corpus:
            rec = {
                "index": s.index,
                "features": _encode_f32(s.visual_features),
                "boxes": [[round(float(v), 6) for v in row] for row in s.visual_boxes],
                "class_probs": _encode_f32(s.class_probs.astype(np.float32)),
                "tokens": [int(t) for t in s.tokens],
                "pad_img": [bool(v) for v in s.pad_img],
                "pad_txt": [bool(v) for v in s.pad_txt],
                "scene": [{"class_id": sl.class_id, "attr_id": sl.attr_id,
                           "bucket": sl.bucket,
                           "box": [float(v) for v in sl.box],
                           "attr_vec": _encode_f32(sl.attr_vec)}
                          for sl in s.scene.slots],
            }
            fh.write(json.dumps(rec) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "header":
            raise ContractError(f"{path}: missing corpus header line")
        if header.get("version") != CORPUS_FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported corpus version")
        config = CorpusConfig(**header["config"]).validate()
        protos, attr_protos = make_prototypes(config, header["seed"])
        corpus = Corpus(config=config, seed=header["seed"],
                        class_prototypes=protos, attr_prototypes=attr_protos)
        for line in fh:
            rec = json.loads(line)
            slots = [SceneSlot(class_id=sl["class_id"], attr_id=sl["attr_id"],
                               bucket=sl["bucket"],
                               box=np.array(sl["box"], dtype=np.float32),
                               attr_vec=_decode_f32(sl["attr_vec"], (config.d_visual,)))
                     for sl in rec["scene"]]
            scene = LatentScene(slots=slots)
            corpus.samples.append(PairedSample(
                index=rec["index"], scene=scene,
                visual_features=_decode_f32(rec["features"],
                                            (config.n_img, config.d_visual)),
                visual_boxes=np.array(rec["boxes"], dtype=np.float32),
                class_probs=_decode_f32(rec["class_probs"],
                                        (config.n_img, config.n_classes)).astype(np.float64),
                tokens=np.array(rec["tokens"], dtype=np.int64),
                pad_img=np.array(rec["pad_img"], dtype=bool),
                pad_txt=np.array(rec["pad_txt"], dtype=bool),
            ))
    if len(corpus) != header["n_samples"]:
        raise ContractError(f"{path}: truncated corpus file")
    return corpus
