import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from switchformer.encoder import CLS_ID, SEP_ID, NUM_SPECIAL_TOKENS, MultimodalBatch


def max_rel_grad_err(store, numeric, floor=1e-3):
    """Worst per-parameter relative gradient error with an absolute floor.

    The floor keeps finite-difference roundoff on near-zero gradients from
    registering as relative error; a genuinely missing gradient term still
    fails loudly because it is large next to the floor.
    """
    worst = 0.0
    for name, t in store.items():
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        ref = numeric[name]
        denom = max(np.abs(got).max(initial=0.0), np.abs(ref).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(got - ref).max() / denom))
    return worst


def random_batch(config, batch_size, rng, pad=False):
    """A structurally valid batch of random content for encoder tests."""
    n_i, n_t = config.n_img, config.n_txt
    feats = rng.normal(size=(batch_size, n_i, config.d_visual))
    lo = rng.uniform(0.0, 0.5, size=(batch_size, n_i, 2))
    hi = lo + rng.uniform(0.05, 0.45, size=(batch_size, n_i, 2))
    boxes = np.concatenate([lo, hi], axis=-1)
    boxes[:, 0] = [0.0, 0.0, 1.0, 1.0]
    tokens = rng.integers(NUM_SPECIAL_TOKENS, config.vocab, size=(batch_size, n_t))
    tokens[:, 0] = CLS_ID
    positions = np.tile(np.arange(n_t), (batch_size, 1))
    pad_img = np.zeros((batch_size, n_i), dtype=bool)
    pad_txt = np.zeros((batch_size, n_t), dtype=bool)
    if pad:
        for s in range(batch_size):
            keep_i = int(rng.integers(2, n_i + 1))
            pad_img[s, keep_i:] = True
            keep_t = int(rng.integers(3, n_t + 1))
            pad_txt[s, keep_t:] = True
            tokens[s, keep_t - 1] = SEP_ID
            tokens[s, keep_t:] = 0
    else:
        tokens[:, -1] = SEP_ID
    return MultimodalBatch(
        visual_features=feats, visual_boxes=boxes, text_tokens=tokens,
        text_positions=positions, pad_img=pad_img, pad_txt=pad_txt,
    ).validate()
