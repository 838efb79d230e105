"""Synthetic training corpora with learnable sequential structure.

Tokens come from a seeded order-k Markov chain: every k-token context has a
"favorite" next token receiving most of the probability mass, with the rest
spread over a Zipf popularity distribution. Favorites are themselves drawn
from the popularity distribution, which skews the unigram distribution well
below the uniform entropy ln(vocab) while leaving most of the compressible
structure in the transitions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError

_STATE_BUCKETS = 1 << 16


def zipf_distribution(vocab: int, exponent: float = 1.0) -> np.ndarray:
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    p = ranks**-exponent
    return p / p.sum()


def make_synthetic_corpus(seed: int, vocab: int, n_tokens: int, order: int = 1,
                          favorite_mass: float = 0.85) -> np.ndarray:
    """Deterministic token stream from a skewed order-k Markov chain.

    favorite_mass is the probability of emitting the context's favorite
    token; the remainder is drawn from the Zipf popularity distribution.
    Values near 1 make rows near-deterministic.
    """
    if vocab < 2:
        raise ValidationError(f"vocab must be >= 2, got {vocab}")
    if order < 1:
        raise ValidationError(f"order must be >= 1, got {order}")
    if n_tokens < 1:
        raise ValidationError(f"n_tokens must be >= 1, got {n_tokens}")
    if not 0.0 <= favorite_mass < 1.0:
        raise ValidationError(f"favorite_mass must be in [0, 1), got {favorite_mass}")

    rng = np.random.default_rng(seed)
    popularity = zipf_distribution(vocab)
    # favorites keyed by a hash of the context; drawing them from the
    # popularity distribution skews the unigram distribution too
    favorites = rng.choice(vocab, size=_STATE_BUCKETS, p=popularity)
    coefs = [int(c) | 1 for c in rng.integers(1, 1 << 30, size=order)]

    emit_favorite = rng.random(n_tokens) < favorite_mass
    exploration = rng.choice(vocab, size=n_tokens, p=popularity)

    context = [int(t) for t in rng.choice(vocab, size=order, p=popularity)]
    out = np.empty(n_tokens, dtype=np.int64)
    for t in range(n_tokens):
        if emit_favorite[t]:
            h = 0
            for c, tok in zip(coefs, context):
                h = (h + c * tok) % _STATE_BUCKETS
            token = int(favorites[h])
        else:
            token = int(exploration[t])
        out[t] = token
        context.pop(0)
        context.append(token)
    return out


def unigram_entropy(tokens: np.ndarray, vocab: int) -> float:
    """Empirical entropy (nats) of the token marginal distribution."""
    counts = np.bincount(np.asarray(tokens).astype(np.int64), minlength=vocab)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def save_tokens(path: str | Path, tokens: np.ndarray) -> None:
    """Write a token stream as raw little-endian u32, no header."""
    np.ascontiguousarray(np.asarray(tokens), dtype="<u4").tofile(str(path))


def load_tokens(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"token file not found: {path}")
    return np.fromfile(str(path), dtype="<u4").astype(np.int64)
