"""Synthetic corpora with known label structure.

``planted_signal_corpus``: a user's most-liked posts carry a designated
caption token and a positive shift in one image coordinate; the least-liked
carry neither. Any model that reads caption or image can learn it.

``environment_signal_corpus``: every user has a private baseline on one
image coordinate, and a post is liked when it sits above that user's own
baseline. A single post cannot reveal the baseline; the user's mean image
(the environment) can. Models without the environment should plateau well
below models with it.
"""
from __future__ import annotations

import numpy as np

from .dataset import Post

SIGNAL_TOKEN = "#sunset"
SIGNAL_COORD = 0
FILLER = (
    "today", "friends", "coffee", "weekend", "city", "walk", "night", "happy", "new", "view",
    "morning", "trip", "home", "love", "dinner", "best", "time", "look", "work", "summer",
    "park", "music", "game", "class", "sky", "beach", "cat", "dog", "food", "party",
    "#tbt", "#nofilter", "#selfie", "🙂", "🎉", "☕", "🌸", "❤️",
)


def _caption(rng: np.random.Generator, with_token: bool, lo: int = 3, hi: int = 10) -> str:
    words = [FILLER[i] for i in rng.integers(0, len(FILLER), size=int(rng.integers(lo, hi + 1)))]
    if with_token:
        words.insert(int(rng.integers(0, len(words) + 1)), SIGNAL_TOKEN)
    return " ".join(words)


def _distinct_likes(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.sort(rng.choice(np.arange(5, 20 * n + 5), size=n, replace=False))


def _spatial(rng: np.random.Generator, features: np.ndarray) -> np.ndarray:
    grid = features[None, None, :] + rng.normal(scale=0.3, size=(7, 7, features.size))
    return grid.astype(np.float32)


def planted_signal_corpus(n_users: int = 10, posts_per_user: int = 20, d1: int = 16, seed: int = 0,
                          shift: float = 1.5, spatial: bool = False) -> list[Post]:
    """Posts whose popularity is carried by a caption token plus an image coordinate."""
    rng = np.random.default_rng(seed)
    posts = []
    q = posts_per_user // 4
    for u in range(n_users):
        likes = _distinct_likes(rng, posts_per_user)
        for rank in range(posts_per_user):
            if rank >= posts_per_user - q:
                popular = True
            elif rank < q:
                popular = False
            else:
                popular = bool(rng.random() < 0.5)
            feats = rng.normal(size=d1).astype(np.float32)
            feats[SIGNAL_COORD] = (shift if popular else -shift) + 0.5 * rng.normal()
            posts.append(Post(f"user{u:03d}", f"u{u:03d}p{rank:03d}", int(likes[rank]),
                              _caption(rng, popular), feats, _spatial(rng, feats) if spatial else None))
    return posts


def environment_signal_corpus(n_users: int = 40, posts_per_user: int = 40, d1: int = 16, seed: int = 0,
                              baseline_spread: float = 2.0, noise: float = 0.05) -> list[Post]:
    """Posts liked when an image coordinate exceeds the poster's private baseline."""
    rng = np.random.default_rng(seed)
    posts = []
    for u in range(n_users):
        baseline = rng.uniform(-baseline_spread, baseline_spread)
        offsets = rng.uniform(-1.0, 1.0, size=posts_per_user)
        order = np.argsort(offsets)
        likes = np.empty(posts_per_user, dtype=np.int64)
        likes[order] = _distinct_likes(rng, posts_per_user)
        for i in range(posts_per_user):
            feats = rng.normal(size=d1).astype(np.float32)
            feats[SIGNAL_COORD] = baseline + offsets[i] + noise * rng.normal()
            posts.append(Post(f"user{u:03d}", f"u{u:03d}p{i:03d}", int(likes[i]), _caption(rng, False), feats))
    return posts
