"""Posts, tokenization, vocabulary, quartile labeling and train/val/test splits."""
from __future__ import annotations

import hashlib
import json
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import regex

from .errors import FormatError, InvalidInputError
from .formats import MAGIC_FEATURES, dumps_json, read_container, write_container

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
T_MAX = 50
SPLITS = ("train", "val", "test")

_GRAPHEME = regex.compile(r"\X")
_PICTO = regex.compile(r"\p{Extended_Pictographic}|\p{Regional_Indicator}|⃣")
_TRAILING = string.punctuation


@dataclass
class Post:
    user_id: str
    post_id: str
    likes: int
    caption: str
    image_features: np.ndarray
    spatial_features: np.ndarray | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.user_id, self.post_id)


@dataclass
class LabeledExample:
    user_id: str
    post_id: str
    token_ids: list[int]
    image_features: np.ndarray
    label: int
    caption: str = ""
    features_ref: int = -1

    @property
    def key(self) -> tuple[str, str]:
        return (self.user_id, self.post_id)

    @property
    def mask(self) -> list[bool]:
        return [t != PAD for t in self.token_ids]


@dataclass
class Vocabulary:
    tokens: list[str]
    min_freq: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Sequence[str], t_max: int = T_MAX) -> list[int]:
        return [self.id_of(t) for t in tokens[:t_max]]

    def to_json(self) -> str:
        return dumps_json({"min_freq": self.min_freq, "tokens": self.tokens})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(tokens=list(obj["tokens"]), min_freq=int(obj["min_freq"]))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class SplitManifest:
    seed: int
    assignment: dict[tuple[str, str], str]

    def keys(self, split: str) -> list[tuple[str, str]]:
        return [k for k, s in self.assignment.items() if s == split]

    def select(self, examples: Iterable[LabeledExample], split: str) -> list[LabeledExample]:
        return [e for e in examples if self.assignment.get(e.key) == split]

    def write(self, path) -> None:
        lines = [dumps_json({"user_id": u, "post_id": p, "split": s}) for (u, p), s in sorted(self.assignment.items())]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def read(cls, path, seed: int = -1) -> "SplitManifest":
        assignment = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                assignment[(obj["user_id"], obj["post_id"])] = obj["split"]
        return cls(seed=seed, assignment=assignment)


# ---------------------------------------------------------------------------
# tokenization and vocabulary
# ---------------------------------------------------------------------------

def is_emoji(token: str) -> bool:
    return bool(token) and _PICTO.search(token) is not None


def tokenize(caption: str) -> list[str]:
    """Lowercase, split on whitespace, emit each emoji grapheme as its own token.

    Hashtags keep their '#'. Trailing ASCII punctuation is stripped from word
    tokens and tokens left empty are dropped.
    """
    tokens: list[str] = []
    for chunk in caption.lower().split():
        word: list[str] = []
        for g in _GRAPHEME.findall(chunk):
            if _PICTO.search(g):
                _flush_word(word, tokens)
                tokens.append(g)
            else:
                word.append(g)
        _flush_word(word, tokens)
    return tokens


def _flush_word(parts: list[str], out: list[str]) -> None:
    if parts:
        w = "".join(parts).rstrip(_TRAILING)
        if w:
            out.append(w)
        parts.clear()


def build_vocabulary(corpus: Sequence[Post], min_freq: int = 1) -> Vocabulary:
    """Ids ordered by (frequency desc, token asc) after PAD and UNK."""
    if min_freq < 1:
        raise InvalidInputError(f"min_freq must be >= 1, got {min_freq}")
    if not corpus:
        raise InvalidInputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for post in corpus for tok in tokenize(post.caption))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(tokens=[PAD_TOKEN, UNK_TOKEN] + kept, min_freq=min_freq)


# ---------------------------------------------------------------------------
# labeling and splits
# ---------------------------------------------------------------------------

def label_posts(posts_of_one_user: Sequence[Post], vocab: Vocabulary | None = None,
                t_max: int = T_MAX) -> list[LabeledExample]:
    """Top floor(n/4) posts by likes are positives, bottom floor(n/4) negatives.

    Order is (likes, post_id) ascending, so ties at the boundary resolve
    deterministically. Users with fewer than 4 posts yield nothing.
    """
    n = len(posts_of_one_user) // 4
    if n == 0:
        return []
    ranked = sorted(posts_of_one_user, key=lambda p: (p.likes, p.post_id))
    chosen = [(p, 0) for p in ranked[:n]] + [(p, 1) for p in ranked[-n:]]
    out = []
    for post, label in chosen:
        ids = vocab.encode(tokenize(post.caption), t_max) if vocab is not None else []
        out.append(LabeledExample(post.user_id, post.post_id, ids, post.image_features, label, post.caption))
    return out


def group_by_user(posts: Iterable[Post]) -> dict[str, list[Post]]:
    groups: dict[str, list[Post]] = defaultdict(list)
    for p in posts:
        groups[p.user_id].append(p)
    return dict(sorted(groups.items()))


def label_corpus(posts: Sequence[Post], vocab: Vocabulary | None = None, t_max: int = T_MAX) -> list[LabeledExample]:
    seen = set()
    for p in posts:
        if p.key in seen:
            raise InvalidInputError(f"duplicate post {p.key}")
        seen.add(p.key)
    out: list[LabeledExample] = []
    for user_posts in group_by_user(posts).values():
        out.extend(label_posts(user_posts, vocab, t_max))
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(examples: Sequence[LabeledExample], seed: int, test_fraction: float = 0.2,
          val_fraction: float = 0.1) -> SplitManifest:
    """Stratified by label: 20% test, then 10% of the rest validation."""
    rng = np.random.default_rng(seed)
    assignment: dict[tuple[str, str], str] = {}
    for label in (0, 1):
        keys = sorted(e.key for e in examples if e.label == label)
        order = rng.permutation(len(keys))
        n_test = _round_half_up(test_fraction * len(keys))
        n_val = _round_half_up(val_fraction * (len(keys) - n_test))
        for rank, idx in enumerate(order):
            assignment[keys[idx]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    return SplitManifest(seed=seed, assignment=dict(sorted(assignment.items())))


def encode_examples(examples: Sequence[LabeledExample], vocab: Vocabulary, t_max: int = T_MAX) -> None:
    for e in examples:
        e.token_ids = vocab.encode(tokenize(e.caption), t_max)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_features(path, matrix: np.ndarray) -> None:
    """Write an [rows, d1] (or [rows, 7, 7, d1]) float matrix."""
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim not in (2, 4):
        raise InvalidInputError(f"features must be 2-D or 4-D, got shape {m.shape}")
    header = {"rows": int(m.shape[0]), "d1": int(m.shape[-1]), "shape": list(m.shape)}
    write_container(path, MAGIC_FEATURES, header, m)


def read_features(path) -> np.ndarray:
    header, flat = read_container(path, MAGIC_FEATURES)
    shape = header.get("shape") or [header.get("rows"), header.get("d1")]
    if shape[0] != header.get("rows") or shape[-1] != header.get("d1"):
        raise FormatError(f"{path}: header rows/d1 {header.get('rows')}x{header.get('d1')} disagree with shape {shape}")
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise FormatError(f"{path}: header shape {shape} needs {int(np.prod(shape)) * 4} payload bytes, found {flat.size * 4}")
    return flat.reshape(shape)


def read_posts(posts_path, features_path, spatial_path=None) -> list[Post]:
    """Load the JSON Lines posts file and attach feature rows by ``features_ref``."""
    feats = read_features(features_path)
    spatial = read_features(spatial_path) if spatial_path else None
    posts = []
    for lineno, line in enumerate(Path(posts_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ref = int(obj["features_ref"])
            likes = int(obj["likes"])
            user, pid, caption = str(obj["user_id"]), str(obj["post_id"]), str(obj["caption"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{posts_path}:{lineno}: bad post record ({exc})") from None
        if not 0 <= ref < feats.shape[0]:
            raise FormatError(f"{posts_path}:{lineno}: features_ref {ref} outside {feats.shape[0]} rows")
        if likes < 0:
            raise FormatError(f"{posts_path}:{lineno}: negative likes")
        posts.append(Post(user, pid, likes, caption, feats[ref],
                          spatial[ref] if spatial is not None and ref < spatial.shape[0] else None))
    return posts


def write_posts(path, posts: Sequence[Post]) -> None:
    """Write posts as JSON Lines; ``features_ref`` is the post's position in the list."""
    lines = [
        dumps_json({"user_id": p.user_id, "post_id": p.post_id, "likes": p.likes,
                    "caption": p.caption, "features_ref": i})
        for i, p in enumerate(posts)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
