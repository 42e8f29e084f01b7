"""Latent Dirichlet Allocation by collapsed Gibbs sampling.

Documents are lists of integer word ids in ``[0, vocab_size)``. The
pipeline maps its caption vocabulary onto this space with
:func:`documents_from_token_ids`, which drops the PAD/UNK ids.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError
from .formats import MAGIC_LDA, read_container, write_container

RESERVED_IDS = 2  # PAD and UNK never enter the topic model
MIN_DOC_TOKENS = 2


@dataclass
class LdaConfig:
    topics: int = 400
    alpha: float | None = None  # None means 50 / topics
    beta: float = 0.01
    sweeps: int = 200
    burn_in: int = 20
    seed: int = 0
    infer_sweeps: int = 50
    infer_burn_in: int = 20

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = 50.0 / self.topics
        if self.topics < 2:
            raise InvalidInputError(f"need at least 2 topics, got {self.topics}")
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidInputError("alpha and beta must be positive")
        if not self.sweeps > self.burn_in >= 0:
            raise InvalidInputError(f"need sweeps > burn_in >= 0, got {self.sweeps}, {self.burn_in}")
        if not self.infer_sweeps > self.infer_burn_in >= 0:
            raise InvalidInputError("need infer_sweeps > infer_burn_in >= 0")


class LdaModel:
    """Fitted topic-word counts plus the priors needed to score new documents."""

    def __init__(self, topic_word: np.ndarray, alpha: float, beta: float,
                 tokens: Sequence[str] | None = None, doc_topic: np.ndarray | None = None):
        self.topic_word = np.asarray(topic_word, dtype=np.int64)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.tokens = list(tokens) if tokens is not None else None
        self.doc_topic = doc_topic

    @property
    def n_topics(self) -> int:
        return self.topic_word.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.topic_word.shape[1]

    @property
    def topic_totals(self) -> np.ndarray:
        return self.topic_word.sum(axis=1)

    def training_distributions(self) -> np.ndarray:
        """Topic proportions of the fitted documents, from the final sampler state."""
        if self.doc_topic is None:
            raise InvalidInputError("model was loaded from disk; training assignments are not kept")
        return np.stack([_proportions(row, self.alpha) for row in self.doc_topic])

    def save(self, path) -> None:
        header = {"K": self.n_topics, "alpha": self.alpha, "beta": self.beta, "vocab_size": self.vocab_size,
                  "tokens": self.tokens}
        write_container(path, MAGIC_LDA, header, self.topic_word.astype(np.float32))

    @classmethod
    def load(cls, path) -> "LdaModel":
        header, flat = read_container(path, MAGIC_LDA)
        K, V = int(header["K"]), int(header["vocab_size"])
        if flat.size != K * V:
            raise FormatError(f"{path}: header promises {K}x{V} counts, payload has {flat.size}")
        return cls(flat.reshape(K, V).astype(np.int64), header["alpha"], header["beta"], header.get("tokens"))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.topic_word).tobytes())
        h.update(repr((self.alpha, self.beta, self.tokens)).encode("utf-8"))
        return h.hexdigest()


def documents_from_token_ids(token_id_lists: Sequence[Sequence[int]]) -> list[list[int]]:
    return [[t - RESERVED_IDS for t in ids if t >= RESERVED_IDS] for ids in token_id_lists]


def _proportions(counts_row: np.ndarray, alpha: float) -> np.ndarray:
    K = counts_row.shape[0]
    n = counts_row.sum()
    if n < MIN_DOC_TOKENS:
        return np.full(K, 1.0 / K)
    return (counts_row + alpha) / (n + K * alpha)


def _draw(weights: np.ndarray, u: float) -> int:
    cum = np.cumsum(weights)
    k = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return min(k, weights.shape[0] - 1)


SweepHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def fit(docs: Sequence[Sequence[int]], vocab_size: int, cfg: LdaConfig,
        tokens: Sequence[str] | None = None, on_sweep: SweepHook | None = None) -> LdaModel:
    """Run ``cfg.sweeps`` collapsed Gibbs sweeps; the final state defines the model.

    ``on_sweep(sweep, word_topic [V, K], topic_totals [K], doc_topic [D, K])``
    is called after every sweep.
    """
    if not docs or all(len(d) == 0 for d in docs):
        raise InvalidInputError("LDA needs a nonempty corpus")
    K, alpha, beta = cfg.topics, cfg.alpha, cfg.beta
    rng = np.random.default_rng(cfg.seed)
    words = [np.asarray(d, dtype=np.int64) for d in docs]
    for w in words:
        if w.size and (w.min() < 0 or w.max() >= vocab_size):
            raise InvalidInputError(f"word id outside [0, {vocab_size})")

    # word_topic is stored [V, K] so each token touches one contiguous row
    word_topic = np.zeros((vocab_size, K), dtype=np.int64)
    doc_topic = np.zeros((len(words), K), dtype=np.int64)
    totals = np.zeros(K, dtype=np.int64)
    assign = [rng.integers(0, K, size=w.size) for w in words]
    for d, (w, z) in enumerate(zip(words, assign)):
        np.add.at(word_topic, (w, z), 1)
        np.add.at(doc_topic[d], z, 1)
        np.add.at(totals, z, 1)

    vbeta = vocab_size * beta
    n_tokens = int(sum(w.size for w in words))
    for sweep in range(cfg.sweeps):
        uniforms = rng.random(n_tokens)
        pos = 0
        for d, (w, z) in enumerate(zip(words, assign)):
            nd = doc_topic[d]
            for i in range(w.size):
                wi, k = w[i], z[i]
                nd[k] -= 1
                word_topic[wi, k] -= 1
                totals[k] -= 1
                weights = (nd + alpha) * (word_topic[wi] + beta) / (totals + vbeta)
                k = _draw(weights, uniforms[pos])
                pos += 1
                z[i] = k
                nd[k] += 1
                word_topic[wi, k] += 1
                totals[k] += 1
        if on_sweep is not None:
            on_sweep(sweep, word_topic, totals, doc_topic)
    return LdaModel(word_topic.T.copy(), alpha, beta, tokens, doc_topic=doc_topic.copy())


def infer(doc: Sequence[int], model: LdaModel, sweeps: int = 50, seed: int = 0) -> np.ndarray:
    """Topic proportions of an unseen document with the model's counts frozen."""
    K, alpha, beta = model.n_topics, model.alpha, model.beta
    w = np.asarray([t for t in doc if 0 <= t < model.vocab_size], dtype=np.int64)
    if w.size < MIN_DOC_TOKENS:
        return np.full(K, 1.0 / K)
    rng = np.random.default_rng(seed)
    phi = (model.topic_word.T[w] + beta) / (model.topic_totals + model.vocab_size * beta)  # [N, K]
    z = rng.integers(0, K, size=w.size)
    nd = np.bincount(z, minlength=K)
    for _ in range(sweeps):
        uniforms = rng.random(w.size)
        for i in range(w.size):
            nd[z[i]] -= 1
            k = _draw((nd + alpha) * phi[i], uniforms[i])
            z[i] = k
            nd[k] += 1
    return _proportions(nd, alpha)


def top_words(model: LdaModel, topic: int, n: int) -> list:
    """The ``n`` highest-count words of ``topic``; ties by token, ascending."""
    if not 0 <= topic < model.n_topics:
        raise IndexError(f"topic {topic} outside [0, {model.n_topics})")
    names = model.tokens if model.tokens is not None else list(range(model.vocab_size))
    counts = model.topic_word[topic]
    order = sorted(range(model.vocab_size), key=lambda j: (-counts[j], names[j]))
    return [names[j] for j in order[:max(n, 0)]]
