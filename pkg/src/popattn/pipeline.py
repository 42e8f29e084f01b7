"""In-process glue from raw posts to trained model, shared by the CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import lda
from .dataset import (LabeledExample, Post, SplitManifest, Vocabulary, build_vocabulary, encode_examples,
                      label_corpus, split)
from .environment import UserEnvironment, compute_environments
from .errors import InvalidInputError

# offsets that turn the global seed into per-stage seeds
SEED_OFFSETS = {"split": 0, "lda": 1, "infer": 2, "model": 3, "train": 4, "kmeans": 5}


def derived_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, SEED_OFFSETS[stage]]).generate_state(1)[0])


@dataclass
class Prepared:
    examples: list[LabeledExample]
    manifest: SplitManifest
    vocab: Vocabulary

    def subset(self, name: str) -> list[LabeledExample]:
        return self.manifest.select(self.examples, name)


def prepare(posts: Sequence[Post], seed: int, min_freq: int = 1, t_max: int = 50) -> Prepared:
    """Label, split, then build the vocabulary from training captions only."""
    examples = label_corpus(posts)
    if not examples:
        raise InvalidInputError("no labeled examples: every user has fewer than 4 posts")
    manifest = split(examples, derived_seed(seed, "split"))
    train_keys = set(manifest.keys("train"))
    by_key = {p.key: p for p in posts}
    vocab = build_vocabulary([by_key[k] for k in sorted(train_keys)], min_freq)
    encode_examples(examples, vocab, t_max)
    return Prepared(examples, manifest, vocab)


def fit_topics(prepared: Prepared, cfg: lda.LdaConfig) -> lda.LdaModel:
    train = prepared.subset("train")
    docs = lda.documents_from_token_ids([e.token_ids for e in train])
    return lda.fit(docs, len(prepared.vocab) - lda.RESERVED_IDS, cfg, tokens=prepared.vocab.tokens[lda.RESERVED_IDS:])


def caption_topics(prepared: Prepared, model: lda.LdaModel, seed: int,
                   sweeps: int = 50) -> dict[tuple[str, str], np.ndarray]:
    """Topic distribution per example: training state for training posts, inference for the rest."""
    train = prepared.subset("train")
    out = dict(zip((e.key for e in train), model.training_distributions()))
    infer_seed = derived_seed(seed, "infer")
    for e in prepared.examples:
        if e.key not in out:
            doc = lda.documents_from_token_ids([e.token_ids])[0]
            out[e.key] = lda.infer(doc, model, sweeps=sweeps, seed=infer_seed)
    return dict(sorted(out.items()))


def environments(prepared: Prepared, topics) -> dict[str, UserEnvironment]:
    return compute_environments(prepared.subset("train"), topics)
