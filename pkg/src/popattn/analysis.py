"""Post-hoc analyses: word-attention dumps, part-by-part popularity maps,
K-means with the pick-out strategy, and positive-minus-negative token counts.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import UNK_TOKEN, LabeledExample, Vocabulary, is_emoji, tokenize
from .environment import UserEnvironment
from .errors import InvalidInputError
from .formats import dumps_json
from .model import DualAttentionModel, make_batch
from .tensor import no_grad

# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

MAX_LLOYD_ITERS = 300


@dataclass
class KMeansResult:
    assignment: np.ndarray  # [n] cluster index per point
    centroids: np.ndarray  # [K, d]
    inertia: float
    history: list[float]  # inertia after every assignment step of the chosen run
    run_histories: list[list[float]] = field(default_factory=list)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # one centroid at a time: exact differences, and memory stays O(n d)
    return np.stack([np.sum((points - c) ** 2, axis=1) for c in centroids], axis=1)


def _plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            # every point coincides with a chosen centre; pick an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(free.size)])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    K = centroids.shape[0]
    assignment = None
    history = []
    for _ in range(max_iter):
        dist = _sq_distances(points, centroids)
        new = np.argmin(dist, axis=1)
        nearest = dist[np.arange(points.shape[0]), new]
        history.append(float(nearest.sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        nearest = nearest.copy()
        for k in range(K):
            members = assignment == k
            if members.any():
                centroids[k] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                centroids[k] = points[far]
                nearest[far] = -1.0  # a second empty cluster takes the next farthest point
    return assignment, centroids, history


def _sse(points: np.ndarray, assignment: np.ndarray, K: int) -> float:
    return float(sum(np.sum((points[assignment == k] - points[assignment == k].mean(axis=0)) ** 2)
                     for k in range(K) if np.any(assignment == k)))


def _hartigan(points: np.ndarray, assignment: np.ndarray, K: int, max_passes: int):
    """Single-point moves that strictly lower inertia, applied until none is left.

    Moving x from cluster a (size n_a) to b changes inertia by
    n_b/(n_b+1) |x - c_b|^2 - n_a/(n_a-1) |x - c_a|^2. A Lloyd fixpoint can
    still admit such a move; a Hartigan fixpoint is always a Lloyd fixpoint.
    """
    assignment = assignment.copy()
    history = []
    for _ in range(max_passes):
        counts = np.bincount(assignment, minlength=K).astype(np.float64)
        centroids = np.stack([points[assignment == k].mean(axis=0) if counts[k] else points[0] for k in range(K)])
        moved = False
        for i in range(points.shape[0]):
            a = assignment[i]
            if counts[a] <= 1:
                continue
            d = np.sum((centroids - points[i]) ** 2, axis=1)
            cost = counts[a] / (counts[a] - 1) * d[a]
            gain = counts / (counts + 1) * d
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < cost * (1 - 1e-12) - 1e-15:
                centroids[a] = (counts[a] * centroids[a] - points[i]) / (counts[a] - 1)
                centroids[b] = (counts[b] * centroids[b] + points[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                assignment[i] = b
                moved = True
        if not moved:
            break
        history.append(_sse(points, assignment, K))
    return assignment, history


def kmeans(points, K: int, seed: int = 0, n_init: int = 20, max_iter: int = MAX_LLOYD_ITERS) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations, then Hartigan single-point refinement.

    The best of ``n_init`` restarts is returned. ``history`` holds the
    inertia after every Lloyd assignment step and every refinement pass.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"points must be [n, d], got shape {x.shape}")
    if K < 1 or x.shape[0] < K:
        raise InvalidInputError(f"need n >= K >= 1, got n={x.shape[0]}, K={K}")
    rng = np.random.default_rng(seed)
    best = None
    runs = []
    for _ in range(max(1, n_init)):
        assignment, centroids, history = _lloyd(x, _plus_plus(x, K, rng), max_iter)
        assignment, refined = _hartigan(x, assignment, K, max_iter)
        if refined:
            history = history + refined
            centroids = np.stack([x[assignment == k].mean(axis=0) for k in range(K)])
        runs.append(history)
        inertia = history[-1]
        if best is None or inertia < best.inertia:
            best = KMeansResult(assignment, centroids, inertia, history)
    best.run_histories = runs
    return best


# ---------------------------------------------------------------------------
# pick-out clustering
# ---------------------------------------------------------------------------

@dataclass
class Category:
    index: int
    members: list[tuple[str, str]]
    ratio: float  # negatives / total
    picked_out_at_round: int | None


@dataclass
class ClusterReport:
    categories: list[Category]
    k_per_round: list[int]
    threshold: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "user_id", "post_id", "ratio", "picked_out_round"])
        for c in self.categories:
            round_ = "" if c.picked_out_at_round is None else c.picked_out_at_round
            for user, post in c.members:
                w.writerow([c.index, user, post, f"{c.ratio:.6f}", round_])
        return buf.getvalue()


def unpopular_ratio(labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean(labels == 0)) if labels.size else 0.0


def pickout_clustering(examples: Sequence[LabeledExample], K: int = 12, t: float = 0.1,
                       seed: int = 0, n_init: int = 20) -> ClusterReport:
    """Repeatedly cluster, remove categories with |R - 0.5| > t, and recluster the rest.

    Stops when no category qualifies or fewer than K posts remain; the last
    round's categories (or the leftover posts) close the report.
    """
    if not 0 < t < 0.5:
        raise InvalidInputError(f"threshold t must lie in (0, 0.5), got {t}")
    if not examples:
        raise InvalidInputError("nothing to cluster")
    points = np.stack([np.asarray(e.image_features, dtype=np.float64) for e in examples])
    labels = np.array([e.label for e in examples])
    keys = [e.key for e in examples]
    remaining = np.arange(len(examples))
    categories: list[Category] = []
    rounds: list[int] = []
    rng = np.random.default_rng(seed)

    def add(idx, ratio, round_):
        categories.append(Category(len(categories), [keys[i] for i in idx], ratio, round_))

    while remaining.size >= K:
        round_ = len(rounds) + 1
        rounds.append(K)
        result = kmeans(points[remaining], K, seed=int(rng.integers(2**31)), n_init=n_init)
        groups = [remaining[result.assignment == k] for k in range(K)]
        groups = [g for g in groups if g.size]
        ratios = [unpopular_ratio(labels[g]) for g in groups]
        picked = [abs(r - 0.5) > t for r in ratios]
        if not any(picked):
            for g, r in zip(groups, ratios):
                add(g, r, None)
            remaining = remaining[:0]
            break
        for g, r, p in zip(groups, ratios, picked):
            if p:
                add(g, r, round_)
        kept = [g for g, p in zip(groups, picked) if not p]
        remaining = np.sort(np.concatenate(kept)) if kept else remaining[:0]
    if remaining.size:
        add(remaining, unpopular_ratio(labels[remaining]), None)
    return ClusterReport(categories, rounds, t)


# ---------------------------------------------------------------------------
# text statistics
# ---------------------------------------------------------------------------

PRONOUNS = frozenset("""
i me my mine myself you your yours yourself yourselves he him his himself she her hers herself it its itself
we us our ours ourselves they them their theirs themselves this that these those who whom whose which what
""".split())
PREPOSITIONS = frozenset("""
about above across after against along among around at before behind below beneath beside besides between
beyond by despite down during except for from in inside into like near of off on onto out outside over past
since through throughout till to toward towards under underneath until up upon with within without via
""".split())


def is_symbol(token: str) -> bool:
    return not is_emoji(token) and not any(ch.isalnum() for ch in token)


def load_stoplist(path) -> set[str]:
    """One token per line; lines that are '#' alone or start with '# ' are comments."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s = line.strip()
        if not s or s == "#" or s.startswith("# "):
            continue
        words.add(s.lower())
    return words


@dataclass(frozen=True)
class TokenStat:
    token: str
    m_p: int
    m_n: int

    @property
    def score(self) -> int:
        return self.m_p - self.m_n


@dataclass
class TextStatReport:
    words: list[TokenStat]
    emojis: list[TokenStat]
    stoplist_size: int

    def score_of(self, token: str) -> int | None:
        for s in self.words + self.emojis:
            if s.token == token:
                return s.score
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "rank", "token", "m_p", "m_n", "score"])
        for section, rows in (("word", self.words), ("emoji", self.emojis)):
            for rank, s in enumerate(rows, 1):
                w.writerow([section, rank, s.token, s.m_p, s.m_n, s.score])
        return buf.getvalue()


def text_stats(examples: Iterable[LabeledExample], extra_stopwords: Iterable[str] = ()) -> TextStatReport:
    """Occurrence counts in positive vs negative captions, ranked by m_p - m_n.

    Built-in filtering drops pronouns, prepositions and pure-symbol tokens;
    ``extra_stopwords`` adds corpus-specific words.
    """
    stop = PRONOUNS | PREPOSITIONS | {w.lower() for w in extra_stopwords}
    pos, neg = Counter(), Counter()
    for e in examples:
        (pos if e.label == 1 else neg).update(tokenize(e.caption))
    stats = [TokenStat(tok, pos[tok], neg[tok]) for tok in set(pos) | set(neg)
             if tok not in stop and not is_symbol(tok)]
    stats.sort(key=lambda s: (-s.score, s.token))
    return TextStatReport([s for s in stats if not is_emoji(s.token)], [s for s in stats if is_emoji(s.token)],
                          len(stop))


# ---------------------------------------------------------------------------
# attention dumps and popularity maps
# ---------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    user_id: str
    post_id: str
    tokens: list[str]
    weights: list[float]
    probability: float

    def to_json(self) -> str:
        return dumps_json({"user_id": self.user_id, "post_id": self.post_id, "tokens": self.tokens,
                           "weights": self.weights, "probability": self.probability})


def _display_tokens(example: LabeledExample, vocab: Vocabulary | None, t_max: int) -> list[str]:
    words = tokenize(example.caption)[:t_max]
    if len(words) == len(example.token_ids[:t_max]) and words:
        return words
    if vocab is not None and example.token_ids:
        return [vocab.tokens[i] for i in example.token_ids[:t_max]]
    return [UNK_TOKEN] * max(1, len(example.token_ids[:t_max]))


def export_attention(model: DualAttentionModel, examples: Sequence[LabeledExample],
                     envs: Mapping[str, UserEnvironment] | None, vocab: Vocabulary | None = None,
                     batch_size: int = 256) -> list[AttentionRecord]:
    """Word weights a^q and the output probability for every example, in input order."""
    if not model.cfg.use_explicit_attention or model.cfg.baseline != "none":
        raise InvalidInputError(f"variant {model.cfg.variant!r} has no explicit word attention")
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, envs, model.cfg)
        with no_grad():
            result = model.forward(batch)
        probs = result.probability.data
        for i, e in enumerate(chunk):
            n = int(batch.mask[i].sum())
            weights = [float(w) for w in result.attention[i, :n]]
            out.append(AttentionRecord(e.user_id, e.post_id, _display_tokens(e, vocab, model.cfg.t_max),
                                       weights, float(probs[i])))
    return out


@dataclass
class PopularityHeatmap:
    user_id: str
    post_id: str
    grid: np.ndarray  # [7, 7] probabilities

    def to_json(self) -> str:
        return dumps_json({"user_id": self.user_id, "post_id": self.post_id,
                           "grid": [[float(v) for v in row] for row in self.grid]})


def popularity_heatmap(model: DualAttentionModel, example: LabeledExample, spatial_features,
                       envs: Mapping[str, UserEnvironment] | None) -> PopularityHeatmap:
    """Substitute each grid cell's feature vector for V and record the model's probability."""
    if spatial_features is None:
        raise InvalidInputError(f"post {example.key} has no spatial features")
    grid = np.asarray(spatial_features, dtype=np.float32)
    if grid.ndim != 3 or grid.shape[-1] != model.cfg.d1:
        raise InvalidInputError(f"spatial features must be [rows, cols, {model.cfg.d1}], got {grid.shape}")
    rows, cols, d1 = grid.shape
    batch = make_batch([example] * (rows * cols), envs, model.cfg, images=grid.reshape(rows * cols, d1))
    return PopularityHeatmap(example.user_id, example.post_id, model.predict_proba(batch).reshape(rows, cols))


def write_jsonl(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
