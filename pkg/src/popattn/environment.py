"""Per-user environments: mean image feature and mean topic distribution."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import LabeledExample, read_features, write_features
from .errors import FormatError, InvalidInputError
from .formats import dumps_json


@dataclass
class UserEnvironment:
    user_id: str
    image: np.ndarray  # mean image feature, d1
    topics: np.ndarray  # mean topic distribution, K
    n_posts_used: int


def default_environment(user_id: str, d1: int, n_topics: int) -> UserEnvironment:
    """Environment for a user with no training posts: zero image, uniform topics."""
    return UserEnvironment(user_id, np.zeros(d1, dtype=np.float32),
                           np.full(n_topics, 1.0 / n_topics, dtype=np.float32), 0)


def compute_environments(examples: Sequence[LabeledExample],
                         topics: Mapping[tuple[str, str], np.ndarray]) -> dict[str, UserEnvironment]:
    """Average each user's image features and topic vectors.

    ``examples`` should be the training split only; ``topics`` maps each
    example key to its topic distribution.
    """
    groups: dict[str, list[LabeledExample]] = defaultdict(list)
    for e in examples:
        groups[e.user_id].append(e)
    if not groups:
        raise InvalidInputError("no examples to build environments from")
    envs = {}
    for user, group in sorted(groups.items()):
        try:
            topic_rows = [topics[e.key] for e in group]
        except KeyError as exc:
            raise InvalidInputError(f"no topic distribution for post {exc.args[0]}") from None
        image = np.mean(np.stack([np.asarray(e.image_features, dtype=np.float64) for e in group]), axis=0)
        topic = np.mean(np.stack([np.asarray(t, dtype=np.float64) for t in topic_rows]), axis=0)
        envs[user] = UserEnvironment(user, image.astype(np.float32), topic.astype(np.float32), len(group))
    return envs


def write_environments(index_path, payload_path, envs: Mapping[str, UserEnvironment]) -> None:
    """JSON Lines index (user, count, row) plus a features-format payload of [image | topics] rows."""
    users = sorted(envs)
    if not users:
        raise InvalidInputError("no environments to write")
    d1, K = envs[users[0]].image.size, envs[users[0]].topics.size
    rows = np.stack([np.concatenate([envs[u].image, envs[u].topics]).astype(np.float32) for u in users])
    write_features(payload_path, rows)
    lines = [dumps_json({"user_id": u, "n_posts_used": envs[u].n_posts_used, "row": i, "d1": d1, "topics": K})
             for i, u in enumerate(users)]
    Path(index_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_environments(index_path, payload_path) -> dict[str, UserEnvironment]:
    rows = read_features(payload_path)
    envs = {}
    for lineno, line in enumerate(Path(index_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        r, d1, K = int(obj["row"]), int(obj["d1"]), int(obj["topics"])
        if not 0 <= r < rows.shape[0] or rows.shape[1] != d1 + K:
            raise FormatError(f"{index_path}:{lineno}: row {r} / width {d1 + K} disagree with payload {rows.shape}")
        envs[obj["user_id"]] = UserEnvironment(obj["user_id"], rows[r, :d1].copy(), rows[r, d1:].copy(),
                                               int(obj["n_posts_used"]))
    return envs
