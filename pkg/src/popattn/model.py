"""Dual-attention popularity classifier and its ablation/baseline variants.

Data flow for the full model, per post::

    caption ids --embedding--> LSTM --> Q^e [T, d2]
    image V [d1] -------------------------------+
    explicit attention(V, Q^e) --> V_hat, Q_hat, a^q
    implicit attention(I_e, T_e) --> e_w
    h_w = V_hat + Q_hat ; O1 = relu(W1 [h_w, e_w]) ; O2 = sigmoid(W2 O1)

Everything is batched: a :class:`Batch` holds B posts padded to a common T.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import PAD, T_MAX, UNK, LabeledExample
from .environment import UserEnvironment, default_environment
from .errors import CompatibilityError, InvalidInputError, ShapeError
from .formats import dumps_json
from .tensor import Parameter, Tensor

BASELINES = ("none", "visual", "textual", "early", "late")

# name -> (use_explicit_attention, use_environment, use_implicit_attention, baseline)
VARIANTS: dict[str, tuple[bool, bool, bool, str]] = {
    "dual": (True, True, True, "none"),
    "e-attn": (True, False, False, "none"),
    "env": (False, True, False, "none"),
    "env-i-attn": (False, True, True, "none"),
    "e-attn-env": (True, True, False, "none"),
    "visual": (False, False, False, "visual"),
    "textual": (False, False, False, "textual"),
    "early": (False, False, False, "early"),
    "late": (False, False, False, "late"),
}
ABLATION_VARIANTS = ("early", "e-attn", "env", "env-i-attn", "e-attn-env", "dual")


@dataclass
class ModelConfig:
    d1: int
    vocab_size: int
    topics: int
    d2: int = 512
    k: int = 128
    d_env: int = 512
    d_fuse: int = 512
    t_max: int = T_MAX
    use_explicit_attention: bool = True
    use_environment: bool = True
    use_implicit_attention: bool = True
    baseline: str = "none"

    def __post_init__(self):
        for name in ("d1", "vocab_size", "topics", "d2", "k", "d_env", "d_fuse", "t_max"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"ModelConfig.{name} must be positive")
        if self.baseline not in BASELINES:
            raise InvalidInputError(f"unknown baseline {self.baseline!r}")
        if self.vocab_size <= UNK:
            raise InvalidInputError("vocabulary must contain at least PAD and UNK")

    @classmethod
    def for_variant(cls, variant: str, **dims) -> "ModelConfig":
        try:
            e_attn, env, i_attn, baseline = VARIANTS[variant]
        except KeyError:
            raise InvalidInputError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return cls(use_explicit_attention=e_attn, use_environment=env, use_implicit_attention=i_attn,
                   baseline=baseline, **dims)

    @property
    def variant(self) -> str:
        key = (self.use_explicit_attention, self.use_environment, self.use_implicit_attention, self.baseline)
        for name, flags in VARIANTS.items():
            if flags == key:
                return name
        return "custom"

    @property
    def needs_environment(self) -> bool:
        return self.baseline == "none" and self.use_environment

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, T] int64
    mask: np.ndarray  # [B, T] bool
    image: np.ndarray  # [B, d1]
    env_image: np.ndarray  # [B, d1]
    env_topics: np.ndarray  # [B, K]
    labels: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class ForwardOutput:
    probability: Tensor  # [B]
    attention: np.ndarray | None  # [B, T] word weights when explicit attention ran


def make_batch(examples: Sequence[LabeledExample], envs: Mapping[str, UserEnvironment] | None,
               cfg: ModelConfig, images: np.ndarray | None = None) -> Batch:
    """Pad captions to the longest in the batch; empty captions become [UNK].

    ``images`` overrides the examples' image features (used by heatmaps).
    """
    if not examples:
        raise InvalidInputError("empty batch")
    ids = [list(e.token_ids[:cfg.t_max]) or [UNK] for e in examples]
    width = max(len(x) for x in ids)
    tok = np.full((len(ids), width), PAD, dtype=np.int64)
    for i, x in enumerate(ids):
        tok[i, :len(x)] = x
    img = np.stack([np.asarray(e.image_features, dtype=np.float32) for e in examples]) if images is None \
        else np.asarray(images, dtype=np.float32)
    if img.shape[1] != cfg.d1:
        raise ShapeError(f"image features have width {img.shape[1]}, model expects d1={cfg.d1}")
    envs = envs or {}
    env_rows = [envs.get(e.user_id) or default_environment(e.user_id, cfg.d1, cfg.topics) for e in examples]
    env_img = np.stack([r.image for r in env_rows]).astype(np.float32)
    env_top = np.stack([r.topics for r in env_rows]).astype(np.float32)
    if cfg.needs_environment and (env_img.shape[1] != cfg.d1 or env_top.shape[1] != cfg.topics):
        raise ShapeError(f"environment widths {env_img.shape[1]}/{env_top.shape[1]} vs d1={cfg.d1}, K={cfg.topics}")
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return Batch(tok, tok != PAD, img, env_img, env_top, labels)


class Linear:
    """Affine layer; weight is [out, in] and bias starts at zero."""

    def __init__(self, rng, n_in: int, n_out: int, name: str):
        self.weight = T.glorot_uniform(rng, (n_out, n_in), f"{name}.weight")
        self.bias = T.zeros_param((n_out,), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Head:
    """O1 = relu(W1 x), O2 = sigmoid(W2 O1)."""

    def __init__(self, rng, n_in: int, d_fuse: int, name: str):
        self.hidden = Linear(rng, n_in, d_fuse, f"{name}.W_1")
        self.out = Linear(rng, d_fuse, 1, f"{name}.W_2")

    def __call__(self, x: Tensor) -> Tensor:
        o1 = T.relu(self.hidden(x))
        o2 = T.sigmoid(self.out(o1))
        return T.reshape(o2, (o2.shape[0],))

    def parameters(self) -> list[Parameter]:
        return self.hidden.parameters() + self.out.parameters()


class DualAttentionModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d1, d2, k, K = cfg.d1, cfg.d2, cfg.k, cfg.topics
        self._params: list[Parameter] = []
        base = cfg.baseline

        self.embedding = self.lstm = None
        if base != "visual":
            self.embedding = self._add(T.glorot_uniform(rng, (cfg.vocab_size, d2), "embedding"))
            self.lstm = T.LSTMParams(
                self._add(T.glorot_uniform(rng, (4 * d2, d2), "lstm.w_input")),
                self._add(T.glorot_uniform(rng, (4 * d2, d2), "lstm.w_hidden")),
                self._add(T.zeros_param((4 * d2,), "lstm.bias")),
            )
        self.fc1 = self.fc2 = None
        if base != "textual":
            self.fc1 = self._layer(rng, d1, d2, "image.fc1")
            self.fc2 = self._layer(rng, d2, d2, "image.fc2")

        self.W_a = self.W_q = self.W_v = self.W_h = None
        self.W_i = self.W_t = self.W_i2 = self.W_t2 = self.env_out = self.env_fc = None
        self.head = self.head_visual = self.head_textual = None
        if base == "none":
            if cfg.use_explicit_attention:
                self.W_a = self._layer(rng, d1, d2, "explicit.W_a")
                self.W_q = self._layer(rng, d2, k, "explicit.W_q")
                self.W_v = self._layer(rng, d1, k, "explicit.W_v")
                self.W_h = self._layer(rng, k, 1, "explicit.W_h")
            fuse_in = d2
            if cfg.use_environment:
                fuse_in += cfg.d_env
                if cfg.use_implicit_attention:
                    self.W_i = self._layer(rng, d1, cfg.d_env, "implicit.W_i")
                    self.W_t = self._layer(rng, K, cfg.d_env, "implicit.W_t")
                    self.W_i2 = self._layer(rng, d1, cfg.d_env, "implicit.W_i2")
                    self.W_t2 = self._layer(rng, K, cfg.d_env, "implicit.W_t2")
                    self.env_out = self._layer(rng, cfg.d_env, cfg.d_env, "implicit.out")
                else:
                    self.env_fc = self._layer(rng, d1 + K, cfg.d_env, "env.fc")
            self.head = self._head(rng, fuse_in, "fusion")
        elif base == "visual":
            self.head_visual = self._head(rng, d2, "visual")
        elif base == "textual":
            self.head_textual = self._head(rng, d2, "textual")
        elif base == "early":
            self.head = self._head(rng, 2 * d2, "early")
        elif base == "late":
            self.head_visual = self._head(rng, d2, "visual")
            self.head_textual = self._head(rng, d2, "textual")

        names = [p.name for p in self._params]
        assert len(names) == len(set(names)), "parameter names must be unique"

    def _add(self, p: Parameter) -> Parameter:
        self._params.append(p)
        return p

    def _layer(self, rng, n_in, n_out, name) -> Linear:
        layer = Linear(rng, n_in, n_out, name)
        self._params.extend(layer.parameters())
        return layer

    def _head(self, rng, n_in, name) -> Head:
        head = Head(rng, n_in, self.cfg.d_fuse, name)
        self._params.extend(head.parameters())
        return head

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._params}

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    @property
    def dtype(self):
        return self._params[0].dtype

    def astype(self, dtype) -> "DualAttentionModel":
        """Recast every parameter in place (float64 is the gradient-oracle path)."""
        for p in self._params:
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.named_parameters()
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise CompatibilityError(f"checkpoint parameters differ: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise CompatibilityError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def _const(self, x: np.ndarray) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.dtype))

    # -- components --------------------------------------------------------

    def encode_caption(self, token_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Q^e [B, T, d2]: LSTM states over embedded tokens (pads sit at the end)."""
        ids = np.asarray(token_ids)
        if ids.shape[-1] > self.cfg.t_max:
            raise InvalidInputError(f"caption length {ids.shape[-1]} exceeds t_max={self.cfg.t_max}")
        return T.lstm_forward(self.lstm, T.embedding_lookup(self.embedding, ids))

    def project_image(self, image: Tensor) -> Tensor:
        """V_hat = FC2(tanh(FC1(V)))."""
        return self.fc2(T.tanh(self.fc1(image)))

    def explicit_attention(self, image: Tensor, q_enc: Tensor, mask: np.ndarray):
        """Return (V_hat [B, d2], Q_hat [B, d2], a^q [B, T])."""
        B, Tn, d2 = q_enc.shape
        u = T.reshape(self.W_a(image), (B, 1, d2))
        affinity = T.tanh(T.sum(q_enc * u, axis=-1))  # A [B, T]
        image_term = T.reshape(self.W_v(image), (B, 1, self.cfg.k))
        h_q = T.tanh(self.W_q(q_enc) + T.reshape(affinity, (B, Tn, 1)) * image_term)  # [B, T, k]
        scores = T.reshape(self.W_h(h_q), (B, Tn))
        weights = T.masked_softmax(scores, mask)
        q_hat = self._weighted_sum(weights, q_enc)
        return self.project_image(image), q_hat, weights

    def _weighted_sum(self, weights: Tensor, q_enc: Tensor) -> Tensor:
        B, Tn, _ = q_enc.shape
        return T.sum(T.reshape(weights, (B, Tn, 1)) * q_enc, axis=1)

    def _mean_pool(self, q_enc: Tensor, mask: np.ndarray) -> Tensor:
        m = np.asarray(mask, dtype=np.float64)
        return self._weighted_sum(self._const(m / m.sum(axis=1, keepdims=True)), q_enc)

    def implicit_mapping(self, env_image: Tensor, env_topics: Tensor) -> Tensor:
        """H = W_i2 I_e + W_t2 T_e + relu(W_i I_e) * relu(W_t T_e)."""
        joint = T.relu(self.W_i(env_image)) * T.relu(self.W_t(env_topics))
        return self.W_i2(env_image) + self.W_t2(env_topics) + joint

    def implicit_attention(self, env_image: Tensor, env_topics: Tensor) -> Tensor:
        """e_w = relu(out(H))."""
        return T.relu(self.env_out(self.implicit_mapping(env_image, env_topics)))

    def plain_environment(self, env_image: Tensor, env_topics: Tensor) -> Tensor:
        return T.relu(self.env_fc(T.concat([env_image, env_topics], axis=-1)))

    def fuse_and_classify(self, v_hat: Tensor, q_hat: Tensor, e_w: Tensor | None) -> Tensor:
        if v_hat.shape != q_hat.shape:
            raise ShapeError(f"V_hat {v_hat.shape} and Q_hat {q_hat.shape} must match to add")
        h_w = v_hat + q_hat
        return self.head(h_w if e_w is None else T.concat([h_w, e_w], axis=-1))

    # -- full pass ---------------------------------------------------------

    def forward(self, batch: Batch) -> ForwardOutput:
        cfg = self.cfg
        mask = batch.mask
        if not mask.any(axis=1).all():
            raise InvalidInputError("a caption has no unmasked token")
        image = self._const(batch.image)
        base = cfg.baseline
        q_enc = self.encode_caption(batch.token_ids, mask) if base != "visual" else None

        if base == "visual":
            return ForwardOutput(self.head_visual(self.project_image(image)), None)
        if base == "textual":
            return ForwardOutput(self.head_textual(self._mean_pool(q_enc, mask)), None)
        if base == "early":
            joint = T.concat([self.project_image(image), self._mean_pool(q_enc, mask)], axis=-1)
            return ForwardOutput(self.head(joint), None)
        if base == "late":
            p_v = self.head_visual(self.project_image(image))
            p_t = self.head_textual(self._mean_pool(q_enc, mask))
            return ForwardOutput(T.scale(p_v + p_t, 0.5), None)

        attention = None
        if cfg.use_explicit_attention:
            v_hat, q_hat, weights = self.explicit_attention(image, q_enc, mask)
            attention = weights.data
        else:
            v_hat, q_hat = self.project_image(image), self._mean_pool(q_enc, mask)
        e_w = None
        if cfg.use_environment:
            env_image, env_topics = self._const(batch.env_image), self._const(batch.env_topics)
            if cfg.use_implicit_attention:
                e_w = self.implicit_attention(env_image, env_topics)
            else:
                e_w = self.plain_environment(env_image, env_topics)
        return ForwardOutput(self.fuse_and_classify(v_hat, q_hat, e_w), attention)

    def loss(self, batch: Batch) -> Tensor:
        return T.bce_loss(self.forward(batch).probability, batch.labels)

    def predict_proba(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            return self.forward(batch).probability.data.astype(np.float64)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(checkpoint_path, manifest_path, model: DualAttentionModel,
               vocab_hash: str = "", lda_hash: str = "") -> None:
    T.save_checkpoint(checkpoint_path, model.parameters(), meta={"variant": model.cfg.variant})
    manifest = {"model_config": model.cfg.to_dict(), "variant": model.cfg.variant,
                "vocab_hash": vocab_hash, "lda_hash": lda_hash}
    Path(manifest_path).write_text(dumps_json(manifest) + "\n", encoding="utf-8")


def load_model(checkpoint_path, manifest_path, vocab_hash: str | None = None,
               lda_hash: str | None = None) -> DualAttentionModel:
    """Rebuild a model from its manifest and checkpoint, rejecting mismatched artifacts."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if vocab_hash is not None and manifest.get("vocab_hash") != vocab_hash:
        raise CompatibilityError(f"{manifest_path}: vocabulary hash differs from the current vocabulary")
    if lda_hash is not None and manifest.get("lda_hash") != lda_hash:
        raise CompatibilityError(f"{manifest_path}: LDA model hash differs from the current topic model")
    model = DualAttentionModel(ModelConfig.from_dict(manifest["model_config"]))
    arrays, _ = T.load_checkpoint(checkpoint_path)
    model.load_state_dict(arrays)
    return model
