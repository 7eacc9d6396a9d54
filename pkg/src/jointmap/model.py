"""Joint intent and product-category classifier.

The network embeds query words, compares them against trainable label
embeddings (categories and the two intents, concatenated) with cosine
similarity, runs multi-head self-attention over the resulting label-word
compatibility matrix, encodes the words through two independent gated
highway stacks, pools each stack with label-guided word weights, and emits
two heads: per-category logits trained with a focal variant of sigmoid
cross-entropy, and an intent softmax. Gradients are hand-written
per operation and verified against central finite differences.

Attention keeps the compatibility matrix's shape: per head, the query side
is that head's column slice of the matrix while keys and values come from
learned projections (stored as column blocks of one matrix each), so head
outputs concatenate back to the input width and the category/intent row
split stays well-defined.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation
from .corpus import COMMERCIAL, INTENTS, NONCOMMERCIAL
from .errors import ConfigError, DataError, ParseError
from .numerics import (
    ParamStore,
    adam_step,
    cosine_rows,
    cosine_rows_backward,
    dropout_mask,
    row_softmax,
    row_softmax_backward,
    sigmoid,
    softplus,
)

CHECKPOINT_MAGIC = b"JMAP1"


@dataclass
class ModelConfig:
    """Architecture and loss settings.

    ``heads`` defaults to one per query position and must divide
    ``query_len``; the per-head width is ``query_len // heads``. ``alpha``
    is either a scalar or one positive weight per category.
    """

    vocab_size: int
    num_categories: int
    embed_dim: int = 300
    query_len: int = 10
    num_intents: int = 2
    heads: int | None = None
    gamma: float = 1.5
    alpha: object = 1.0
    beta_category: float = 0.5
    beta_intent: float = 0.5
    dropout: float = 0.5
    category_threshold: float = 0.5

    def resolved_heads(self) -> int:
        return self.query_len if self.heads is None else self.heads

    def head_dim(self) -> int:
        return self.query_len // self.resolved_heads()

    def alpha_vector(self) -> np.ndarray:
        if np.isscalar(self.alpha):
            vec = np.full(self.num_categories, float(self.alpha))
        else:
            vec = np.asarray(self.alpha, dtype=np.float64)
        if vec.shape != (self.num_categories,):
            raise ConfigError(
                f"alpha needs one weight per category, got shape {vec.shape}"
            )
        if np.any(vec <= 0):
            raise ConfigError("alpha weights must be positive")
        return vec

    def validate(self) -> None:
        if self.vocab_size < 1 or self.num_categories < 1:
            raise ConfigError("vocab_size and num_categories must be >= 1")
        if self.embed_dim < 1 or self.query_len < 1:
            raise ConfigError("embed_dim and query_len must be >= 1")
        if self.num_intents != len(INTENTS):
            raise ConfigError(f"num_intents must be {len(INTENTS)}")
        heads = self.resolved_heads()
        if heads < 1 or self.query_len % heads != 0:
            raise ConfigError(
                f"head count {heads} must evenly divide query length {self.query_len}"
            )
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.beta_category < 0 or self.beta_intent < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.beta_category == 0 and self.beta_intent == 0:
            raise ConfigError("at least one loss weight must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        self.alpha_vector()


class Vocabulary:
    """Sorted token table with a shared trainable unknown-word slot.

    Padding is not a table row; short queries are padded with all-zero
    embedding rows directly.
    """

    def __init__(self, tokens):
        self.tokens = sorted(set(tokens))
        if not self.tokens:
            raise ConfigError("vocabulary needs at least one token")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.unk_id = len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    @property
    def table_rows(self) -> int:
        return len(self.tokens) + 1

    def encode(self, tokens) -> list:
        return [self._ids.get(tok, self.unk_id) for tok in tokens]

    @classmethod
    def from_token_lists(cls, token_lists) -> "Vocabulary":
        tokens = set()
        for toks in token_lists:
            tokens.update(toks)
        return cls(tokens)


@dataclass
class ForwardTrace:
    """All intermediates of one forward pass, kept for the backward pass."""

    token_ids: list
    pad_mask: np.ndarray
    embedded: np.ndarray
    compat: np.ndarray
    attn_weights: np.ndarray
    attended: np.ndarray
    attended_category: np.ndarray
    attended_intent: np.ndarray
    category_vec: np.ndarray
    intent_vec: np.ndarray
    category_logits: np.ndarray
    intent_logits: np.ndarray
    cache: dict = field(default_factory=dict)


@dataclass
class Prediction:
    intent: str
    categories: frozenset
    intent_probabilities: np.ndarray
    category_probabilities: np.ndarray


def split_attention(attended: np.ndarray, num_categories: int):
    """Row split of the attended matrix into category and intent blocks."""
    return attended[:num_categories], attended[num_categories:]


def pool_representation(gmat: np.ndarray, alpha: np.ndarray, pad_mask: np.ndarray):
    """Label-guided pooling of word encodings into one vector.

    Word scores are the per-position maximum over the label rows of
    ``gmat``; padded positions are masked out before the softmax over
    positions; the result is the weighted sum of ``alpha`` rows. Returns
    the pooled vector and a cache for the backward pass.
    """
    if not pad_mask.any():
        raise DataError("cannot pool a fully padded query")
    word_scores = gmat.max(axis=0)
    argmax_rows = gmat.argmax(axis=0)
    masked = np.where(pad_mask, word_scores, -np.inf)
    weights = row_softmax(masked[None, :])[0]
    pooled = alpha.T @ weights
    cache = {"gmat": gmat, "alpha": alpha, "weights": weights, "argmax": argmax_rows}
    return pooled, cache


def pool_backward(cache: dict, d_pooled: np.ndarray):
    alpha = cache["alpha"]
    weights = cache["weights"]
    d_alpha = np.outer(weights, d_pooled)
    d_weights = alpha @ d_pooled
    d_scores = weights * (d_weights - float(weights @ d_weights))
    d_gmat = np.zeros_like(cache["gmat"])
    np.add.at(d_gmat, (cache["argmax"], np.arange(d_gmat.shape[1])), d_scores)
    return d_gmat, d_alpha


# ------------------------------------------------------------------ losses


def category_cross_entropy(logits, targets) -> float:
    """Two-term binary cross-entropy summed over category slots."""
    s = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return float(np.sum(t * softplus(-s) + (1.0 - t) * softplus(s)))


def category_cross_entropy_grad(logits, targets) -> np.ndarray:
    return sigmoid(np.asarray(logits, dtype=np.float64)) - np.asarray(targets, dtype=np.float64)


def category_focal_loss(logits, targets, gamma: float, alpha=1.0) -> float:
    """Focal sigmoid cross-entropy: easy classes are down-weighted by
    (1 - p_t)^gamma; gamma = 0 with unit alpha reduces to plain
    cross-entropy."""
    s = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    sign = np.where(t > 0.5, 1.0, -1.0)
    u = -sign * s
    complement = sigmoid(u)  # 1 - p_t
    return float(np.sum(alpha * complement**gamma * softplus(u)))


def category_focal_loss_grad(logits, targets, gamma: float, alpha=1.0) -> np.ndarray:
    s = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    sign = np.where(t > 0.5, 1.0, -1.0)
    u = -sign * s
    complement = sigmoid(u)
    inner = gamma * (1.0 - complement) * softplus(u) + complement
    return -sign * alpha * complement**gamma * inner


def intent_cross_entropy(logits, target: int) -> float:
    """Softmax cross-entropy against the gold intent index."""
    s = np.asarray(logits, dtype=np.float64)
    shifted = s - s.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[target])


def intent_cross_entropy_grad(logits, target: int) -> np.ndarray:
    probs = row_softmax(np.asarray(logits, dtype=np.float64)[None, :])[0]
    grad = probs.copy()
    grad[target] -= 1.0
    return grad


def joint_loss(category_term: float, intent_term: float,
               beta_category: float, beta_intent: float) -> float:
    """Weighted sum of the two task losses."""
    if beta_category < 0 or beta_intent < 0:
        raise ConfigError("loss weights must be >= 0")
    if beta_category == 0 and beta_intent == 0:
        raise ConfigError("at least one loss weight must be positive")
    return beta_category * category_term + beta_intent * intent_term


# ------------------------------------------------------------------- model

_HIGHWAY_PREFIXES = {"category": "highway_category", "intent": "highway_intent"}


class JointMap:
    """Joint intent and multi-label category model over a fixed vocabulary."""

    def __init__(self, config: ModelConfig, vocabulary: Vocabulary, seed: int = 0):
        config.validate()
        if config.vocab_size != len(vocabulary):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} does not match "
                f"vocabulary of {len(vocabulary)} tokens"
            )
        self.config = config
        self.vocabulary = vocabulary
        self.alpha = config.alpha_vector()
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        v = config.embed_dim
        n = config.query_len
        c = config.num_categories
        u = config.num_intents

        add = self.store.add
        add("word_embeddings", rng.normal(0.0, 0.1, size=(vocabulary.table_rows, v)))
        add("category_embeddings", rng.normal(0.0, 0.1, size=(c, v)))
        add("intent_embeddings", rng.normal(0.0, 0.1, size=(u, v)))
        add("attn_key_proj", rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n)))
        add("attn_value_proj", rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n)))
        for prefix in _HIGHWAY_PREFIXES.values():
            add(f"{prefix}_gate_w", rng.normal(0.0, 1.0 / np.sqrt(v), size=(v, v)))
            add(f"{prefix}_gate_b", np.full(v, -1.0))  # start carry-biased
            add(f"{prefix}_transform_w", rng.normal(0.0, 1.0 / np.sqrt(v), size=(v, v)))
            add(f"{prefix}_transform_b", np.zeros(v))
        add("category_head_w", rng.normal(0.0, 1.0 / np.sqrt(v), size=(v, c)))
        add("category_head_b", np.zeros(c))
        add("intent_head_w", rng.normal(0.0, 1.0 / np.sqrt(v), size=(v, u)))
        add("intent_head_b", np.zeros(u))

    # ------------------------------------------------------------ pieces

    def embed_query(self, tokens):
        """Token rows from the embedding table, truncated/zero-padded to the
        fixed query length. Returns (matrix, kept ids, pad mask)."""
        if not tokens:
            raise DataError("cannot embed an empty token list")
        n = self.config.query_len
        ids = self.vocabulary.encode(tokens)[:n]
        table = self.store.params["word_embeddings"]
        embedded = np.zeros((n, self.config.embed_dim))
        embedded[: len(ids)] = table[ids]
        pad_mask = np.zeros(n, dtype=bool)
        pad_mask[: len(ids)] = True
        return embedded, ids, pad_mask

    def label_matrix(self) -> np.ndarray:
        return np.vstack(
            [self.store.params["category_embeddings"], self.store.params["intent_embeddings"]]
        )

    def compatibility_matrix(self, embedded: np.ndarray) -> np.ndarray:
        """Cosine similarity of every label embedding against every word
        position; padded (all-zero) positions yield zero columns."""
        return cosine_rows(self.label_matrix(), embedded)

    def multihead_attention(self, compat: np.ndarray):
        """Self-attention over the label rows, one head per column block.

        Returns the attended matrix (same shape as the input), the per-head
        attention weights, and a cache for the backward pass.
        """
        h = self.config.resolved_heads()
        d = self.config.head_dim()
        m, n = compat.shape
        key_full = compat @ self.store.params["attn_key_proj"]
        value_full = compat @ self.store.params["attn_value_proj"]
        queries = compat.reshape(m, h, d).transpose(1, 0, 2)
        keys = key_full.reshape(m, h, d).transpose(1, 0, 2)
        values = value_full.reshape(m, h, d).transpose(1, 0, 2)
        scores = queries @ keys.transpose(0, 2, 1) / np.sqrt(d)
        attn = row_softmax(scores)
        per_head = attn @ values
        attended = per_head.transpose(1, 0, 2).reshape(m, n)
        cache = {"compat": compat, "queries": queries, "keys": keys, "values": values,
                 "attn": attn, "h": h, "d": d}
        return attended, attn, cache

    def _attention_backward(self, cache: dict, d_attended: np.ndarray) -> np.ndarray:
        h, d = cache["h"], cache["d"]
        attn = cache["attn"]
        compat = cache["compat"]
        m, n = compat.shape
        d_per_head = d_attended.reshape(m, h, d).transpose(1, 0, 2)
        d_attn = d_per_head @ cache["values"].transpose(0, 2, 1)
        d_values = attn.transpose(0, 2, 1) @ d_per_head
        d_scores = row_softmax_backward(attn, d_attn) / np.sqrt(d)
        d_queries = d_scores @ cache["keys"]
        d_keys = d_scores.transpose(0, 2, 1) @ cache["queries"]
        d_key_full = d_keys.transpose(1, 0, 2).reshape(m, n)
        d_value_full = d_values.transpose(1, 0, 2).reshape(m, n)
        wk = self.store.params["attn_key_proj"]
        wv = self.store.params["attn_value_proj"]
        self.store.accumulate("attn_key_proj", compat.T @ d_key_full)
        self.store.accumulate("attn_value_proj", compat.T @ d_value_full)
        d_compat = d_key_full @ wk.T + d_value_full @ wv.T
        d_compat += d_queries.transpose(1, 0, 2).reshape(m, n)
        return d_compat

    def highway(self, x: np.ndarray, task: str, training: bool = False, rng=None):
        """Gated highway encoding of word rows: sigmoid gate mixes a relu
        transform (dropout in training) with the carried input."""
        prefix = _HIGHWAY_PREFIXES[task]
        p = self.store.params
        gate_pre = x @ p[f"{prefix}_gate_w"] + p[f"{prefix}_gate_b"]
        gate = sigmoid(gate_pre)
        trans_pre = x @ p[f"{prefix}_transform_w"] + p[f"{prefix}_transform_b"]
        activated = np.maximum(trans_pre, 0.0)
        if training and self.config.dropout > 0:
            mask = dropout_mask(activated.shape, self.config.dropout, rng)
            dropped = activated * mask
        else:
            mask = None
            dropped = activated
        out = gate * dropped + (1.0 - gate) * x
        cache = {"x": x, "gate": gate, "trans_pre": trans_pre, "dropped": dropped,
                 "mask": mask, "prefix": prefix}
        return out, cache

    def _highway_backward(self, cache: dict, d_out: np.ndarray) -> np.ndarray:
        x = cache["x"]
        gate = cache["gate"]
        prefix = cache["prefix"]
        p = self.store.params
        d_gate = d_out * (cache["dropped"] - x)
        d_dropped = d_out * gate
        d_x = d_out * (1.0 - gate)
        d_act = d_dropped if cache["mask"] is None else d_dropped * cache["mask"]
        d_trans_pre = d_act * (cache["trans_pre"] > 0)
        self.store.accumulate(f"{prefix}_transform_w", x.T @ d_trans_pre)
        self.store.accumulate(f"{prefix}_transform_b", d_trans_pre.sum(axis=0))
        d_x += d_trans_pre @ p[f"{prefix}_transform_w"].T
        d_gate_pre = d_gate * gate * (1.0 - gate)
        self.store.accumulate(f"{prefix}_gate_w", x.T @ d_gate_pre)
        self.store.accumulate(f"{prefix}_gate_b", d_gate_pre.sum(axis=0))
        d_x += d_gate_pre @ p[f"{prefix}_gate_w"].T
        return d_x

    # ----------------------------------------------------------- forward

    def forward(self, tokens, training: bool = False, rng=None) -> ForwardTrace:
        """Full forward pass; keeps every intermediate needed for backward.

        In training mode dropout needs the rng; evaluation mode is
        deterministic.
        """
        if training and self.config.dropout > 0 and rng is None:
            raise ConfigError("training-mode forward needs an rng for dropout")
        cfg = self.config
        embedded, ids, pad_mask = self.embed_query(tokens)
        compat = self.compatibility_matrix(embedded)
        attended, attn_weights, attn_cache = self.multihead_attention(compat)
        att_cat, att_int = split_attention(attended, cfg.num_categories)

        hw_cat, hw_cat_cache = self.highway(embedded, "category", training, rng)
        hw_int, hw_int_cache = self.highway(embedded, "intent", training, rng)

        cat_vec, pool_cat_cache = pool_representation(att_cat, hw_cat, pad_mask)
        int_vec, pool_int_cache = pool_representation(att_int, hw_int, pad_mask)

        if training and cfg.dropout > 0:
            cat_mask = dropout_mask(cat_vec.shape, cfg.dropout, rng)
            int_mask = dropout_mask(int_vec.shape, cfg.dropout, rng)
        else:
            cat_mask = int_mask = None
        cat_in = cat_vec * cat_mask if cat_mask is not None else cat_vec
        int_in = int_vec * int_mask if int_mask is not None else int_vec

        p = self.store.params
        category_logits = cat_in @ p["category_head_w"] + p["category_head_b"]
        intent_logits = int_in @ p["intent_head_w"] + p["intent_head_b"]

        cache = {
            "ids": ids,
            "attn": attn_cache,
            "hw_cat": hw_cat_cache,
            "hw_int": hw_int_cache,
            "pool_cat": pool_cat_cache,
            "pool_int": pool_int_cache,
            "cat_mask": cat_mask,
            "int_mask": int_mask,
            "cat_in": cat_in,
            "int_in": int_in,
        }
        return ForwardTrace(
            token_ids=ids,
            pad_mask=pad_mask,
            embedded=embedded,
            compat=compat,
            attn_weights=attn_weights,
            attended=attended,
            attended_category=att_cat,
            attended_intent=att_int,
            category_vec=cat_vec,
            intent_vec=int_vec,
            category_logits=category_logits,
            intent_logits=intent_logits,
            cache=cache,
        )

    # ---------------------------------------------------------- backward

    def backward(self, trace: ForwardTrace, d_category_logits, d_intent_logits) -> None:
        """Accumulate parameter gradients for one record's logit gradients."""
        cfg = self.config
        cache = trace.cache
        p = self.store.params

        d_category_logits = np.asarray(d_category_logits, dtype=np.float64)
        d_intent_logits = np.asarray(d_intent_logits, dtype=np.float64)

        self.store.accumulate("category_head_w", np.outer(cache["cat_in"], d_category_logits))
        self.store.accumulate("category_head_b", d_category_logits)
        d_cat_in = p["category_head_w"] @ d_category_logits
        self.store.accumulate("intent_head_w", np.outer(cache["int_in"], d_intent_logits))
        self.store.accumulate("intent_head_b", d_intent_logits)
        d_int_in = p["intent_head_w"] @ d_intent_logits

        if cache["cat_mask"] is not None:
            d_cat_in = d_cat_in * cache["cat_mask"]
        if cache["int_mask"] is not None:
            d_int_in = d_int_in * cache["int_mask"]

        d_att_cat, d_hw_cat = pool_backward(cache["pool_cat"], d_cat_in)
        d_att_int, d_hw_int = pool_backward(cache["pool_int"], d_int_in)

        d_embedded = self._highway_backward(cache["hw_cat"], d_hw_cat)
        d_embedded += self._highway_backward(cache["hw_int"], d_hw_int)

        d_attended = np.vstack([d_att_cat, d_att_int])
        d_compat = self._attention_backward(cache["attn"], d_attended)

        labels = self.label_matrix()
        d_labels, d_embedded_cos = cosine_rows_backward(
            labels, trace.embedded, trace.compat, d_compat
        )
        d_embedded += d_embedded_cos
        self.store.accumulate("category_embeddings", d_labels[: cfg.num_categories])
        self.store.accumulate("intent_embeddings", d_labels[cfg.num_categories :])

        ids = cache["ids"]
        if ids:
            self.store.accumulate_rows("word_embeddings", ids, d_embedded[: len(ids)])

    # -------------------------------------------------------------- loss

    def loss_and_grad(self, tokens, intent_index: int, category_targets,
                      training: bool = True, rng=None, accumulate: bool = True) -> dict:
        """Forward, loss stack, and (optionally) gradient accumulation.

        Non-commercial records contribute no category-loss gradient: their
        category targets are undefined, so that term is masked to zero.
        """
        cfg = self.config
        trace = self.forward(tokens, training=training, rng=rng)
        is_commercial = 1.0 if intent_index == INTENTS.index(COMMERCIAL) else 0.0
        targets = np.asarray(category_targets, dtype=np.float64)
        focal = category_focal_loss(trace.category_logits, targets, cfg.gamma, self.alpha)
        intent = intent_cross_entropy(trace.intent_logits, intent_index)
        total = joint_loss(is_commercial * focal, intent, cfg.beta_category, cfg.beta_intent)
        if accumulate:
            d_cat = (
                cfg.beta_category
                * is_commercial
                * category_focal_loss_grad(trace.category_logits, targets, cfg.gamma, self.alpha)
            )
            d_int = cfg.beta_intent * intent_cross_entropy_grad(trace.intent_logits, intent_index)
            self.backward(trace, d_cat, d_int)
        return {"total": total, "category_focal": focal, "intent": intent,
                "category_masked": is_commercial * focal}

    # ---------------------------------------------------------- predict

    def predict(self, tokens, threshold: float | None = None) -> Prediction:
        """Evaluation-mode prediction: intent by softmax argmax, categories
        thresholded on sigmoid scores and reported only for commercial
        predictions."""
        trace = self.forward(tokens, training=False)
        intent_probs = row_softmax(trace.intent_logits[None, :])[0]
        intent = INTENTS[int(np.argmax(intent_probs))]
        category_probs = sigmoid(trace.category_logits)
        cutoff = self.config.category_threshold if threshold is None else threshold
        if intent == COMMERCIAL:
            categories = frozenset(int(c) for c in np.nonzero(category_probs > cutoff)[0])
        else:
            categories = frozenset()
        return Prediction(intent, categories, intent_probs, category_probs)

    # ------------------------------------------------------- persistence

    def save(self, path) -> None:
        """Binary checkpoint: magic, config block, vocabulary, parameters in
        declaration order, all little-endian float64."""
        cfg = self.config
        parts = [CHECKPOINT_MAGIC]
        parts.append(struct.pack("<I", len(self.vocabulary.tokens)))
        for token in self.vocabulary.tokens:
            raw = token.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(
            struct.pack(
                "<IIIIII",
                cfg.vocab_size,
                cfg.embed_dim,
                cfg.query_len,
                cfg.num_categories,
                cfg.num_intents,
                cfg.resolved_heads(),
            )
        )
        parts.append(
            struct.pack(
                "<ddddd",
                cfg.gamma,
                cfg.beta_category,
                cfg.beta_intent,
                cfg.dropout,
                cfg.category_threshold,
            )
        )
        parts.append(self.alpha.astype("<f8").tobytes())
        parts.append(struct.pack("<I", len(self.store.params)))
        for name, param in self.store.params.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", param.ndim))
            for dim in param.shape:
                parts.append(struct.pack("<I", dim))
            parts.append(param.astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "JointMap":
        raw = Path(path).read_bytes()
        if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ParseError(path, 0, "bad magic bytes for model checkpoint")
        buf = memoryview(raw)
        offset = len(CHECKPOINT_MAGIC)

        def read(fmt):
            nonlocal offset
            values = struct.unpack_from(fmt, buf, offset)
            offset += struct.calcsize(fmt)
            return values

        def read_str():
            nonlocal offset
            (length,) = read("<H")
            value = bytes(buf[offset : offset + length]).decode("utf-8")
            offset += length
            return value

        (token_count,) = read("<I")
        tokens = [read_str() for _ in range(token_count)]
        vocab_size, embed_dim, query_len, num_categories, num_intents, heads = read("<IIIIII")
        gamma, beta_category, beta_intent, dropout, threshold = read("<ddddd")
        alpha = np.frombuffer(buf, dtype="<f8", count=num_categories, offset=offset).copy()
        offset += 8 * num_categories
        config = ModelConfig(
            vocab_size=vocab_size,
            num_categories=num_categories,
            embed_dim=embed_dim,
            query_len=query_len,
            num_intents=num_intents,
            heads=heads,
            gamma=gamma,
            alpha=alpha,
            beta_category=beta_category,
            beta_intent=beta_intent,
            dropout=dropout,
            category_threshold=threshold,
        )
        model = cls(config, Vocabulary(tokens), seed=0)
        (param_count,) = read("<I")
        if param_count != len(model.store.params):
            raise ParseError(path, 0, f"checkpoint has {param_count} parameters, "
                                      f"expected {len(model.store.params)}")
        for _ in range(param_count):
            name = read_str()
            if name not in model.store.params:
                raise ParseError(path, 0, f"unknown parameter {name!r} in checkpoint")
            (ndim,) = read("<B")
            shape = tuple(read("<I")[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).copy()
            offset += 8 * size
            if shape != model.store.params[name].shape:
                raise ParseError(path, 0, f"shape mismatch for parameter {name!r}")
            model.store.params[name][...] = values.reshape(shape)
        return model


def load_pretrained_embeddings(model: JointMap, path) -> int:
    """Copy externally trained word vectors into matching vocabulary rows.

    Text format, one token per line: ``token v1 v2 ... vD``. Returns the
    number of vocabulary rows filled; unknown tokens are skipped.
    """
    path = Path(path)
    table = model.store.params["word_embeddings"]
    loaded = 0
    ids = {tok: i for i, tok in enumerate(model.vocabulary.tokens)}
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        token, values = parts[0], parts[1:]
        if len(values) != model.config.embed_dim:
            raise ParseError(path, no, f"expected {model.config.embed_dim} values, "
                                       f"got {len(values)}")
        row = ids.get(token)
        if row is None:
            continue
        try:
            table[row] = np.array([float(v) for v in values])
        except ValueError:
            raise ParseError(path, no, "non-numeric vector component") from None
        loaded += 1
    return loaded


# ---------------------------------------------------------------- training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_macro_f1_intent: float
    val_macro_f1_category: float

    def as_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": round(self.train_loss, 10),
                "val_macro_f1_intent": round(self.val_macro_f1_intent, 10),
                "val_macro_f1_category": round(self.val_macro_f1_category, 10),
            },
            sort_keys=True,
        )


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int


def _category_targets(record, num_categories: int) -> np.ndarray:
    targets = np.zeros(num_categories)
    for cid in record.categories:
        if not 0 <= cid < num_categories:
            raise ConfigError(f"category id {cid} outside model range")
        targets[cid] = 1.0
    return targets


def evaluate_model(model: JointMap, records):
    """Macro F1 on both tasks; category scores count commercial-gold records
    only (non-commercial gold has no category set by construction)."""
    classes = list(range(model.config.num_categories))
    intent_pred, intent_gold = [], []
    cat_pred, cat_gold = [], []
    for rec in records:
        pred = model.predict(rec.tokens)
        intent_pred.append(pred.intent)
        intent_gold.append(rec.intent)
        if rec.intent == COMMERCIAL:
            cat_pred.append(pred.categories)
            cat_gold.append(rec.categories)
    intent_counts = evaluation.count_predictions(intent_pred, intent_gold, INTENTS)
    intent_macro = evaluation.f1_macro(intent_counts)
    intent_micro = evaluation.f1_micro(intent_counts)
    if cat_gold:
        cat_counts = evaluation.count_predictions(cat_pred, cat_gold, classes)
        cat_macro = evaluation.f1_macro(cat_counts)
        cat_micro = evaluation.f1_micro(cat_counts)
    else:
        cat_counts = evaluation.count_predictions([], [], classes)
        cat_macro = cat_micro = 0.0
    return {
        "intent_macro": intent_macro,
        "intent_micro": intent_micro,
        "category_macro": cat_macro,
        "category_micro": cat_micro,
        "intent_counts": intent_counts,
        "category_counts": cat_counts,
    }


def train_model(model: JointMap, dataset, epochs: int, batch_size: int = 64,
                lr: float = 0.001, seed: int = 0, log=None) -> TrainReport:
    """Minibatch Adam training with per-epoch validation.

    Shuffles each epoch, averages gradients over the minibatch, and keeps
    the parameters from the best validation epoch (sum of the two macro-F1
    scores). Deterministic under the seed.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    train = dataset.split("train")
    val = dataset.split("val")
    if not train:
        raise ConfigError("training needs a non-empty train split")
    rng = np.random.default_rng(seed)
    num_categories = model.config.num_categories
    prepared = [
        (rec.tokens, INTENTS.index(rec.intent), _category_targets(rec, num_categories))
        for rec in train
    ]

    stats = []
    best_score = -1.0
    best_epoch = 0
    best_params = model.store.copy_params()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(prepared))
        total_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            model.store.clear_grads()
            model.store.ensure_grads()
            for i in batch:
                tokens, intent_index, targets = prepared[int(i)]
                losses = model.loss_and_grad(tokens, intent_index, targets,
                                             training=True, rng=rng)
                total_loss += losses["total"]
            model.store.scale_grads(1.0 / len(batch))
            adam_step(model.store, lr)
        train_loss = total_loss / len(prepared)

        if val:
            scores = evaluate_model(model, val)
            val_intent, val_category = scores["intent_macro"], scores["category_macro"]
        else:
            val_intent = val_category = 0.0
        stat = EpochStats(epoch, train_loss, val_intent, val_category)
        stats.append(stat)
        if log is not None:
            log(stat)
        combined = val_intent + val_category
        if combined > best_score:
            best_score = combined
            best_epoch = epoch
            best_params = model.store.copy_params()
    model.store.load_params(best_params)
    return TrainReport(stats, best_epoch)
