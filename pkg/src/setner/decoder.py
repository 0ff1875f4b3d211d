"""Entity set decoder: learnable queries to (category, left, right) distributions.

A fixed set of query vectors passes through a stack of decoder layers.
Each layer optionally lets the queries interact through self-attention,
attends over the encoder output H through cross-attention, and applies a
feed-forward block; every sub-block is wrapped with a residual connection
and post-layer-normalization. All queries are decoded in a single parallel
pass; no prediction feeds back into another.

The classification head maps each output embedding to a distribution over
the real categories plus the null label. Boundary heads duplicate the
output embedding across token positions, join it with H, and score each
position, which yields left/right distributions over the sentence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Entity
from .encoder import SequenceEncoding, normal_init, uniform_init


@dataclass
class DecoderConfig:
    n_queries: int = 60
    layers: int = 3
    heads: int = 8
    ffn_hidden: Optional[int] = None  # defaults to 4 * d
    head_hidden: Optional[int] = None  # defaults to d
    dropout: float = 0.1
    interaction: bool = True  # self-attention between queries

    def validate(self, d: int) -> None:
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be >= 1")
        if d % self.heads != 0:
            raise ValueError(f"model width {d} not divisible by {self.heads} heads")


@dataclass
class PredictionSet:
    """Distributions for one sentence: one row per query."""

    p_class: ad.Tensor  # (N, C+1)
    p_left: ad.Tensor  # (N, length)
    p_right: ad.Tensor  # (N, length)
    embeddings: ad.Tensor  # (N, d)
    length: int


@dataclass(frozen=True)
class PredictedEntity:
    left: int
    right: int
    category: int
    score: float = field(compare=False)

    def as_entity(self) -> Entity:
        return Entity(self.left, self.right, self.category)


class AttentionParams:
    """Projection matrices for one multi-head attention block."""

    def __init__(self, d: int, rng, dtype):
        self.wq = ad.tensor(uniform_init(rng, d, (d, d), dtype), requires_grad=True)
        self.wk = ad.tensor(uniform_init(rng, d, (d, d), dtype), requires_grad=True)
        self.wv = ad.tensor(uniform_init(rng, d, (d, d), dtype), requires_grad=True)
        self.wo = ad.tensor(uniform_init(rng, d, (d, d), dtype), requires_grad=True)

    def named(self, prefix: str):
        return [
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wo", self.wo),
        ]


class LayerNormParams:
    def __init__(self, d: int, dtype):
        self.gain = ad.tensor(np.ones((1, d), dtype=dtype), requires_grad=True)
        self.bias = ad.tensor(np.zeros((1, d), dtype=dtype), requires_grad=True)

    def named(self, prefix: str):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


def multi_head(
    q: ad.Tensor,
    k: ad.Tensor,
    v: ad.Tensor,
    params: AttentionParams,
    n_heads: int,
    n_groups: int = 1,
    key_mask: Optional[np.ndarray] = None,
    keys_time_major: bool = False,
) -> ad.Tensor:
    """Multi-head attention: per-head projections, attention, output projection."""
    qp = ad.matmul(q, params.wq)
    kp = ad.matmul(k, params.wk)
    vp = ad.matmul(v, params.wv)
    mixed = ad.mha_core(qp, kp, vp, n_heads, n_groups, key_mask, keys_time_major)
    return ad.matmul(mixed, params.wo)


class DecoderLayer:
    def __init__(self, d: int, ffn_hidden: int, rng, dtype):
        self.self_attn = AttentionParams(d, rng, dtype)
        self.ln_self = LayerNormParams(d, dtype)
        self.cross_attn = AttentionParams(d, rng, dtype)
        self.ln_cross = LayerNormParams(d, dtype)
        self.ffn_w1 = ad.tensor(uniform_init(rng, d, (d, ffn_hidden), dtype), requires_grad=True)
        self.ffn_b1 = ad.tensor(np.zeros((1, ffn_hidden), dtype=dtype), requires_grad=True)
        self.ffn_w2 = ad.tensor(
            uniform_init(rng, ffn_hidden, (ffn_hidden, ffn_hidden), dtype), requires_grad=True
        )
        self.ffn_b2 = ad.tensor(np.zeros((1, ffn_hidden), dtype=dtype), requires_grad=True)
        self.ffn_w3 = ad.tensor(uniform_init(rng, ffn_hidden, (ffn_hidden, d), dtype), requires_grad=True)
        self.ffn_b3 = ad.tensor(np.zeros((1, d), dtype=dtype), requires_grad=True)
        self.ln_ffn = LayerNormParams(d, dtype)

    def ffn(self, x: ad.Tensor) -> ad.Tensor:
        """Two ReLU hidden layers followed by a linear projection."""
        h = ad.relu(ad.add_bias(ad.matmul(x, self.ffn_w1), self.ffn_b1))
        h = ad.relu(ad.add_bias(ad.matmul(h, self.ffn_w2), self.ffn_b2))
        return ad.add_bias(ad.matmul(h, self.ffn_w3), self.ffn_b3)

    def named(self, prefix: str):
        params = self.self_attn.named(f"{prefix}.self") + self.ln_self.named(f"{prefix}.ln_self")
        params += self.cross_attn.named(f"{prefix}.cross") + self.ln_cross.named(f"{prefix}.ln_cross")
        params += [
            (f"{prefix}.ffn_w1", self.ffn_w1), (f"{prefix}.ffn_b1", self.ffn_b1),
            (f"{prefix}.ffn_w2", self.ffn_w2), (f"{prefix}.ffn_b2", self.ffn_b2),
            (f"{prefix}.ffn_w3", self.ffn_w3), (f"{prefix}.ffn_b3", self.ffn_b3),
        ]
        params += self.ln_ffn.named(f"{prefix}.ln_ffn")
        return params


class BoundaryHead:
    """Scores each token position against each query's output embedding."""

    def __init__(self, d: int, hidden: int, rng, dtype):
        self.w1 = ad.tensor(uniform_init(rng, 2 * d, (2 * d, hidden), dtype), requires_grad=True)
        self.b1 = ad.tensor(np.zeros((1, hidden), dtype=dtype), requires_grad=True)
        self.w2 = ad.tensor(uniform_init(rng, hidden, (hidden, 1), dtype), requires_grad=True)
        self.b2 = ad.tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)
        self.d = d

    def named(self, prefix: str):
        return [
            (f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2),
        ]

    def __call__(
        self,
        u: ad.Tensor,  # (B*N, d) query-major
        hstack: ad.Tensor,  # (L*B, d) time-major
        n_queries: int,
        to_sentence_major: np.ndarray,  # row permutation (L*B,)
        valid: np.ndarray,  # (B*N, L) position mask
    ) -> ad.Tensor:
        # The first head layer is linear in [u ; H], so split its weights
        # and build the pairwise (query, position) sum instead of
        # materializing dup(u) ⊕ H per query.
        lmax = valid.shape[1]
        w1_u = ad.slice_rows(self.w1, 0, self.d)
        w1_h = ad.slice_rows(self.w1, self.d, 2 * self.d)
        from_u = ad.matmul(u, w1_u)
        from_h = ad.add_bias(ad.matmul(hstack, w1_h), self.b1)
        from_h = ad.permute_rows(from_h, to_sentence_major)
        hidden = ad.relu(
            ad.add(
                ad.repeat_each_row(from_u, lmax),
                ad.repeat_blocks(from_h, lmax, n_queries),
            )
        )
        logits = ad.add_bias(ad.matmul(hidden, self.w2), self.b2)
        logits = ad.reshape(logits, (valid.shape[0], valid.shape[1]))
        return ad.masked_softmax(logits, valid)


@dataclass
class BatchedPredictions:
    """Stacked per-query distributions for a batch; rows are query-major."""

    p_class: ad.Tensor  # (B*N, C+1)
    p_left: ad.Tensor  # (B*N, Lmax)
    p_right: ad.Tensor  # (B*N, Lmax)
    embeddings: ad.Tensor  # (B*N, d)
    lengths: Sequence[int]
    n_queries: int

    def split(self) -> list[PredictionSet]:
        n = self.n_queries
        out = []
        for s, length in enumerate(self.lengths):
            rows = slice(s * n, (s + 1) * n)
            out.append(
                PredictionSet(
                    p_class=ad.slice_rows(self.p_class, rows.start, rows.stop),
                    p_left=ad.slice_cols(
                        ad.slice_rows(self.p_left, rows.start, rows.stop), 0, length
                    ),
                    p_right=ad.slice_cols(
                        ad.slice_rows(self.p_right, rows.start, rows.stop), 0, length
                    ),
                    embeddings=ad.slice_rows(self.embeddings, rows.start, rows.stop),
                    length=int(length),
                )
            )
        return out


class EntitySetDecoder:
    def __init__(
        self,
        d: int,
        n_class_outputs: int,  # real categories + null
        config: DecoderConfig,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        config.validate(d)
        self.config = config
        self.d = d
        self.n_class_outputs = n_class_outputs
        ffn_hidden = config.ffn_hidden or 4 * d
        head_hidden = config.head_hidden or d
        self.q_span = ad.tensor(
            normal_init(rng, (config.n_queries, d), dtype), requires_grad=True
        )
        self.layers = [
            DecoderLayer(d, ffn_hidden, rng, dtype) for _ in range(config.layers)
        ]
        self.cls_w1 = ad.tensor(uniform_init(rng, d, (d, head_hidden), dtype), requires_grad=True)
        self.cls_b1 = ad.tensor(np.zeros((1, head_hidden), dtype=dtype), requires_grad=True)
        self.cls_w2 = ad.tensor(
            uniform_init(rng, head_hidden, (head_hidden, n_class_outputs), dtype),
            requires_grad=True,
        )
        self.cls_b2 = ad.tensor(np.zeros((1, n_class_outputs), dtype=dtype), requires_grad=True)
        self.left_head = BoundaryHead(d, head_hidden, rng, dtype)
        self.right_head = BoundaryHead(d, head_hidden, rng, dtype)

    def named_parameters(self):
        params = [("decoder.q_span", self.q_span)]
        for i, layer in enumerate(self.layers):
            params.extend(layer.named(f"decoder.layer{i}"))
        params += [
            ("decoder.cls_w1", self.cls_w1), ("decoder.cls_b1", self.cls_b1),
            ("decoder.cls_w2", self.cls_w2), ("decoder.cls_b2", self.cls_b2),
        ]
        params += self.left_head.named("decoder.left")
        params += self.right_head.named("decoder.right")
        return params

    def decode_batch(
        self,
        hstack: ad.Tensor,  # (Lmax*B, d) time-major encoder output
        lengths: Sequence[int],
        training: bool = False,
        rng=None,
    ) -> BatchedPredictions:
        cfg = self.config
        b = len(lengths)
        n = cfg.n_queries
        lmax = hstack.data.shape[0] // b
        token_mask = np.arange(lmax)[None, :] < np.asarray(lengths)[:, None]  # (B, L)
        p = cfg.dropout

        x = ad.tile_rows(self.q_span, b)  # (B*N, d), row s*N+q holds query q
        for layer in self.layers:
            if cfg.interaction:
                mixed = multi_head(
                    x, x, x, layer.self_attn, cfg.heads, n_groups=b,
                    key_mask=np.ones((b, n), dtype=bool),
                )
                mixed = ad.dropout(mixed, p, training, rng)
                x = ad.layer_norm(ad.add(x, mixed), layer.ln_self.gain, layer.ln_self.bias)
            mixed = multi_head(
                x, hstack, hstack, layer.cross_attn, cfg.heads, n_groups=b,
                key_mask=token_mask, keys_time_major=True,
            )
            mixed = ad.dropout(mixed, p, training, rng)
            x = ad.layer_norm(ad.add(x, mixed), layer.ln_cross.gain, layer.ln_cross.bias)
            mixed = ad.dropout(layer.ffn(x), p, training, rng)
            x = ad.layer_norm(ad.add(x, mixed), layer.ln_ffn.gain, layer.ln_ffn.bias)

        u = x
        cls_hidden = ad.relu(ad.add_bias(ad.matmul(u, self.cls_w1), self.cls_b1))
        p_class = ad.softmax(
            ad.add_bias(ad.matmul(cls_hidden, self.cls_w2), self.cls_b2), axis=1
        )
        # reorder time-major H rows (t*B + s) into sentence-major (s*L + t)
        to_sentence_major = (
            np.tile(np.arange(lmax), b) * b + np.repeat(np.arange(b), lmax)
        )
        valid = np.repeat(token_mask, n, axis=0)  # (B*N, L)
        p_left = self.left_head(u, hstack, n, to_sentence_major, valid)
        p_right = self.right_head(u, hstack, n, to_sentence_major, valid)
        return BatchedPredictions(p_class, p_left, p_right, u, list(lengths), n)

    def decode(self, encoding: SequenceEncoding) -> PredictionSet:
        """Single-sentence decode (eval mode)."""
        return self.decode_batch(encoding.h, [encoding.length]).split()[0]

    def heads(self, u: ad.Tensor, h: ad.Tensor):
        """Classification and boundary distributions for one sentence.

        u: (N, d) output embeddings; h: (length, d) encoder rows.
        """
        n = u.data.shape[0]
        length = h.data.shape[0]
        cls_hidden = ad.relu(ad.add_bias(ad.matmul(u, self.cls_w1), self.cls_b1))
        p_class = ad.softmax(
            ad.add_bias(ad.matmul(cls_hidden, self.cls_w2), self.cls_b2), axis=1
        )
        identity = np.arange(length)
        valid = np.ones((n, length), dtype=bool)
        p_left = self.left_head(u, h, n, identity, valid)
        p_right = self.right_head(u, h, n, identity, valid)
        return p_class, p_left, p_right


def extract_entities(
    pred: PredictionSet,
    null_id: int,
    null_threshold: Optional[float] = None,
) -> set[PredictedEntity]:
    """Read predicted entities out of one decoded sentence.

    Per query: take the argmax category (dropping the query when it is the
    null label), then argmax boundaries, dropping inverted spans. Exact
    duplicate (left, right, category) triples keep the highest score.

    With null_threshold set, a query is dropped only when the null label's
    probability reaches the threshold, and the category argmax runs over
    the real categories.
    """
    pc = pred.p_class.data
    pl = pred.p_left.data
    pr = pred.p_right.data
    best: dict[tuple[int, int, int], PredictedEntity] = {}
    for q in range(pc.shape[0]):
        if null_threshold is None:
            category = int(np.argmax(pc[q]))
            if category == null_id:
                continue
        else:
            if pc[q, null_id] >= null_threshold:
                continue
            category = int(np.argmax(pc[q, :null_id]))
        left = int(np.argmax(pl[q]))
        right = int(np.argmax(pr[q]))
        if left > right:
            continue
        score = float(pc[q, category] * pl[q, left] * pr[q, right])
        key = (left, right, category)
        cur = best.get(key)
        if cur is None or score > cur.score:
            best[key] = PredictedEntity(left, right, category, score)
    return set(best.values())
