"""Sequence encoder: embedding channels fed through stacked BiLSTMs.

Each token row concatenates an optional fixed pretrained channel, a
trainable token embedding, a POS embedding, and a character-level BiLSTM
summary (final forward state joined with final backward state). A stacked
token-level BiLSTM turns those rows into the sequence representation H
with one d-dimensional row per token.

Batched inputs are laid out time-major: row t * batch_size + s holds
sentence s at position t. Padded positions are neutralized by carrying the
previous recurrent state through masked steps, so no padding value can
influence any real token's representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Batch, Sentence, Vocab, make_batch


@dataclass
class EncoderConfig:
    token_emb_dim: int = 32
    pos_emb_dim: int = 8
    char_emb_dim: int = 16
    char_lstm_hidden: int = 50
    token_lstm_hidden: int = 32
    token_lstm_layers: int = 3
    char_lstm_layers: int = 1
    pretrained_dim: int = 0  # 0 disables the fixed pretrained channel
    dropout: float = 0.1
    dropout_on_input: bool = True  # dropout on the concatenated channels

    @property
    def d(self) -> int:
        return 2 * self.token_lstm_hidden

    @property
    def input_width(self) -> int:
        return (
            self.pretrained_dim
            + self.token_emb_dim
            + self.pos_emb_dim
            + 2 * self.char_lstm_hidden
        )

    def validate(self) -> None:
        for name in (
            "token_emb_dim", "pos_emb_dim", "char_emb_dim",
            "char_lstm_hidden", "token_lstm_hidden",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.token_lstm_layers < 1 or self.char_lstm_layers < 1:
            raise ValueError("LSTM layer counts must be >= 1")
        if self.pretrained_dim < 0:
            raise ValueError("pretrained_dim must be >= 0")


@dataclass
class SequenceEncoding:
    """Per-token representation H with one row per real token."""

    h: ad.Tensor  # (length, d)
    length: int


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def normal_init(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class LstmParams:
    """One direction of one LSTM layer; gate order is [input, forget, cell, output]."""

    def __init__(self, input_dim: int, hidden: int, rng, dtype):
        self.hidden = hidden
        self.w = ad.tensor(
            uniform_init(rng, input_dim, (input_dim, 4 * hidden), dtype),
            requires_grad=True,
        )
        self.u = ad.tensor(
            uniform_init(rng, hidden, (hidden, 4 * hidden), dtype), requires_grad=True
        )
        self.b = ad.tensor(np.zeros((1, 4 * hidden), dtype=dtype), requires_grad=True)

    def named(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.u", self.u), (f"{prefix}.b", self.b)]


def lstm_cell(x: ad.Tensor, h: ad.Tensor, c: ad.Tensor, params: LstmParams):
    """Standard LSTM gate equations for one timestep."""
    stacked = ad.lstm_cell_core(x, h, c, params.w, params.u, params.b)
    n_rows = x.data.shape[0]
    return ad.slice_rows(stacked, 0, n_rows), ad.slice_rows(stacked, n_rows, 2 * n_rows)


def run_direction(
    steps: list[ad.Tensor],
    step_masks: list[Optional[np.ndarray]],
    params: LstmParams,
    reverse: bool,
) -> list[ad.Tensor]:
    """Run one LSTM direction over per-timestep (B, in) matrices.

    A mask column of zeros at (s, t) freezes sentence s's state through
    step t, which keeps padded positions from leaking into real ones.
    """
    n_rows = steps[0].data.shape[0]
    dtype = steps[0].data.dtype
    zeros = np.zeros((n_rows, params.hidden), dtype=dtype)
    h = ad.tensor(zeros)
    c = ad.tensor(zeros.copy())
    outputs: list[Optional[ad.Tensor]] = [None] * len(steps)
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    for t in order:
        h_new, c_new = lstm_cell(steps[t], h, c, params)
        m = step_masks[t]
        if m is None:
            h, c = h_new, c_new
        else:
            keep = m.astype(dtype)
            drop = (1.0 - m).astype(dtype)
            h = ad.add(ad.mul_const(h_new, keep), ad.mul_const(h, drop))
            c = ad.add(ad.mul_const(c_new, keep), ad.mul_const(c, drop))
        outputs[t] = h
    return outputs


class BiLstmLayer:
    def __init__(self, input_dim: int, hidden: int, rng, dtype):
        self.fwd = LstmParams(input_dim, hidden, rng, dtype)
        self.bwd = LstmParams(input_dim, hidden, rng, dtype)

    def run(self, steps, step_masks) -> list[ad.Tensor]:
        fwd = run_direction(steps, step_masks, self.fwd, reverse=False)
        bwd = run_direction(steps, step_masks, self.bwd, reverse=True)
        return [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]

    def final_states(self, steps, step_masks) -> ad.Tensor:
        """Final forward state joined with final backward state per row."""
        fwd = run_direction(steps, step_masks, self.fwd, reverse=False)
        bwd = run_direction(steps, step_masks, self.bwd, reverse=True)
        return ad.concat([fwd[-1], bwd[0]], axis=1)

    def named(self, prefix: str):
        return self.fwd.named(f"{prefix}.fwd") + self.bwd.named(f"{prefix}.bwd")


class SequenceEncoder:
    """Full encoder over a vocabulary; parameters are created in a fixed
    order from the supplied generator (embeddings first, then char LSTM,
    then token LSTM layers)."""

    def __init__(
        self,
        vocab: Vocab,
        config: EncoderConfig,
        rng: np.random.Generator,
        dtype=np.float32,
        pretrained: Optional[np.ndarray] = None,
    ):
        config.validate()
        self.vocab = vocab
        self.config = config
        self.dtype = dtype
        cfg = config
        self.tok_table = ad.tensor(
            normal_init(rng, (len(vocab.tokens), cfg.token_emb_dim), dtype),
            requires_grad=True,
        )
        self.pos_table = ad.tensor(
            normal_init(rng, (len(vocab.pos), cfg.pos_emb_dim), dtype),
            requires_grad=True,
        )
        self.char_table = ad.tensor(
            normal_init(rng, (len(vocab.chars), cfg.char_emb_dim), dtype),
            requires_grad=True,
        )
        if cfg.pretrained_dim > 0:
            if pretrained is None:
                pretrained = normal_init(
                    rng, (len(vocab.tokens), cfg.pretrained_dim), dtype
                )
            if pretrained.shape != (len(vocab.tokens), cfg.pretrained_dim):
                raise ValueError(
                    f"pretrained channel shape {pretrained.shape} does not match "
                    f"({len(vocab.tokens)}, {cfg.pretrained_dim})"
                )
            self.pretrained = ad.tensor(pretrained.astype(dtype), requires_grad=False)
        else:
            self.pretrained = None
        self.char_layers = []
        width = cfg.char_emb_dim
        for _ in range(cfg.char_lstm_layers):
            self.char_layers.append(BiLstmLayer(width, cfg.char_lstm_hidden, rng, dtype))
            width = 2 * cfg.char_lstm_hidden
        self.token_layers = []
        width = cfg.input_width
        for _ in range(cfg.token_lstm_layers):
            self.token_layers.append(
                BiLstmLayer(width, cfg.token_lstm_hidden, rng, dtype)
            )
            width = cfg.d

    def named_parameters(self):
        params = [
            ("encoder.tok_table", self.tok_table),
            ("encoder.pos_table", self.pos_table),
            ("encoder.char_table", self.char_table),
        ]
        for i, layer in enumerate(self.char_layers):
            params.extend(layer.named(f"encoder.char_lstm{i}"))
        for i, layer in enumerate(self.token_layers):
            params.extend(layer.named(f"encoder.token_lstm{i}"))
        return params

    def _char_features(self, batch: Batch) -> ad.Tensor:
        """Char BiLSTM summary per token slot, (L*B, 2*char_hidden)."""
        b, l, c = batch.chars.shape
        chars_tm = batch.chars.transpose(1, 0, 2).reshape(l * b, c)
        clen_tm = batch.char_lengths.transpose(1, 0).reshape(l * b)
        steps = [
            ad.gather_rows(self.char_table, chars_tm[:, j]) for j in range(c)
        ]
        masks: list[Optional[np.ndarray]] = []
        for j in range(c):
            m = (j < clen_tm).astype(np.float64)[:, None]
            masks.append(None if m.all() else m)
        for layer in self.char_layers[:-1]:
            steps = layer.run(steps, masks)
        return self.char_layers[-1].final_states(steps, masks)

    def embed_batch(self, batch: Batch, training: bool, rng) -> ad.Tensor:
        """Concatenated embedding channels, time-major (L*B, input_width)."""
        b, l = batch.tokens.shape
        tok_tm = batch.tokens.transpose(1, 0).reshape(-1)
        pos_tm = batch.pos.transpose(1, 0).reshape(-1)
        channels = []
        if self.pretrained is not None:
            channels.append(ad.gather_rows(self.pretrained, tok_tm))
        channels.append(ad.gather_rows(self.tok_table, tok_tm))
        channels.append(ad.gather_rows(self.pos_table, pos_tm))
        channels.append(self._char_features(batch))
        x = ad.concat(channels, axis=1)
        if self.config.dropout_on_input:
            x = ad.dropout(x, self.config.dropout, training, rng)
        return x

    def encode_batch(self, batch: Batch, training: bool = False, rng=None) -> ad.Tensor:
        """Representation H for a batch, time-major (L*B, d)."""
        b, l = batch.tokens.shape
        x = self.embed_batch(batch, training, rng)
        steps = [ad.slice_rows(x, t * b, (t + 1) * b) for t in range(l)]
        masks: list[Optional[np.ndarray]] = []
        for t in range(l):
            m = batch.mask[:, t : t + 1]
            masks.append(None if m.all() else m)
        for idx, layer in enumerate(self.token_layers):
            if idx > 0 and training:
                steps = [
                    ad.dropout(s, self.config.dropout, training, rng) for s in steps
                ]
            steps = layer.run(steps, masks)
        return ad.concat(steps, axis=0)

    def encode(self, sentence: Sentence) -> SequenceEncoding:
        """Single-sentence encoding (eval mode), shape (length, d)."""
        batch = make_batch([sentence])
        h = self.encode_batch(batch, training=False)
        return SequenceEncoding(h, len(sentence))

    def embed_tokens(self, sentence: Sentence) -> ad.Tensor:
        """Per-token embedding rows for one sentence, (length, input_width)."""
        batch = make_batch([sentence])
        return self.embed_batch(batch, training=False, rng=None)
