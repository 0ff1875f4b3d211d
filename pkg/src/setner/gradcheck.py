"""Finite-difference verification of the full model gradient.

Builds a miniature model at 64-bit precision, computes the bipartite set
loss on a short sentence with the assignment frozen, and compares the
analytic gradient of every parameter entry against central finite
differences. This is the enforcement point for the autodiff contracts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Vocab, encode_record, make_batch
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .matching import cost_matrix, hungarian, pad_gold, set_loss
from .model import ModelConfig, SeqToSetModel

MINI_RECORDS = [
    {"tokens": ["rok", "va"], "pos": ["NNP", "NNP"],
     "entities": [{"start": 0, "end": 1, "type": "A"},
                  {"start": 1, "end": 1, "type": "B"}]},
    {"tokens": ["lu", "pim", "za"], "pos": ["NNP", "VBD", "NNP"],
     "entities": [{"start": 0, "end": 0, "type": "A"}]},
    {"tokens": ["mo", "den", "kip", "sa"], "pos": ["NNP", "VBD", "DT", "NN"],
     "entities": [{"start": 2, "end": 3, "type": "B"}]},
]


def build_mini_model(seed: int = 0):
    """Miniature 64-bit model: ~20-entry vocab, d=16, N=5, M=1, h=2."""
    vocab = Vocab.build(MINI_RECORDS)
    config = ModelConfig(
        encoder=EncoderConfig(
            token_emb_dim=6, pos_emb_dim=3, char_emb_dim=3, char_lstm_hidden=4,
            token_lstm_hidden=8, token_lstm_layers=1, dropout=0.0,
        ),
        decoder=DecoderConfig(
            n_queries=5, layers=1, heads=2, ffn_hidden=32, head_hidden=8,
            dropout=0.0,
        ),
        dtype="float64",
    )
    model = SeqToSetModel(vocab, config, np.random.default_rng(seed))
    sentence = encode_record(MINI_RECORDS[0], vocab)
    return model, sentence


@dataclass
class GradcheckRow:
    name: str
    size: int
    max_rel_err: float
    ok: bool


@dataclass
class GradcheckResult:
    rows: list[GradcheckRow]
    max_rel_err: float
    ok: bool


def run_gradcheck(
    seed: int = 0,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    report_floor: float = 1e-5,
) -> GradcheckResult:
    """Check every parameter entry of the mini model against central FD.

    The pass rule is |analytic - numeric| <= atol + rtol * max(|analytic|,
    |numeric|): the relative tolerance is rtol, with atol absorbing
    finite-difference noise on entries that are effectively zero. The
    reported max relative error covers entries above report_floor, the
    magnitude below which central differences at this step size cannot
    resolve a relative error of rtol at all.
    """
    model, sentence = build_mini_model(seed)
    batch = make_batch([sentence])
    n_queries = model.config.decoder.n_queries

    def forward_loss(assignment=None):
        pred = model.forward_batch(batch, training=False).split()[0]
        padded = pad_gold(sentence.gold, n_queries)
        if assignment is None:
            assignment = hungarian(cost_matrix(padded, pred))
        return set_loss(padded, pred, assignment, model.null_id), assignment

    loss, frozen = forward_loss()
    loss.backward()
    params = model.named_parameters()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params
    }
    rows = []
    worst = 0.0
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        max_err = 0.0
        ok = True
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = forward_loss(frozen)[0].item()
            flat[i] = orig - step
            lo = forward_loss(frozen)[0].item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric))
            err = abs(a_flat[i] - numeric) / denom if denom > 0 else 0.0
            if abs(a_flat[i] - numeric) > atol + rtol * denom:
                ok = False
            if denom > report_floor:
                max_err = max(max_err, err)
        rows.append(GradcheckRow(name, flat.size, max_err, ok))
        worst = max(worst, max_err)
    return GradcheckResult(rows, worst, all(r.ok for r in rows))
