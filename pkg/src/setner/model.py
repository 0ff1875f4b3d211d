"""Full encoder-decoder model over a vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, Sentence, Vocab, make_batches
from .decoder import (
    BatchedPredictions,
    DecoderConfig,
    EntitySetDecoder,
    PredictedEntity,
    PredictionSet,
    extract_entities,
)
from .encoder import EncoderConfig, SequenceEncoder


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dtype: str = "float32"  # "float64" is required for gradient checking

    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "encoder": vars(self.encoder).copy(),
            "decoder": vars(self.decoder).copy(),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**payload["encoder"]),
            decoder=DecoderConfig(**payload["decoder"]),
            dtype=payload.get("dtype", "float32"),
        )


class SeqToSetModel:
    """Sequence encoder plus entity set decoder.

    All parameter initializations draw from the supplied generator in a
    fixed order (encoder first, then decoder); the same generator later
    supplies dropout masks, which keeps whole runs reproducible from one
    seed.
    """

    def __init__(
        self,
        vocab: Vocab,
        config: ModelConfig,
        rng: np.random.Generator,
        pretrained: Optional[np.ndarray] = None,
    ):
        self.vocab = vocab
        self.config = config
        dtype = config.np_dtype()
        self.rng = rng
        self.encoder = SequenceEncoder(vocab, config.encoder, rng, dtype, pretrained)
        self.decoder = EntitySetDecoder(
            config.encoder.d, vocab.n_categories + 1, config.decoder, rng, dtype
        )

    @property
    def null_id(self) -> int:
        return self.vocab.null_id

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        return self.encoder.named_parameters() + self.decoder.named_parameters()

    def no_decay_names(self) -> set[str]:
        """Parameters excluded from weight decay: embedding tables,
        layer-norm affines, and the query vectors."""
        out = set()
        for name, _ in self.named_parameters():
            if (
                "table" in name
                or ".ln_" in name
                or name.endswith((".gain", ".bias"))
                or name == "decoder.q_span"
            ):
                out.add(name)
        return out

    def forward_batch(self, batch: Batch, training: bool = False) -> BatchedPredictions:
        rng = self.rng if training else None
        hstack = self.encoder.encode_batch(batch, training, rng)
        return self.decoder.decode_batch(
            hstack, list(batch.lengths), training, rng
        )

    def predict(
        self,
        sentences: Sequence[Sentence],
        batch_size: int = 8,
        null_threshold: Optional[float] = None,
    ) -> list[set[PredictedEntity]]:
        """Predicted entity sets in input order (eval mode, no graph)."""
        out: list[set[PredictedEntity]] = []
        with ad.no_grad():
            for batch in make_batches(sentences, batch_size):
                preds = self.forward_batch(batch, training=False).split()
                out.extend(
                    extract_entities(p, self.null_id, null_threshold) for p in preds
                )
        return out

    def predictions_for(
        self, sentences: Sequence[Sentence], batch_size: int = 8
    ) -> list[PredictionSet]:
        """Raw per-sentence distributions in input order (eval mode)."""
        out: list[PredictionSet] = []
        with ad.no_grad():
            for batch in make_batches(sentences, batch_size):
                out.extend(self.forward_batch(batch, training=False).split())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"checkpoint parameter {name} has shape {arr.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = arr.copy()
