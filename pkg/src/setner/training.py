"""Optimization loop: decoupled-weight-decay Adam, warmup-decay schedule,
batching, checkpointing, and the ablation switches.

One seeded generator drives an entire run: model initialization first, then
per epoch the corpus shuffle, dropout masks in forward order, and (in CE
mode) per-sentence gold-order shuffles. Identical seeds therefore produce
identical metric logs and identical checkpoints.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sentence, Vocab, make_batch, make_batches
from .evaluation import score_corpus
from .matching import MatchingError, bipartite_loss, ce_loss_baseline
from .model import ModelConfig, SeqToSetModel

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries diagnostics."""


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3  # desk-scale default; the 2e-5 used with large pretrained encoders remains selectable
    warmup_fraction: float = 0.1
    epochs: int = 40
    batch_size: int = 8
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 13
    freeze_queries: bool = False
    loss_mode: str = "bipartite"  # bipartite | ce
    grad_clip_norm: float = 1.0
    cost_mode: str = "prob"  # prob (as defined) | logprob (experimental)

    def validate(self) -> None:
        if self.peak_lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("peak_lr, epochs, and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.loss_mode not in ("bipartite", "ce"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.cost_mode not in ("prob", "logprob"):
            raise ValueError(f"unknown cost_mode {self.cost_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    overrides: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return overrides


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    fields = {f: type(getattr(config, f)) for f in vars(config)}
    for key, value in overrides.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kind = fields[key]
        if kind is bool:
            parsed = value.lower() in ("1", "true", "yes", "on")
        else:
            parsed = kind(value)
        setattr(config, key, parsed)
    config.validate()
    return config


def lr_schedule(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay multiplies the parameter directly by (1 - lr * weight_decay);
    it never enters the gradient moments. Parameters named in `no_decay`
    are exempt.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, ad.Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        no_decay: frozenset[str] = frozenset(),
    ):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.t = 0

    def zero_grad(self) -> None:
        for _, tensor in self.params:
            tensor.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, tensor in self.params:
            grad = tensor.grad
            if grad is None:
                grad = np.zeros_like(tensor.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data = tensor.data - (lr * update).astype(tensor.data.dtype)
            if self.weight_decay and name not in self.no_decay:
                tensor.data = tensor.data * tensor.data.dtype.type(
                    1.0 - lr * self.weight_decay
                )


def clip_global_norm(params: Sequence[tuple[str, ad.Tensor]], max_norm: float) -> float:
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, tensor in params:
        if tensor.grad is not None:
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, tensor in params:
            if tensor.grad is not None:
                tensor.grad *= factor
    return norm


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_precision: float
    dev_recall: float
    dev_f1: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    best_epoch: int
    best_dev_f1: float
    best_state: dict
    final_state: dict


def sentence_loss(
    model: SeqToSetModel,
    sentence: Sentence,
    pred,
    loss_mode: str,
    cost_mode: str,
    rng: Optional[np.random.Generator] = None,
) -> ad.Tensor:
    if loss_mode == "bipartite":
        loss, _ = bipartite_loss(sentence.gold, pred, model.null_id, cost_mode)
        return loss
    gold = sorted(sentence.gold)
    if rng is not None and len(gold) > 1:
        # order-sensitive baseline sees a fresh gold order each epoch
        gold = [gold[i] for i in rng.permutation(len(gold))]
    return ce_loss_baseline(gold, pred, model.null_id)


def train(
    model: SeqToSetModel,
    train_sentences: Sequence[Sentence],
    dev_sentences: Sequence[Sentence],
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Run the full optimization loop and keep the best-dev checkpoint."""
    config.validate()
    if not train_sentences:
        raise ValueError("training corpus is empty")
    max_gold = max(len(s.gold) for s in train_sentences)
    n_queries = model.config.decoder.n_queries
    if max_gold >= n_queries:
        raise ValueError(
            f"a sentence carries {max_gold} gold entities but the decoder has "
            f"only {n_queries} queries; null padding requires more queries"
        )
    rng = model.rng
    trainable = [
        (name, tensor)
        for name, tensor in model.named_parameters()
        if not (config.freeze_queries and name == "decoder.q_span")
    ]
    optimizer = AdamW(
        trainable,
        weight_decay=config.weight_decay,
        no_decay=frozenset(model.no_decay_names()),
    )
    steps_per_epoch = int(np.ceil(len(train_sentences) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    global_step = 0
    history: list[EpochMetrics] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state: dict = {}
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_sentences))
        ordered = [train_sentences[i] for i in order]
        batches = make_batches(ordered, config.batch_size)
        epoch_loss = 0.0
        lr = 0.0
        for batch_idx, batch in enumerate(batches):
            try:
                preds = model.forward_batch(batch, training=True).split()
                losses = [
                    sentence_loss(
                        model, sent, pred, config.loss_mode, config.cost_mode,
                        rng if config.loss_mode == "ce" else None,
                    )
                    for sent, pred in zip(batch.sentences, preds)
                ]
                batch_loss = ad.scale(ad.stack_sum(losses), 1.0 / len(losses))
                loss_value = batch_loss.item()
            except (MatchingError, ad.GraphError) as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch} batch {batch_idx}; sentences: "
                    + "; ".join(" ".join(s.raw_tokens) for s in batch.sentences[:4])
                ) from exc
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at epoch {epoch} batch {batch_idx}; "
                    f"sentences: "
                    + "; ".join(" ".join(s.raw_tokens) for s in batch.sentences[:4])
                )
            epoch_loss += loss_value * len(losses)
            optimizer.zero_grad()
            batch_loss.backward()
            clip_global_norm(trainable, config.grad_clip_norm)
            lr = lr_schedule(global_step, total_steps, config.peak_lr, config.warmup_fraction)
            optimizer.step(lr)
            global_step += 1
        train_loss = epoch_loss / len(train_sentences)
        report = evaluate_model(model, dev_sentences, config.batch_size)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=train_loss,
            dev_precision=report.precision,
            dev_recall=report.recall,
            dev_f1=report.f1,
            lr=lr,
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_epoch = epoch
            best_state = snapshot_state(model, optimizer, global_step)
    final_state = snapshot_state(model, optimizer, global_step)
    if not best_state:
        best_state = final_state
    return TrainResult(history, best_epoch, best_f1, best_state, final_state)


def evaluate_model(model: SeqToSetModel, sentences: Sequence[Sentence], batch_size: int = 8):
    predictions = model.predict(sentences, batch_size)
    return score_corpus(
        [(s.gold, preds) for s, preds in zip(sentences, predictions)]
    )


# ---------------------------------------------------------------------------
# checkpoints


def snapshot_state(model: SeqToSetModel, optimizer: Optional[AdamW], step: int) -> dict:
    state = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "params": {name: t.data.copy() for name, t in model.named_parameters()},
        "vocab_json": model.vocab.to_json(),
        "model_config": model.config.to_dict(),
    }
    if optimizer is not None:
        state["adam_m"] = {k: v.copy() for k, v in optimizer.m.items()}
        state["adam_v"] = {k: v.copy() for k, v in optimizer.v.items()}
        state["adam_t"] = optimizer.t
    return state


def save_checkpoint(path, state: dict) -> None:
    arrays = {"meta/step": np.asarray(state["step"], dtype=np.int64),
              "meta/version": np.asarray(state["version"], dtype=np.int64),
              "meta/adam_t": np.asarray(state.get("adam_t", 0), dtype=np.int64)}
    for name, arr in state["params"].items():
        arrays[f"param/{name}"] = arr
    for name, arr in state.get("adam_m", {}).items():
        arrays[f"adam_m/{name}"] = arr
    for name, arr in state.get("adam_v", {}).items():
        arrays[f"adam_v/{name}"] = arr
    header = json.dumps(
        {"vocab": json.loads(state["vocab_json"]), "model_config": state["model_config"]},
        sort_keys=True,
    )
    arrays["meta/header"] = np.frombuffer(header.encode(), dtype=np.uint8).copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as payload:
        header = json.loads(bytes(payload["meta/header"]).decode())
        if int(payload["meta/version"]) != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {int(payload['meta/version'])}"
            )
        state = {
            "version": int(payload["meta/version"]),
            "step": int(payload["meta/step"]),
            "adam_t": int(payload["meta/adam_t"]),
            "params": {},
            "adam_m": {},
            "adam_v": {},
            "vocab_json": json.dumps(header["vocab"], sort_keys=True),
            "model_config": header["model_config"],
        }
        for key in payload.files:
            if key.startswith("param/"):
                state["params"][key[len("param/"):]] = payload[key]
            elif key.startswith("adam_m/"):
                state["adam_m"][key[len("adam_m/"):]] = payload[key]
            elif key.startswith("adam_v/"):
                state["adam_v"][key[len("adam_v/"):]] = payload[key]
    return state


def model_from_state(state: dict) -> SeqToSetModel:
    """Rebuild a model from a checkpoint state (parameters overwritten)."""
    vocab = Vocab.from_json(state["vocab_json"])
    config = ModelConfig.from_dict(state["model_config"])
    model = SeqToSetModel(vocab, config, np.random.default_rng(0))
    model.load_state_arrays(state["params"])
    return model


def states_equal(a: dict, b: dict) -> bool:
    """Bitwise equality of two checkpoint states (arrays and metadata)."""
    if a["step"] != b["step"] or a["params"].keys() != b["params"].keys():
        return False
    for group in ("params", "adam_m", "adam_v"):
        ka, kb = a.get(group, {}), b.get(group, {})
        if ka.keys() != kb.keys():
            return False
        for name in ka:
            if not np.array_equal(ka[name], kb[name]):
                return False
    return a["vocab_json"] == b["vocab_json"] and a["model_config"] == b["model_config"]
