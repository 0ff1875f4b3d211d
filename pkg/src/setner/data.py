"""Corpus ingestion, vocabularies, and batching.

Corpus files are UTF-8 JSON Lines, one sentence per line:

    {"tokens": [str], "pos": [str],
     "entities": [{"start": int, "end": int, "type": str}]}

`start`/`end` are inclusive 0-based token indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
NULL_LABEL = "<null>"  # the "no entity" category, always the last id


class CorpusError(ValueError):
    """A corpus file failed to parse or validate."""


@dataclass(frozen=True, order=True)
class Entity:
    """One gold or predicted entity span with inclusive boundaries."""

    left: int
    right: int
    category: int


@dataclass
class Sentence:
    """One sentence with id-encoded tokens and its gold entity set."""

    tokens: list[int]
    pos: list[int]
    chars: list[list[int]]
    gold: frozenset[Entity]
    raw_tokens: list[str]
    raw_pos: list[str]

    def __len__(self) -> int:
        return len(self.tokens)


class Vocab:
    """Token/char/POS/category id maps with reserved PAD/UNK ids.

    The null category is exactly one id and always the largest.
    """

    def __init__(
        self,
        tokens: dict[str, int],
        chars: dict[str, int],
        pos: dict[str, int],
        categories: dict[str, int],
    ):
        self.tokens = tokens
        self.chars = chars
        self.pos = pos
        self.categories = categories
        if categories.get(NULL_LABEL) != len(categories) - 1:
            raise CorpusError("null category must be the largest category id")
        self._cat_names = [None] * len(categories)
        for name, idx in categories.items():
            self._cat_names[idx] = name

    @classmethod
    def build(cls, records: Iterable[dict]) -> "Vocab":
        """Construct id maps from training records (PAD=0, UNK=1)."""
        tokens: set[str] = set()
        chars: set[str] = set()
        pos: set[str] = set()
        cats: set[str] = set()
        for rec in records:
            for tok in rec["tokens"]:
                tokens.add(tok)
                chars.update(tok)
            pos.update(rec["pos"])
            for ent in rec.get("entities", []):
                cats.add(ent["type"])

        def with_reserved(items: set[str]) -> dict[str, int]:
            table = {PAD: 0, UNK: 1}
            for item in sorted(items):
                if item not in table:
                    table[item] = len(table)
            return table

        cat_map = {name: i for i, name in enumerate(sorted(cats))}
        cat_map[NULL_LABEL] = len(cat_map)
        return cls(with_reserved(tokens), with_reserved(chars), with_reserved(pos), cat_map)

    # -- reserved ids -------------------------------------------------------
    pad_id = 0
    unk_id = 1

    @property
    def null_id(self) -> int:
        return len(self.categories) - 1

    @property
    def n_categories(self) -> int:
        """Number of real categories, excluding the null label."""
        return len(self.categories) - 1

    def token_id(self, tok: str) -> int:
        return self.tokens.get(tok, self.unk_id)

    def char_ids(self, tok: str) -> list[int]:
        return [self.chars.get(ch, self.unk_id) for ch in tok]

    def pos_id(self, tag: str) -> int:
        return self.pos.get(tag, self.unk_id)

    def category_id(self, name: str) -> int:
        if name not in self.categories or name == NULL_LABEL:
            raise CorpusError(f"unknown entity category {name!r}")
        return self.categories[name]

    def category_name(self, idx: int) -> str:
        return self._cat_names[idx]

    def save(self, path) -> None:
        payload = {
            "version": 1,
            "tokens": self.tokens,
            "chars": self.chars,
            "pos": self.pos,
            "categories": self.categories,
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Vocab":
        payload = json.loads(Path(path).read_text())
        return cls(payload["tokens"], payload["chars"], payload["pos"], payload["categories"])

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": 1,
                "tokens": self.tokens,
                "chars": self.chars,
                "pos": self.pos,
                "categories": self.categories,
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        payload = json.loads(text)
        return cls(payload["tokens"], payload["chars"], payload["pos"], payload["categories"])


def _validate_record(rec: dict, line_no: int) -> None:
    toks = rec.get("tokens")
    pos = rec.get("pos")
    ents = rec.get("entities", [])
    if not isinstance(toks, list) or not toks:
        raise CorpusError(f"line {line_no}: 'tokens' must be a nonempty list")
    if not isinstance(pos, list) or len(pos) != len(toks):
        raise CorpusError(f"line {line_no}: 'pos' must match tokens in length")
    seen = set()
    for ent in ents:
        try:
            left, right, cat = int(ent["start"]), int(ent["end"]), ent["type"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"line {line_no}: malformed entity {ent!r}") from exc
        if not (0 <= left <= right < len(toks)):
            raise CorpusError(
                f"line {line_no}: entity span [{left}, {right}] outside sentence "
                f"of length {len(toks)}"
            )
        key = (left, right, cat)
        if key in seen:
            raise CorpusError(f"line {line_no}: duplicate entity {key}")
        seen.add(key)


def read_records(path) -> list[dict]:
    """Parse a JSONL corpus file, validating every record."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            _validate_record(rec, line_no)
            records.append(rec)
    return records


def encode_record(rec: dict, vocab: Vocab) -> Sentence:
    gold = frozenset(
        Entity(int(e["start"]), int(e["end"]), vocab.category_id(e["type"]))
        for e in rec.get("entities", [])
    )
    return Sentence(
        tokens=[vocab.token_id(t) for t in rec["tokens"]],
        pos=[vocab.pos_id(p) for p in rec["pos"]],
        chars=[vocab.char_ids(t) for t in rec["tokens"]],
        gold=gold,
        raw_tokens=list(rec["tokens"]),
        raw_pos=list(rec["pos"]),
    )


def load_corpus(path, vocab: Optional[Vocab] = None) -> tuple[list[Sentence], Vocab]:
    """Load a JSONL corpus; build a vocab from it unless one is supplied."""
    records = read_records(path)
    if vocab is None:
        if not records:
            raise CorpusError(f"{path}: empty corpus cannot build a vocabulary")
        vocab = Vocab.build(records)
    return [encode_record(rec, vocab) for rec in records], vocab


def save_corpus(records: Sequence[dict], path) -> None:
    """Write raw records as JSONL with a stable key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "tokens": rec["tokens"],
                        "pos": rec["pos"],
                        "entities": [
                            {"start": e["start"], "end": e["end"], "type": e["type"]}
                            for e in rec.get("entities", [])
                        ],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def sentence_to_record(sentence: Sentence, vocab: Vocab) -> dict:
    return {
        "tokens": list(sentence.raw_tokens),
        "pos": list(sentence.raw_pos),
        "entities": [
            {"start": e.left, "end": e.right, "type": vocab.category_name(e.category)}
            for e in sorted(sentence.gold)
        ],
    }


@dataclass
class Batch:
    """Padded id arrays for a group of sentences.

    Arrays are sentence-major: tokens[s, t]. `mask` is 1.0 at real tokens.
    """

    tokens: np.ndarray  # (B, L) int
    pos: np.ndarray  # (B, L) int
    chars: np.ndarray  # (B, L, C) int
    lengths: np.ndarray  # (B,) int
    char_lengths: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) float
    sentences: list[Sentence] = field(repr=False, default_factory=list)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]


def make_batch(sentences: Sequence[Sentence], pad_id: int = 0) -> Batch:
    b = len(sentences)
    lengths = np.array([len(s) for s in sentences], dtype=np.intp)
    max_len = int(lengths.max())
    max_chars = max(max((len(cs) for cs in s.chars), default=1) for s in sentences)
    max_chars = max(max_chars, 1)
    tokens = np.full((b, max_len), pad_id, dtype=np.intp)
    pos = np.full((b, max_len), pad_id, dtype=np.intp)
    chars = np.full((b, max_len, max_chars), pad_id, dtype=np.intp)
    char_lengths = np.zeros((b, max_len), dtype=np.intp)
    for i, s in enumerate(sentences):
        n = len(s)
        tokens[i, :n] = s.tokens
        pos[i, :n] = s.pos
        for t, cs in enumerate(s.chars):
            chars[i, t, : len(cs)] = cs
            char_lengths[i, t] = len(cs)
    mask = (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.float64)
    return Batch(tokens, pos, chars, lengths, char_lengths, mask, list(sentences))


def make_batches(
    corpus: Sequence[Sentence],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
) -> list[Batch]:
    """Chunk a corpus into padded batches; order is stable given the seed."""
    if not corpus:
        raise CorpusError("cannot batch an empty corpus")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    ordered = [corpus[i] for i in order]
    return [
        make_batch(ordered[i : i + batch_size])
        for i in range(0, len(ordered), batch_size)
    ]
