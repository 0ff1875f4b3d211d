"""Synthetic nested-entity corpus generator.

Entities come from a small context-free template grammar organized as a
nesting chain: a level-k phrase may embed a level-(k-1) phrase as its base,
e.g. "mira vance" (PER) inside "mira vance institute" (ORG) inside
"mira vance institute district" (GPE). Every level owns a disjoint lexicon
and every phrase ends in a level-specific head word (names for level 0), so
each gold span's category is uniquely recoverable from its surface tokens.

Generation is deterministic given the seed, and sentences are unique across
a run, so train/dev/test splits never share a sentence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CATEGORY_NAMES = ["PER", "ORG", "GPE", "FAC", "LOC", "VEH", "WEA"]

_FIRST_NAMES = [
    "mira", "oren", "tessa", "jarek", "lina", "dov", "petra", "sol",
    "anka", "rufus", "ines", "tobin", "vera", "casper", "ida", "milan",
    "noa", "ezra", "sanne", "viktor", "lotte", "bram", "zosia", "felix",
]
_LAST_NAMES = [
    "vance", "okafor", "lindqvist", "marek", "duval", "soto", "keller",
    "ibarra", "novak", "reyes", "thorne", "antal", "bergson", "calder",
    "dagny", "eller", "farkas", "grieg", "halden", "ivers", "jasper",
    "kovac", "lorne", "madsen",
]
_LEVEL_BASES = {
    1: [
        "stellar", "harbinger", "meridian", "cobalt", "aurora", "vertex",
        "pinnacle", "quartz", "beacon", "cinder", "drift", "ember",
        "fathom", "garnet", "hollow", "iris", "juniper", "krait",
    ],
    2: [
        "marlow", "kesterly", "ordwin", "pellam", "quorra", "rastel",
        "sorven", "tandry", "umbria", "velden", "wexford", "yarrow",
        "zephyr", "arkady", "bellmare", "corvale", "darvon", "elsmere",
    ],
    3: [
        "anchor", "bastion", "crescent", "delta", "echo", "flint",
        "granite", "helix", "ironwood", "jade", "keystone", "lantern",
    ],
}
_LEVEL_HEADS = {
    1: ["institute", "bureau", "council", "collective", "syndicate", "consortium"],
    2: ["district", "valley", "harbor", "province", "heights"],
    3: ["tower", "bridge", "depot", "terminal"],
}

_VERBS = [
    "visited", "praised", "toured", "audited", "funded", "criticized",
    "surveyed", "endorsed", "inspected", "profiled", "sketched", "mapped",
]
_ADVERBS = ["yesterday", "recently", "quietly", "finally", "reportedly", "again"]
_PREPS = ["near", "beside", "within", "behind", "toward", "across"]
_NOUNS = [
    "delegation", "reporters", "committee", "crowd", "residents", "auditors",
    "festival", "assembly", "caravan", "chorus", "panel", "jury",
]

# slot strings: "E" entity, "V" verb, "ADV" adverb, "P" preposition,
# "DT" determiner, "N" filler noun, "CC" conjunction
_TEMPLATES = [
    ["E", "V", "E"],
    ["ADV", "E", "V", "E"],
    ["E", "V", "P", "E"],
    ["E", "CC", "E", "V", "E"],
    ["DT", "N", "P", "E", "V", "E"],
    ["E", "V", "E", "P", "DT", "N"],
    ["ADV", "DT", "N", "V", "E"],
    ["E", "V", "DT", "N"],
]


class GrammarError(ValueError):
    """Invalid generator configuration."""


@dataclass(frozen=True)
class GrammarConfig:
    seed: int
    n_sentences: int
    nesting_prob: float
    max_depth: int = 3
    category_count: int = 3
    entity_cap: int = 15

    def validate(self) -> None:
        if self.n_sentences < 1:
            raise GrammarError("n_sentences must be >= 1")
        if not 0.0 <= self.nesting_prob <= 1.0:
            raise GrammarError("nesting_prob must lie in [0, 1]")
        if self.max_depth < 1:
            raise GrammarError("max_depth must be >= 1")
        if self.category_count < 1:
            raise GrammarError("category_count must be >= 1")
        worst = 3 * min(self.max_depth, self.category_count)
        if worst > self.entity_cap:
            raise GrammarError(
                f"up to {worst} entities per sentence exceeds the cap of "
                f"{self.entity_cap}; lower max_depth or raise entity_cap"
            )


def category_name(level: int) -> str:
    if level < len(CATEGORY_NAMES):
        return CATEGORY_NAMES[level]
    return f"CAT{level}"


def _level_lexicon(level: int) -> tuple[list[str], list[str]]:
    """Base and head word banks for one chain level (level >= 1)."""
    if level in _LEVEL_BASES:
        return _LEVEL_BASES[level], _LEVEL_HEADS[level]
    bases = [f"{w}{level}" for w in _LEVEL_BASES[1][:12]]
    heads = [f"{w}{level}" for w in ("zone", "sector", "wing")]
    return bases, heads


def _expand(level: int, depth_left: int, p: float, rng: np.random.Generator):
    """Expand one entity phrase; returns (tokens, pos, relative entities)."""
    if level == 0:
        first = _FIRST_NAMES[rng.integers(len(_FIRST_NAMES))]
        if rng.random() < 0.5:
            last = _LAST_NAMES[rng.integers(len(_LAST_NAMES))]
            tokens, pos = [first, last], ["NNP", "NNP"]
        else:
            tokens, pos = [first], ["NNP"]
        return tokens, pos, [(0, len(tokens) - 1, category_name(0))]
    bases, heads = _level_lexicon(level)
    head = heads[rng.integers(len(heads))]
    nest = depth_left > 1 and rng.random() < p
    if nest:
        tokens, pos, entities = _expand(level - 1, depth_left - 1, p, rng)
        tokens = tokens + [head]
        pos = pos + ["NN"]
    else:
        base = bases[rng.integers(len(bases))]
        tokens, pos, entities = [base, head], ["NNP", "NN"], []
    entities = entities + [(0, len(tokens) - 1, category_name(level))]
    return tokens, pos, entities


def _sentence(cfg: GrammarConfig, rng: np.random.Generator) -> dict:
    template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
    tokens: list[str] = []
    pos: list[str] = []
    entities: list[dict] = []
    for slot in template:
        if slot == "E":
            top = int(rng.integers(cfg.category_count))
            etoks, epos, ents = _expand(top, cfg.max_depth, cfg.nesting_prob, rng)
            offset = len(tokens)
            tokens.extend(etoks)
            pos.extend(epos)
            entities.extend(
                {"start": offset + l, "end": offset + r, "type": c}
                for l, r, c in ents
            )
        elif slot == "V":
            tokens.append(_VERBS[rng.integers(len(_VERBS))])
            pos.append("VBD")
        elif slot == "ADV":
            tokens.append(_ADVERBS[rng.integers(len(_ADVERBS))])
            pos.append("RB")
        elif slot == "P":
            tokens.append(_PREPS[rng.integers(len(_PREPS))])
            pos.append("IN")
        elif slot == "DT":
            tokens.append("the")
            pos.append("DT")
        elif slot == "N":
            tokens.append(_NOUNS[rng.integers(len(_NOUNS))])
            pos.append("NN")
        elif slot == "CC":
            tokens.append("and")
            pos.append("CC")
    entities.sort(key=lambda e: (e["start"], e["end"], e["type"]))
    return {"tokens": tokens, "pos": pos, "entities": entities}


def generate_corpus(cfg: GrammarConfig) -> list[dict]:
    """Generate unique sentences, deterministically for a given seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    budget = 200 * cfg.n_sentences + 1000
    while len(records) < cfg.n_sentences:
        attempts += 1
        if attempts > budget:
            raise GrammarError(
                "could not generate enough unique sentences; "
                "the grammar space is too small for this request"
            )
        rec = _sentence(cfg, rng)
        if len(rec["entities"]) > cfg.entity_cap:
            continue
        key = tuple(rec["tokens"])
        if key in seen:
            continue
        seen.add(key)
        records.append(rec)
    return records


def generate_splits(
    seed: int,
    n_train: int,
    n_dev: int,
    n_test: int,
    nesting_prob: float,
    max_depth: int = 3,
    category_count: int = 3,
) -> dict[str, list[dict]]:
    """One generation run carved into disjoint train/dev/test splits."""
    total = n_train + n_dev + n_test
    cfg = GrammarConfig(seed, total, nesting_prob, max_depth, category_count)
    records = generate_corpus(cfg)
    return {
        "train": records[:n_train],
        "dev": records[n_train : n_train + n_dev],
        "test": records[n_train + n_dev :],
    }
