"""Co-occurrence and annotation statistics over a training split.

Object classes are grouped by head word before counting, so compositional
names ("traffic light", "red light") share one key and their counts pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Dataset, artifact_header, check_artifact, dump_json_artifact,
                   load_json_artifact)

# Class names are cut at the first of these before taking the head token.
PREPOSITIONS = frozenset({"of", "on", "in", "with", "at", "near", "above",
                          "under", "behind", "by", "for", "from", "to"})

# Pairs that never (or almost never) relate still keep this much relevance.
RELEVANCE_FLOOR = 0.01

DEFAULT_ALPHA = 0.1


def head_word(class_name: str) -> str:
    """Representative token of an object-class name.

    Lowercase, truncate at the first preposition, strip non-alphabetic
    characters per token, return the rightmost remaining token.  Falls back
    to the lowercased input when nothing remains.
    """
    lowered = class_name.lower()
    kept = []
    for tok in lowered.split():
        if tok in PREPOSITIONS:
            break
        kept.append(tok)
    cleaned = ["".join(ch for ch in tok if ch.isalpha()) for tok in kept]
    cleaned = [tok for tok in cleaned if tok]
    if not cleaned:
        return lowered
    return cleaned[-1]


@dataclass(eq=False)
class PairStats:
    """Sparse per-head-pair counts: co-occurrences, relations, predicate tallies."""

    n_predicates: int
    head_of: dict[int, str]                       # object-class id -> head word
    cooc: dict[tuple[str, str], int]
    rel: dict[tuple[str, str], int]
    pred_counts: dict[tuple[str, str], np.ndarray]
    vocab_hash: str

    def key(self, s: int, o: int) -> tuple[str, str]:
        return self.head_of[s], self.head_of[o]


def build_pair_stats(dataset: Dataset) -> PairStats:
    """Count, per ordered head-word pair, co-occurrences and annotations.

    Every ordered pair of distinct regions in an image contributes one
    co-occurrence; every annotation contributes one relation count and one
    predicate count.  Duplicate annotations count multiply.
    """
    if not dataset.records:
        raise ValueError("empty dataset")
    vocab = dataset.vocab
    head_of = {i: head_word(name) for i, name in enumerate(vocab.object_classes)}
    cooc: dict[tuple[str, str], int] = {}
    rel: dict[tuple[str, str], int] = {}
    pred_counts: dict[tuple[str, str], np.ndarray] = {}
    nv = vocab.n_predicates
    for record in dataset.records:
        heads = {r.region_id: head_of[r.class_id] for r in record.regions}
        ids = [r.region_id for r in record.regions]
        for a in ids:
            for b in ids:
                if a == b:
                    continue
                key = (heads[a], heads[b])
                cooc[key] = cooc.get(key, 0) + 1
        for ann in record.annotations:
            key = (heads[ann.subject_region], heads[ann.object_region])
            rel[key] = rel.get(key, 0) + 1
            counts = pred_counts.get(key)
            if counts is None:
                counts = pred_counts[key] = np.zeros(nv, dtype=np.int64)
            counts[ann.predicate_id] += 1
    return PairStats(nv, head_of, cooc, rel, pred_counts, vocab.vocab_hash)


def predicate_totals(stats: PairStats) -> np.ndarray:
    """Per-predicate annotation counts pooled over all head pairs."""
    totals = np.zeros(stats.n_predicates, dtype=np.int64)
    for counts in stats.pred_counts.values():
        totals += counts
    return totals


def relevance_estimate(stats: PairStats, s: int, o: int) -> float:
    """Fraction of co-occurrences of the head pair that were annotated,
    floored at RELEVANCE_FLOOR; unseen pairs return the floor."""
    key = stats.key(s, o)
    n_cooc = stats.cooc.get(key, 0)
    if n_cooc == 0:
        return RELEVANCE_FLOOR
    return max(RELEVANCE_FLOOR, stats.rel.get(key, 0) / n_cooc)


def internal_constraint(stats: PairStats, s: int, o: int,
                        alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Smoothed predicate distribution given the head pair of (s, o).

    Additive smoothing keeps every probability positive; an unseen pair
    degenerates to the uniform distribution.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    key = stats.key(s, o)
    counts = stats.pred_counts.get(key)
    if counts is None:
        counts = np.zeros(stats.n_predicates)
    total = stats.rel.get(key, 0)
    return (counts + alpha) / (total + alpha * stats.n_predicates)


# ---------------------------------------------------------------------------
# Serialization (sorted keys, integer counts; byte-reproducible)
# ---------------------------------------------------------------------------

def stats_to_doc(stats: PairStats) -> dict:
    pairs = {}
    for key, n_cooc in stats.cooc.items():
        entry: dict = {"cooc": int(n_cooc), "rel": int(stats.rel.get(key, 0))}
        counts = stats.pred_counts.get(key)
        if counts is not None:
            entry["preds"] = {str(v): int(c) for v, c in enumerate(counts) if c}
        pairs["|".join(key)] = entry
    return {"n_predicates": stats.n_predicates,
            "head_of": {str(i): h for i, h in stats.head_of.items()},
            "pairs": pairs}


def stats_from_doc(doc: dict, vocab_hash: str) -> PairStats:
    nv = int(doc["n_predicates"])
    head_of = {int(i): h for i, h in doc["head_of"].items()}
    cooc, rel, pred_counts = {}, {}, {}
    for name, entry in doc["pairs"].items():
        a, b = name.split("|")
        key = (a, b)
        cooc[key] = int(entry["cooc"])
        if entry["rel"]:
            rel[key] = int(entry["rel"])
        if "preds" in entry:
            counts = np.zeros(nv, dtype=np.int64)
            for v, c in entry["preds"].items():
                counts[int(v)] = int(c)
            pred_counts[key] = counts
    return PairStats(nv, head_of, cooc, rel, pred_counts, vocab_hash)


def save_stats(stats: PairStats, path, seed: int = 0) -> None:
    doc = artifact_header("stats", stats.vocab_hash, seed)
    doc.update(stats_to_doc(stats))
    dump_json_artifact(doc, path)


def load_stats(path, vocab_hash: str | None = None) -> PairStats:
    doc = load_json_artifact(path)
    check_artifact(doc, "stats", vocab_hash, str(path))
    return stats_from_doc(doc, doc["vocab_hash"])
