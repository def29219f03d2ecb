"""Constraint distributions distilled into the classifier heads.

Two sources: similarity of predicate embeddings (a tempered softmax over
cosine similarities, one row per conditioning predicate) and pair-conditional
predicate statistics from the training annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (artifact_header, check_artifact, dump_json_artifact,
                   load_json_artifact, softmax)
from .stats import DEFAULT_ALPHA, PairStats, internal_constraint, stats_from_doc, stats_to_doc

# Probabilities are floored here before taking logs, keeping constraint
# values finite (log 1e-8 is about -18.4).
PROB_FLOOR = 1e-8

DEFAULT_TAU = 10.0


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|); defined as 0 when either vector has zero norm."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / np.where(norms > 0, norms, 1.0)[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = norms == 0.0
    sims[zero, :] = 0.0
    sims[:, zero] = 0.0
    # exact self-similarity keeps every diagonal entry its row maximum
    sims[np.diag_indices_from(sims)] = np.where(zero, 0.0, 1.0)
    return sims


@dataclass(eq=False)
class SemanticMatrix:
    """Row-stochastic matrix; row v is the distribution over predicates
    conditioned on v being annotated."""

    probs: np.ndarray
    tau: float
    vocab_hash: str = ""

    kind = "sk"

    def row(self, predicate_id: int) -> np.ndarray:
        return self.probs[predicate_id]


@dataclass(eq=False)
class InternalKnowledge:
    """Pair-conditional predicate distributions backed by PairStats;
    rows materialize on demand for an (s, o) object-class pair."""

    stats: PairStats
    alpha: float = DEFAULT_ALPHA

    kind = "ik"

    @property
    def vocab_hash(self) -> str:
        return self.stats.vocab_hash

    def row(self, context: tuple[int, int]) -> np.ndarray:
        s, o = context
        return internal_constraint(self.stats, s, o, self.alpha)


def build_semantic_matrix(pred_vectors, tau: float = DEFAULT_TAU,
                          vocab_hash: str = "") -> SemanticMatrix:
    """Tempered softmax over pairwise embedding cosine similarities."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    vectors = np.asarray(pred_vectors, dtype=float)
    sims = _similarity_matrix(vectors)
    return SemanticMatrix(softmax(tau * sims, axis=1), tau, vocab_hash)


def constraint_values(matrix, context) -> np.ndarray:
    """Elementwise log of the constraint row, floored so values stay finite.

    `context` is a predicate id for semantic matrices and an (s, o) pair of
    object-class ids for internal knowledge.
    """
    return np.log(np.maximum(matrix.row(context), PROB_FLOOR))


def log_rows(matrix: SemanticMatrix) -> np.ndarray:
    """All constraint rows of a semantic matrix at once (training fast path)."""
    return np.log(np.maximum(matrix.probs, PROB_FLOOR))


def export_matrix(matrix: SemanticMatrix, path) -> None:
    """Dense text dump (row-major, 6 decimal places) for inspection."""
    lines = [" ".join(f"{x:.6f}" for x in row) for row in matrix.probs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def save_semantic(matrix: SemanticMatrix, path, seed: int = 0) -> None:
    doc = artifact_header("knowledge", matrix.vocab_hash, seed)
    doc["kind"] = "sk"
    doc["tau"] = matrix.tau
    doc["matrix"] = [[float(x) for x in row] for row in matrix.probs]
    dump_json_artifact(doc, path)


def save_internal(knowledge: InternalKnowledge, path, seed: int = 0) -> None:
    doc = artifact_header("knowledge", knowledge.vocab_hash, seed)
    doc["kind"] = "ik"
    doc["alpha"] = knowledge.alpha
    doc["stats"] = stats_to_doc(knowledge.stats)
    dump_json_artifact(doc, path)


def load_knowledge(path, vocab_hash: str | None = None):
    """Load either knowledge artifact; returns SemanticMatrix or InternalKnowledge."""
    doc = load_json_artifact(path)
    check_artifact(doc, "knowledge", vocab_hash, str(path))
    if doc.get("kind") == "sk":
        return SemanticMatrix(np.array(doc["matrix"], dtype=float),
                              float(doc["tau"]), doc["vocab_hash"])
    if doc.get("kind") == "ik":
        return InternalKnowledge(stats_from_doc(doc["stats"], doc["vocab_hash"]),
                                 float(doc["alpha"]))
    raise ValueError(f"{path}: unknown knowledge kind {doc.get('kind')!r}")
