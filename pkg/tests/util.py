"""Shared test oracles: simplex-grid projection search, exhaustive matching,
finite differences, and small dataset builders.

These stay independent of the library code paths they check.
"""

from __future__ import annotations

import itertools

import numpy as np

from relrank.core import Dataset, ImageRecord, Region, RelAnnotation, Vocabulary

# ---------------------------------------------------------------------------
# Projection oracle: brute-force search over a simplex grid
# ---------------------------------------------------------------------------

_GRID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def simplex_grid(n: int, step: float = 0.01) -> np.ndarray:
    """All points of the n-simplex with coordinates on a `step` lattice."""
    units = round(1.0 / step)
    key = (n, units)
    if key not in _GRID_CACHE:
        rows = []
        for combo in itertools.combinations(range(units + n - 1), n - 1):
            parts = []
            prev = -1
            for c in combo:
                parts.append(c - prev - 1)
                prev = c
            parts.append(units + n - 2 - prev)
            rows.append(parts)
        _GRID_CACHE[key] = np.array(rows, dtype=float) * step
    return _GRID_CACHE[key]


def projection_objective(q, p, f, lam: float) -> float:
    """KL(q || p) - lam * E_q[f], with 0 log 0 = 0."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    mask = q > 0
    kl = float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))
    return kl - lam * float(np.dot(q, f))


def grid_min_objective(p, f, lam: float, step: float = 0.01) -> float:
    """Smallest objective value over the simplex grid (the search oracle)."""
    grid = simplex_grid(len(p), step)
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(grid > 0, grid * np.log(grid), 0.0).sum(axis=1)
    scores = qlogq - grid @ (np.log(p) + lam * np.asarray(f, dtype=float))
    return float(scores.min())


# ---------------------------------------------------------------------------
# Matching oracle: exhaustive maximum one-to-one matching
# ---------------------------------------------------------------------------

def max_matching(gt_keys, proposal_keys) -> int:
    """Maximum number of ground-truth items matchable one-to-one by key."""
    best = 0

    def extend(i: int, used: frozenset, count: int):
        nonlocal best
        if count + (len(gt_keys) - i) <= best:
            return
        if i == len(gt_keys):
            best = max(best, count)
            return
        extend(i + 1, used, count)
        for j, pk in enumerate(proposal_keys):
            if j not in used and pk == gt_keys[i]:
                extend(i + 1, used | {j}, count + 1)
    extend(0, frozenset(), 0)
    return best


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_difference(loss_fn, param: np.ndarray, index, h: float = 1e-5) -> float:
    """Two-sided finite difference of loss_fn at one coordinate of `param`."""
    original = param[index]
    param[index] = original + h
    up = loss_fn()
    param[index] = original - h
    down = loss_fn()
    param[index] = original
    return (up - down) / (2.0 * h)


def check_gradients(loss_fn, params, grads, rng, n_coords: int = 100,
                    rel_tol: float = 1e-4) -> int:
    """Compare analytic grads to central differences on sampled coordinates.

    `params` and `grads` are parallel lists of arrays.  Returns the number of
    coordinates checked; raises AssertionError on the first mismatch.
    """
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[which - 1] if which else 0))
        index = np.unravel_index(offset, params[which].shape)
        numeric = central_difference(loss_fn, params[which], index)
        analytic = float(grads[which][index])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom <= rel_tol, (
            f"gradient mismatch at param {which} index {index}: "
            f"analytic {analytic} vs numeric {numeric}")
    return len(picks)


# ---------------------------------------------------------------------------
# Held-out cluster mass (distillation effect measure)
# ---------------------------------------------------------------------------

def cluster_mass(head, dataset, cluster_of) -> float:
    """Mean probability mass on the annotated predicate's synonym cluster,
    over all annotations of a held-out dataset."""
    from relrank.model import classify_batch, predicate_samples
    x, y, _, _ = predicate_samples(dataset)
    probs = classify_batch(head, x)
    cluster_of = np.asarray(cluster_of)
    member = cluster_of[None, :] == cluster_of[y][:, None]
    return float((probs * member).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Golden pipeline (used by the determinism criterion and to create the
# committed golden report; run via the CLI so the whole surface is covered)
# ---------------------------------------------------------------------------

def run_golden_pipeline(root) -> "Path":
    """synth -> stats -> knowledge -> train -> rank -> eval, fixed seeds.

    Returns the path of the final report; every artifact lands under `root`.
    """
    from pathlib import Path
    from relrank.cli import main

    root = Path(root)
    data = root / "data"
    steps = [
        ["synth", "--out", str(data), "--seed", "0", "--images", "60",
         "--test-images", "20", "--object-classes", "12", "--heads", "8",
         "--predicates", "20", "--clusters", "5", "--regions", "6",
         "--feature-dim", "8"],
        ["stats", "build", "--dataset", str(data / "train.jsonl"),
         "--out", str(root / "stats.json")],
        ["knowledge", "semantic", "--dataset", str(data / "train.jsonl"),
         "--embeddings", str(data / "embeddings.txt"),
         "--out", str(root / "sk.json")],
        ["knowledge", "internal", "--stats", str(root / "stats.json"),
         "--out", str(root / "ik.json")],
        ["train", "predicate", "--dataset", str(data / "train.jsonl"),
         "--epochs", "3", "--distill", "both", "--sk", str(root / "sk.json"),
         "--ik", str(root / "ik.json"), "--out", str(root / "predicate.bin")],
        ["train", "object", "--dataset", str(data / "train.jsonl"),
         "--epochs", "3", "--out", str(root / "object.bin")],
        ["train", "relevance", "--dataset", str(data / "train.jsonl"),
         "--epochs", "3", "--out", str(root / "relevance.bin")],
        ["rank", "--dataset", str(data / "test.jsonl"),
         "--predicate-head", str(root / "predicate.bin"),
         "--relevance-head", str(root / "relevance.bin"),
         "--stats", str(root / "stats.json"), "--mode", "rpre",
         "--k", "20", "--out", str(root / "proposals.jsonl")],
        ["eval", "--dataset", str(data / "test.jsonl"),
         "--predicate-head", str(root / "predicate.bin"),
         "--relevance-head", str(root / "relevance.bin"),
         "--object-head", str(root / "object.bin"),
         "--stats", str(root / "stats.json"), "--mode", "rpre",
         "--out", str(root / "report.json")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"pipeline step failed: {argv}")
    return root / "report.json"


# ---------------------------------------------------------------------------
# Dataset builders
# ---------------------------------------------------------------------------

def make_vocab(objects=("man", "horse", "light"),
               predicates=("on", "riding", "near")) -> Vocabulary:
    return Vocabulary(tuple(objects), tuple(predicates))


def make_image(image_id: str, class_ids, annotations, vocab: Vocabulary,
               features=None) -> ImageRecord:
    regions = []
    for i, cid in enumerate(class_ids):
        feature = None if features is None else np.asarray(features[i], dtype=float)
        regions.append(Region(i, (float(i) * 10.0, 0.0, 5.0, 5.0), cid, feature))
    anns = [RelAnnotation(s, o, v) for s, o, v in annotations]
    return ImageRecord(image_id, regions, anns)


def make_dataset(images, vocab: Vocabulary, feature_dim: int = 0) -> Dataset:
    return Dataset(vocab, feature_dim, list(images))
