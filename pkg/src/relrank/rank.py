"""Relationship proposal scoring and per-image top-k ranking.

A proposal's score is the product of the subject/object class probabilities,
the predicate probability for the pair, and a pair-relevance factor chosen by
mode.  Ties break deterministically on (subject id, object id, predicate id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageRecord
from .model import (MlpHead, RelevanceHead, classify_batch, relevance_batch,
                    relevance_forward)
from .stats import PairStats, relevance_estimate

RELEVANCE_MODES = ("none", "re", "rp", "rpre")
TASKS = ("predcls", "sgcls")


@dataclass(frozen=True)
class RankMode:
    relevance: str = "none"
    one_per_pair: bool = False

    def __post_init__(self):
        if self.relevance not in RELEVANCE_MODES:
            raise ValueError(f"relevance must be one of {RELEVANCE_MODES}")


@dataclass(eq=False)
class ModelBundle:
    """Trained heads plus pair statistics, as ranking and evaluation need them."""

    predicate_head: MlpHead
    object_head: MlpHead | None = None
    relevance_head: RelevanceHead | None = None
    stats: PairStats | None = None


@dataclass(frozen=True)
class Proposal:
    image_id: str
    subject_region: int
    object_region: int
    subject_class: int
    predicate: int
    object_class: int
    score: float
    p_subject: float
    p_object: float
    p_predicate: float
    relevance: float


def score_relationship(p_s: float, p_o: float, p_v: float, relevance: float) -> float:
    """Product score of a candidate triplet and its pair relevance."""
    for name, value in (("p_s", p_s), ("p_o", p_o), ("p_v", p_v),
                        ("relevance", relevance)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} outside [0, 1]: {value}")
    return p_s * p_o * p_v * relevance


def relevance_of(mode: RankMode, stats: PairStats | None = None,
                 head: RelevanceHead | None = None,
                 x_s=None, x_o=None, s: int | None = None,
                 o: int | None = None) -> float:
    """Pair-relevance factor for one (subject, object) pair under a mode."""
    kind = mode.relevance
    if kind == "none":
        return 1.0
    value = 1.0
    if kind in ("re", "rpre"):
        if stats is None:
            raise ValueError(f"mode {kind} requires pair statistics")
        value *= relevance_estimate(stats, s, o)
    if kind in ("rp", "rpre"):
        if head is None:
            raise ValueError(f"mode {kind} requires a trained relevance head")
        value *= relevance_forward(head, x_s, x_o)
    return value


def rank_image(image: ImageRecord, bundle: ModelBundle, mode: RankMode,
               task: str, k: int) -> list[Proposal]:
    """Top-k proposals over all ordered region pairs of one image.

    PredCls uses ground-truth classes with unit probability; SGCls takes each
    region's class and probability from the object head's argmax.  Sorting is
    by score descending, then subject id, object id, predicate id ascending,
    and the returned list is a prefix of any longer-k ranking.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    regions = image.regions
    if len(regions) < 2:
        return []
    if any(r.feature is None for r in regions):
        raise ValueError(f"image {image.image_id} has regions without features")
    feats = np.vstack([r.feature for r in regions])
    region_ids = np.array([r.region_id for r in regions])
    n_r = len(regions)
    sub = np.repeat(np.arange(n_r), n_r)
    obj = np.tile(np.arange(n_r), n_r)
    keep = sub != obj
    sub, obj = sub[keep], obj[keep]

    if task == "predcls":
        classes = np.array([r.class_id for r in regions])
        class_prob = np.ones(n_r)
    else:
        if bundle.object_head is None:
            raise ValueError("sgcls requires a trained object head")
        obj_probs = classify_batch(bundle.object_head, feats)
        classes = obj_probs.argmax(axis=1)
        class_prob = obj_probs.max(axis=1)

    pair_x = np.hstack([feats[sub], feats[obj]])
    pv = classify_batch(bundle.predicate_head, pair_x)  # (n_pairs, |V|)

    rel = np.ones(len(sub))
    if mode.relevance in ("re", "rpre"):
        if bundle.stats is None:
            raise ValueError(f"mode {mode.relevance} requires pair statistics")
        rel *= np.array([relevance_estimate(bundle.stats, classes[a], classes[b])
                         for a, b in zip(sub, obj)])
    if mode.relevance in ("rp", "rpre"):
        if bundle.relevance_head is None:
            raise ValueError(f"mode {mode.relevance} requires a trained "
                             f"relevance head")
        rel *= relevance_batch(bundle.relevance_head, feats[sub], feats[obj])

    pair_scale = class_prob[sub] * class_prob[obj] * rel
    if mode.one_per_pair:
        best = pv.argmax(axis=1)
        rows = np.arange(len(sub))
        cand_sub, cand_obj, cand_v = sub, obj, best
        cand_pv = pv[rows, best]
        cand_score = pair_scale * cand_pv
        cand_rel, cand_scale_sub, cand_scale_obj = rel, class_prob[sub], class_prob[obj]
    else:
        n_pred = pv.shape[1]
        cand_sub = np.repeat(sub, n_pred)
        cand_obj = np.repeat(obj, n_pred)
        cand_v = np.tile(np.arange(n_pred), len(sub))
        cand_pv = pv.ravel()
        cand_score = (pair_scale[:, None] * pv).ravel()
        cand_rel = np.repeat(rel, n_pred)
        cand_scale_sub = np.repeat(class_prob[sub], n_pred)
        cand_scale_obj = np.repeat(class_prob[obj], n_pred)

    order = np.lexsort((cand_v, region_ids[cand_obj], region_ids[cand_sub],
                        -cand_score))
    top = order[:k]
    return [Proposal(image.image_id,
                     int(region_ids[cand_sub[i]]), int(region_ids[cand_obj[i]]),
                     int(classes[cand_sub[i]]), int(cand_v[i]),
                     int(classes[cand_obj[i]]),
                     float(cand_score[i]),
                     float(cand_scale_sub[i]), float(cand_scale_obj[i]),
                     float(cand_pv[i]), float(cand_rel[i]))
            for i in top]
