"""Recall@k evaluation, predicate frequency groups, and gain reporting.

Per image, ground-truth annotations are matched greedily in rank order,
one-to-one, against the top-k proposals; the reported R@k is the unweighted
mean over images that carry at least one annotation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (Dataset, ImageRecord, artifact_header, check_artifact,
                   dump_json_artifact, load_json_artifact)
from .rank import ModelBundle, Proposal, RankMode, rank_image

logger = logging.getLogger(__name__)

DEFAULT_KS = (50, 100)
GROUP_SIZES = (10, 30)  # top predicates, next band; the rest forms group 3


@dataclass(eq=False)
class EvalReport:
    task: str
    mode: str
    one_per_pair: bool
    aggregate: str                      # "image" or "annotation"
    k_values: tuple[int, ...]
    recall: dict[int, float]            # reported R@k
    micro_recall: dict[int, float]      # pooled matched/total, for recomposition
    per_predicate_recall: list[float]   # micro recall per predicate at max k
    per_predicate_gt: list[int]
    n_images: int
    n_skipped: int


def _gt_key(image: ImageRecord, ann, task: str):
    if task == "predcls":
        return (ann.subject_region, ann.object_region, ann.predicate_id)
    return (ann.subject_region, ann.object_region, ann.predicate_id,
            image.region(ann.subject_region).class_id,
            image.region(ann.object_region).class_id)


def _proposal_key(prop: Proposal, task: str):
    if task == "predcls":
        return (prop.subject_region, prop.object_region, prop.predicate)
    return (prop.subject_region, prop.object_region, prop.predicate,
            prop.subject_class, prop.object_class)


def match_annotations(proposals: list[Proposal], image: ImageRecord,
                      k: int, task: str) -> list[bool]:
    """Greedy one-to-one matching in rank order; one flag per annotation."""
    if k <= 0:
        raise ValueError("k must be positive")
    pending: dict = {}
    for i, ann in enumerate(image.annotations):
        pending.setdefault(_gt_key(image, ann, task), []).append(i)
    matched = [False] * len(image.annotations)
    for prop in proposals[:k]:
        bucket = pending.get(_proposal_key(prop, task))
        if bucket:
            matched[bucket.pop(0)] = True
    return matched


def recall_at_k(proposals: list[Proposal], image: ImageRecord, k: int,
                task: str = "predcls") -> float:
    """Fraction of the image's annotations retrieved among the top k."""
    if not image.annotations:
        raise ValueError(f"image {image.image_id} has no annotations")
    matched = match_annotations(proposals, image, k, task)
    return sum(matched) / len(matched)


def dataset_recall(dataset: Dataset, bundle: ModelBundle, mode: RankMode,
                   task: str, ks=DEFAULT_KS, aggregate: str = "image") -> EvalReport:
    """Evaluate R@k over every image with at least one annotation.

    `aggregate` picks the reported number: per-image mean (default) or pooled
    per-annotation recall; the pooled value is always recorded as well.
    """
    if aggregate not in ("image", "annotation"):
        raise ValueError("aggregate must be 'image' or 'annotation'")
    ks = tuple(sorted(int(k) for k in ks))
    if not ks or ks[0] <= 0:
        raise ValueError("k values must be positive")
    evaluable = [rec for rec in dataset.records if rec.annotations]
    if not evaluable:
        raise ValueError("no evaluable images: every image lacks annotations")
    k_max = ks[-1]
    nv = dataset.vocab.n_predicates
    image_sums = {k: 0.0 for k in ks}
    matched_totals = {k: 0 for k in ks}
    gt_total = 0
    pred_matched = np.zeros(nv, dtype=np.int64)
    pred_total = np.zeros(nv, dtype=np.int64)
    for rec in evaluable:
        proposals = rank_image(rec, bundle, mode, task, k_max)
        gt_total += len(rec.annotations)
        for ann in rec.annotations:
            pred_total[ann.predicate_id] += 1
        for k in ks:
            matched = match_annotations(proposals, rec, k, task)
            image_sums[k] += sum(matched) / len(matched)
            matched_totals[k] += sum(matched)
            if k == k_max:
                for ann, hit in zip(rec.annotations, matched):
                    if hit:
                        pred_matched[ann.predicate_id] += 1
    n_images = len(evaluable)
    micro = {k: matched_totals[k] / gt_total for k in ks}
    recall = ({k: image_sums[k] / n_images for k in ks}
              if aggregate == "image" else dict(micro))
    per_pred = [pred_matched[v] / pred_total[v] if pred_total[v] else 0.0
                for v in range(nv)]
    return EvalReport(task=task, mode=mode.relevance,
                      one_per_pair=mode.one_per_pair, aggregate=aggregate,
                      k_values=ks, recall=recall, micro_recall=micro,
                      per_predicate_recall=per_pred,
                      per_predicate_gt=pred_total.tolist(),
                      n_images=n_images,
                      n_skipped=len(dataset.records) - n_images)


# ---------------------------------------------------------------------------
# Frequency groups and macro recall
# ---------------------------------------------------------------------------

def predicate_counts(dataset: Dataset) -> np.ndarray:
    counts = np.zeros(dataset.vocab.n_predicates, dtype=np.int64)
    for rec in dataset.records:
        for ann in rec.annotations:
            counts[ann.predicate_id] += 1
    return counts


def frequency_groups_from_counts(counts) -> tuple[list[list[int]], list[float]]:
    """Partition predicates by descending training frequency (ties by id)."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("no annotations to group by frequency")
    nv = len(counts)
    order = np.lexsort((np.arange(nv), -counts))
    if nv <= GROUP_SIZES[0]:
        logger.warning("only %d predicate classes; returning a single group", nv)
        groups = [order.tolist()]
    else:
        cut1, cut2 = GROUP_SIZES[0], GROUP_SIZES[0] + GROUP_SIZES[1]
        groups = [order[:cut1].tolist(), order[cut1:cut2].tolist(),
                  order[cut2:].tolist()]
        groups = [g for g in groups if g]
    shares = [float(counts[g].sum()) / total for g in groups]
    return groups, shares


def frequency_groups(dataset: Dataset) -> tuple[list[list[int]], list[float]]:
    return frequency_groups_from_counts(predicate_counts(dataset))


def macro_recall(report: EvalReport, group) -> float:
    """Unweighted mean per-predicate recall over group members that occur
    at least once in the evaluation split."""
    group = list(group)
    if not group:
        raise ValueError("empty predicate group")
    recalls = [report.per_predicate_recall[v] for v in group
               if report.per_predicate_gt[v] > 0]
    if not recalls:
        raise ValueError("no predicate of the group occurs in the evaluation split")
    return float(np.mean(recalls))


def relative_gain(baseline: float, value: float) -> float:
    """Percentage change of value over a positive baseline."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (value - baseline) / baseline


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def report_to_doc(report: EvalReport, vocab_hash: str, seed: int,
                  train_counts=None) -> dict:
    """Report artifact; metric floats round to 6 decimals so re-runs are
    byte-stable."""
    metrics = {}
    for k in report.k_values:
        metrics[f"recall@{k}"] = round(report.recall[k], 6)
        metrics[f"micro_recall@{k}"] = round(report.micro_recall[k], 6)
    doc = artifact_header("report", vocab_hash, seed)
    doc.update({"task": report.task, "mode": report.mode,
                "one_per_pair": report.one_per_pair,
                "aggregate": report.aggregate,
                "n_images": report.n_images, "n_skipped": report.n_skipped,
                "per_predicate": {
                    "recall": [round(r, 6) for r in report.per_predicate_recall],
                    "gt": list(report.per_predicate_gt)}})
    if train_counts is not None:
        groups, shares = frequency_groups_from_counts(train_counts)
        k_max = report.k_values[-1]
        names = ["top10", "next30", "rest"][:len(groups)]
        group_doc = {}
        for name, group, share in zip(names, groups, shares):
            try:
                macro = round(macro_recall(report, group), 6)
            except ValueError:
                macro = None
            metrics[f"macro_recall@{k_max}/{name}"] = macro
            group_doc[name] = {"predicates": group,
                               "train_share": round(share, 6)}
        doc["groups"] = group_doc
    doc["metrics"] = metrics
    return doc


def save_report(doc: dict, path) -> None:
    dump_json_artifact(doc, path)


def load_report(path, vocab_hash: str | None = None) -> dict:
    doc = load_json_artifact(path)
    check_artifact(doc, "report", vocab_hash, str(path))
    return doc


def compare_reports(baseline: dict, other: dict) -> list[tuple[str, float, float, float]]:
    """Relative gain per metric present in both reports; skips null metrics."""
    rows = []
    for name in sorted(baseline.get("metrics", {})):
        base = baseline["metrics"][name]
        value = other.get("metrics", {}).get(name)
        if base is None or value is None:
            continue
        if base <= 0:
            continue
        rows.append((name, float(base), float(value), relative_gain(base, value)))
    return rows
