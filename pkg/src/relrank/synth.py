"""Seeded synthetic scene-graph generator with planted, verifiable structure.

The generator plants exactly what the pipeline exploits: predicate synonym
clusters in the embeddings, a Zipf frequency skew over predicates, a sparse
relevance table over head-word pairs deciding which region pairs get
annotated, and class-conditional region features.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (Dataset, EmbeddingTable, ImageRecord, Region, RelAnnotation,
                   Vocabulary, artifact_header, dump_json_artifact, save_dataset)
from .stats import head_word

ADJECTIVES = ("big", "small", "red", "blue", "old", "young", "tall", "short",
              "dark", "pale", "round", "flat")


@dataclass
class SynthSpec:
    seed: int = 0
    n_object_classes: int = 30
    n_heads: int = 20
    n_predicates: int = 50
    n_clusters: int = 10
    embed_dim: int = 24
    # small relative to embed_dim so intra-cluster cosines stay near 1 and a
    # tempered similarity row spreads over the cluster members
    cluster_noise: float = 0.03
    zipf_exponent: float = 1.0
    cluster_boost: float = 40.0
    relevant_fraction: float = 0.15
    relevant_low: float = 0.5
    relevant_high: float = 0.95
    background_relevance: float = 0.02
    images: int = 500
    test_images: int = 100
    regions_per_image: int = 8
    feature_dim: int = 16
    feature_noise: float = 0.25
    # per-region salience multiplies the pair annotation probability and is
    # written into the features, so the learned relevance branch can read
    # instance information that class-level counts cannot
    salience_range: float = 0.5
    salience_gain: float = 1.0
    # explicit head-pair -> annotation probability; generated from the seed
    # when left unset
    relevance_table: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("n_object_classes", "n_heads", "n_predicates", "n_clusters",
                     "embed_dim", "images", "test_images", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.regions_per_image < 2:
            raise ValueError("regions_per_image must be at least 2")
        if self.n_heads > self.n_object_classes:
            raise ValueError("n_heads cannot exceed n_object_classes")
        if self.n_clusters > self.n_predicates:
            raise ValueError("n_clusters cannot exceed n_predicates")
        for name in ("relevant_fraction", "relevant_low", "relevant_high",
                     "background_relevance"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.cluster_boost < 1.0:
            raise ValueError("cluster_boost must be >= 1")
        if not 0.0 <= self.salience_range < 1.0:
            raise ValueError("salience_range must lie in [0, 1)")


@dataclass(eq=False)
class SynthResult:
    spec: SynthSpec
    train: Dataset
    test: Dataset
    embeddings: EmbeddingTable
    pred_vectors: np.ndarray
    relevance_table: dict
    preferred_cluster: dict
    cluster_of: np.ndarray
    zipf_weights: np.ndarray


def zipf_share(n: int, exponent: float, top: int) -> float:
    """Analytic share of the `top` most frequent ranks under a Zipf law."""
    weights = np.arange(1, n + 1, dtype=float) ** -exponent
    return float(weights[:top].sum() / weights.sum())


def _object_class_names(spec: SynthSpec, heads: list[str]) -> list[str]:
    names = list(heads)
    for j in range(spec.n_object_classes - spec.n_heads):
        base = heads[j % spec.n_heads]
        if j % 3 == 2:
            names.append(f"{base} of {heads[(j + 1) % spec.n_heads]}")
        else:
            names.append(f"{ADJECTIVES[j % len(ADJECTIVES)]} {base}")
    if len(set(names)) != len(names):
        raise ValueError("object class name collision; reduce n_object_classes")
    return names


def generate(spec: SynthSpec) -> SynthResult:
    """Deterministic world + image sampling for a spec; the same seed always
    yields identical datasets, embeddings, and tables."""
    world_ss, train_ss, test_ss = np.random.SeedSequence(spec.seed).spawn(3)
    world = np.random.default_rng(world_ss)

    # head tokens must stay alphabetic so head_word keeps them distinct
    heads = [f"thing{chr(ord('a') + i // 26)}{chr(ord('a') + i % 26)}"
             for i in range(spec.n_heads)]
    object_names = _object_class_names(spec, heads)
    predicate_names = [f"rel{i:03d}" for i in range(spec.n_predicates)]
    vocab = Vocabulary(tuple(object_names), tuple(predicate_names))

    nv = spec.n_predicates
    zipf_weights = np.arange(1, nv + 1, dtype=float) ** -spec.zipf_exponent
    cluster_of = np.arange(nv) % spec.n_clusters

    centers = world.normal(size=(spec.n_clusters, spec.embed_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    pred_vectors = centers[cluster_of]
    if spec.cluster_noise > 0:
        pred_vectors = pred_vectors + spec.cluster_noise * world.normal(
            size=(nv, spec.embed_dim))
    table = EmbeddingTable(spec.embed_dim,
                           {name: pred_vectors[i]
                            for i, name in enumerate(predicate_names)})

    head_pairs = list(itertools.product(heads, heads))
    if spec.relevance_table is not None:
        overrides = {pair: float(p) for pair, p in spec.relevance_table.items()}
        for p in overrides.values():
            if not 0.0 <= p <= 1.0:
                raise ValueError("relevance probabilities must lie in [0, 1]")
        relevance_table = {pair: overrides.get(pair, spec.background_relevance)
                           for pair in head_pairs}
    else:
        relevant = world.random(len(head_pairs)) < spec.relevant_fraction
        values = world.uniform(spec.relevant_low, spec.relevant_high,
                               size=len(head_pairs))
        relevance_table = {pair: float(values[i]) if relevant[i]
                           else spec.background_relevance
                           for i, pair in enumerate(head_pairs)}
    preferred_cluster = {pair: int(c) for pair, c in
                         zip(head_pairs,
                             world.integers(0, spec.n_clusters,
                                            size=len(head_pairs)))}

    # one predicate distribution per preferred cluster
    pair_pred_probs = np.empty((spec.n_clusters, nv))
    for c in range(spec.n_clusters):
        w = zipf_weights * np.where(cluster_of == c, spec.cluster_boost, 1.0)
        pair_pred_probs[c] = w / w.sum()

    centroids = world.normal(size=(spec.n_object_classes, spec.feature_dim))
    salience_dir = world.normal(size=spec.feature_dim)
    salience_dir /= np.linalg.norm(salience_dir)
    class_heads = [head_word(name) for name in object_names]

    def sample_images(rng, count: int, prefix: str) -> list[ImageRecord]:
        records = []
        for idx in range(count):
            n_r = spec.regions_per_image
            classes = rng.integers(0, spec.n_object_classes, size=n_r)
            xy = rng.uniform(0.0, 100.0, size=(n_r, 2))
            wh = rng.uniform(5.0, 30.0, size=(n_r, 2))
            salience = rng.uniform(1.0 - spec.salience_range,
                                   1.0 + spec.salience_range, size=n_r)
            feats = (centroids[classes]
                     + spec.feature_noise * rng.normal(size=(n_r, spec.feature_dim))
                     + spec.salience_gain * (salience - 1.0)[:, None]
                     * salience_dir[None, :])
            regions = [Region(i, (xy[i, 0], xy[i, 1], wh[i, 0], wh[i, 1]),
                              int(classes[i]), feats[i])
                       for i in range(n_r)]
            annotations = []
            for a in range(n_r):
                for b in range(n_r):
                    if a == b:
                        continue
                    pair = (class_heads[classes[a]], class_heads[classes[b]])
                    prob = min(1.0, relevance_table[pair]
                               * salience[a] * salience[b])
                    if rng.random() < prob:
                        probs = pair_pred_probs[preferred_cluster[pair]]
                        v = int(rng.choice(nv, p=probs))
                        annotations.append(RelAnnotation(a, b, v))
            records.append(ImageRecord(f"{prefix}{idx:05d}", regions, annotations))
        return records

    train = Dataset(vocab, spec.feature_dim,
                    sample_images(np.random.default_rng(train_ss),
                                  spec.images, "train"))
    test = Dataset(vocab, spec.feature_dim,
                   sample_images(np.random.default_rng(test_ss),
                                 spec.test_images, "test"))
    return SynthResult(spec, train, test, table, pred_vectors,
                       relevance_table, preferred_cluster, cluster_of,
                       zipf_weights)


def write_embeddings(result: SynthResult, path) -> None:
    lines = []
    for i, name in enumerate(result.train.vocab.predicate_classes):
        values = " ".join(f"{x:.6f}" for x in result.pred_vectors[i])
        lines.append(f"{name} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_files(result: SynthResult, out_dir) -> dict[str, Path]:
    """Write dataset splits, embeddings, and the ground-truth relevance table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"train": out_dir / "train.jsonl", "test": out_dir / "test.jsonl",
             "embeddings": out_dir / "embeddings.txt",
             "relevance": out_dir / "relevance.json"}
    save_dataset(result.train, paths["train"])
    save_dataset(result.test, paths["test"])
    write_embeddings(result, paths["embeddings"])
    doc = artifact_header("relevance", result.train.vocab.vocab_hash,
                          result.spec.seed)
    doc["table"] = {"|".join(pair): round(p, 6)
                    for pair, p in result.relevance_table.items()}
    doc["preferred_cluster"] = {"|".join(pair): c
                                for pair, c in result.preferred_cluster.items()}
    doc["cluster_of"] = result.cluster_of.tolist()
    dump_json_artifact(doc, paths["relevance"])
    return paths
