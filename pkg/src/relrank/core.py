"""Domain types, probability-vector utilities, and file ingestion.

Datasets live in line-delimited JSON: a header record declaring the class
lists and feature dimension, then one record per image.  Embeddings use the
common ``token v1 ... vD`` text layout.  Everything constructed here is
immutable afterwards and safe for concurrent reads.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"


class DatasetError(ValueError):
    """A dataset, embedding, or artifact file violates its declared format."""


class ArtifactMismatchError(ValueError):
    """Artifacts built against different vocabularies were combined."""


# ---------------------------------------------------------------------------
# Probability-vector utilities
# ---------------------------------------------------------------------------

def normalize(values) -> np.ndarray:
    """Scale a non-negative vector so it sums to 1."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("expected a 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite mass")
    if np.any(arr < 0):
        raise ValueError("negative mass")
    total = arr.sum()
    if total <= 0.0:
        raise ValueError("degenerate distribution: total mass is zero")
    return arr / total


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def is_distribution(p, tol: float = 1e-6) -> bool:
    arr = np.asarray(p, dtype=float)
    return bool(arr.ndim == 1 and np.all(arr >= 0) and abs(arr.sum() - 1.0) <= tol)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Object and predicate class lists with dense integer ids (file order)."""

    object_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]
    _object_ids: dict = field(init=False, repr=False, compare=False)
    _predicate_ids: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for kind, names in (("object", self.object_classes),
                            ("predicate", self.predicate_classes)):
            if len(set(names)) != len(names):
                raise DatasetError(f"duplicate {kind} class names")
        object.__setattr__(self, "_object_ids",
                           {name: i for i, name in enumerate(self.object_classes)})
        object.__setattr__(self, "_predicate_ids",
                           {name: i for i, name in enumerate(self.predicate_classes)})

    @property
    def n_objects(self) -> int:
        return len(self.object_classes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_classes)

    def object_id(self, name: str) -> int:
        return self._object_ids[name]

    def predicate_id(self, name: str) -> int:
        return self._predicate_ids[name]

    @property
    def vocab_hash(self) -> str:
        payload = json.dumps([list(self.object_classes),
                              list(self.predicate_classes)]).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(eq=False)
class Region:
    region_id: int
    bbox: tuple[float, float, float, float]  # x, y, width, height; top-left origin
    class_id: int
    feature: np.ndarray | None = None


@dataclass(frozen=True)
class RelAnnotation:
    subject_region: int
    object_region: int
    predicate_id: int


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    regions: list[Region]
    annotations: list[RelAnnotation]

    def __post_init__(self):
        by_id = {r.region_id: r for r in self.regions}
        if len(by_id) != len(self.regions):
            raise DatasetError(f"duplicate region ids in image {self.image_id}")
        for ann in self.annotations:
            for rid in (ann.subject_region, ann.object_region):
                if rid not in by_id:
                    raise DatasetError(f"unknown region {rid} in image {self.image_id}")
            if ann.subject_region == ann.object_region:
                raise DatasetError(
                    f"self-relationship on region {ann.subject_region} "
                    f"in image {self.image_id}")
        self._by_id = by_id

    def region(self, region_id: int) -> Region:
        return self._by_id[region_id]


@dataclass(eq=False)
class Dataset:
    """A loaded annotation file: vocabulary, declared feature dim, images."""

    vocab: Vocabulary
    feature_dim: int
    records: list[ImageRecord]


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def load_dataset(path) -> Dataset:
    """Parse a line-delimited annotation file (header record + one per image)."""
    path = Path(path)
    vocab: Vocabulary | None = None
    feature_dim = 0
    records: list[ImageRecord] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name} line {lineno}: invalid JSON ({exc})")
            if vocab is None:
                vocab, feature_dim = _parse_header(doc, lineno, path.name)
            else:
                records.append(_parse_image(doc, vocab, feature_dim, lineno, path.name))
    if vocab is None:
        raise DatasetError(f"{path.name}: empty file, missing header record")
    return Dataset(vocab, feature_dim, records)


def _parse_header(doc, lineno: int, name: str) -> tuple[Vocabulary, int]:
    for key in ("object_classes", "predicate_classes", "feature_dim"):
        if key not in doc:
            raise DatasetError(f"{name} line {lineno}: header missing field {key!r}")
    feature_dim = doc["feature_dim"]
    if not isinstance(feature_dim, int) or feature_dim < 0:
        raise DatasetError(f"{name} line {lineno}: field feature_dim must be a "
                           f"non-negative integer, got {feature_dim!r}")
    vocab = Vocabulary(tuple(doc["object_classes"]), tuple(doc["predicate_classes"]))
    return vocab, feature_dim


def _parse_image(doc, vocab: Vocabulary, feature_dim: int,
                 lineno: int, name: str) -> ImageRecord:
    def fail(msg):
        raise DatasetError(f"{name} line {lineno}: {msg}")

    image_id = doc.get("image_id")
    if not isinstance(image_id, str):
        fail("field image_id missing or not a string")
    regions = []
    for rdoc in doc.get("regions", []):
        bbox = rdoc.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            fail(f"field bbox must have 4 values in image {image_id}")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            fail(f"field bbox has non-positive size in image {image_id}")
        cls = rdoc.get("class")
        if cls not in vocab._object_ids:
            fail(f"field class: unknown object class {cls!r} in image {image_id}")
        feature = rdoc.get("feature")
        if feature is not None:
            if feature_dim == 0:
                fail(f"field feature present but header declares feature_dim 0 "
                     f"in image {image_id}")
            if len(feature) != feature_dim:
                fail(f"field feature has length {len(feature)}, header declares "
                     f"{feature_dim}, in image {image_id}")
            feature = np.asarray(feature, dtype=float)
        regions.append(Region(int(rdoc["id"]), (x, y, w, h),
                              vocab.object_id(cls), feature))
    region_ids = {r.region_id for r in regions}
    annotations = []
    for adoc in doc.get("relationships", []):
        sub, obj, pred = adoc.get("sub"), adoc.get("obj"), adoc.get("pred")
        for rid in (sub, obj):
            if rid not in region_ids:
                fail(f"unknown region {rid} in image {image_id}")
        if sub == obj:
            fail(f"self-relationship on region {sub} in image {image_id}")
        if pred not in vocab._predicate_ids:
            fail(f"field pred: unknown predicate {pred!r} in image {image_id}")
        annotations.append(RelAnnotation(int(sub), int(obj), vocab.predicate_id(pred)))
    return ImageRecord(image_id, regions, annotations)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back out; loading the result reproduces it field-by-field."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"object_classes": list(dataset.vocab.object_classes),
                  "predicate_classes": list(dataset.vocab.predicate_classes),
                  "feature_dim": dataset.feature_dim}
        fh.write(_json_line(header))
        for rec in dataset.records:
            regions = []
            for r in rec.regions:
                rdoc = {"id": r.region_id, "bbox": [float(v) for v in r.bbox],
                        "class": dataset.vocab.object_classes[r.class_id]}
                if r.feature is not None:
                    rdoc["feature"] = [float(v) for v in r.feature]
                regions.append(rdoc)
            rels = [{"sub": a.subject_region,
                     "pred": dataset.vocab.predicate_classes[a.predicate_id],
                     "obj": a.object_region} for a in rec.annotations]
            fh.write(_json_line({"image_id": rec.image_id, "regions": regions,
                                 "relationships": rels}))


def _json_line(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]

    def vector(self, token: str) -> np.ndarray:
        """Vector for a token; out-of-vocabulary tokens map to the zero vector."""
        vec = self.vectors.get(token)
        if vec is None:
            return np.zeros(self.dim)
        return vec

    def phrase_vector(self, phrase: str) -> np.ndarray:
        """Mean of the per-token vectors of a (possibly multi-word) name."""
        tokens = phrase.split()
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self.vector(tok) for tok in tokens], axis=0)


def load_embeddings(path, vocab: Vocabulary) -> tuple[EmbeddingTable, np.ndarray]:
    """Load a text embedding file and build one vector per predicate class.

    Multi-token predicate names get the mean of their token vectors; tokens
    missing from the file contribute zero vectors and log a warning.
    """
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if not values:
                raise DatasetError(f"{path.name} line {lineno}: no values for "
                                   f"token {token!r}")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DatasetError(f"{path.name} line {lineno}: expected {dim} "
                                   f"values, got {len(values)}")
            if token in vectors:
                raise DatasetError(f"{path.name} line {lineno}: duplicate token "
                                   f"{token!r}")
            vectors[token] = np.array([float(v) for v in values])
    if dim is None:
        raise DatasetError(f"{path.name}: empty embedding file")
    table = EmbeddingTable(dim, vectors)
    rows = []
    for name in vocab.predicate_classes:
        for tok in name.split():
            if tok not in vectors:
                logger.warning("no embedding for token %r (predicate %r); "
                               "using zero vector", tok, name)
        rows.append(table.phrase_vector(name))
    return table, np.vstack(rows)


# ---------------------------------------------------------------------------
# Artifact headers
# ---------------------------------------------------------------------------

def artifact_header(kind: str, vocab_hash: str, seed: int) -> dict:
    return {"format": f"relrank-{kind}", "version": TOOL_VERSION,
            "vocab_hash": vocab_hash, "seed": int(seed)}


def check_artifact(doc: dict, kind: str, vocab_hash: str | None, source: str) -> None:
    expected_format = f"relrank-{kind}"
    if doc.get("format") != expected_format:
        raise DatasetError(f"{source}: not a {expected_format} artifact "
                           f"(format {doc.get('format')!r})")
    if vocab_hash is not None and doc.get("vocab_hash") != vocab_hash:
        raise ArtifactMismatchError(
            f"vocabulary hash mismatch: {source} has {doc.get('vocab_hash')}, "
            f"expected {vocab_hash}")


def dump_json_artifact(doc: dict, path) -> None:
    Path(path).write_text(_json_line(doc), encoding="utf-8")


def load_json_artifact(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: invalid JSON artifact ({exc})")
