"""Classifier and relevance heads over precomputed region features.

Backpropagation is written out by hand and checked against finite
differences in the test suite.  Training is plain mini-batch gradient
descent with a constant rate; given a fixed seed a run is bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .core import TOOL_VERSION, Dataset, softmax
from .distill import CE_FLOOR, DistillConfig, pi_schedule
from .knowledge import constraint_values, log_rows

DISTILL_MODES = ("off", "ik", "sk", "both")

# Index of the "this pair was annotated" class in the two-logit output.
ANNOTATED = 0


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    hidden: int = 32
    negative_ratio: float = 3.0
    distill: str = "off"
    distill_config: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be positive")
        if self.negative_ratio <= 0:
            raise ValueError("negative_ratio must be positive")
        if self.distill not in DISTILL_MODES:
            raise ValueError(f"distill must be one of {DISTILL_MODES}")


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MlpHead:
    """Fully connected stack: rectifier between layers, softmax on top."""

    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]   # (out,) per layer

    @classmethod
    def create(cls, dims, rng) -> "MlpHead":
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpHead":
        return MlpHead([w.copy() for w in self.weights],
                       [b.copy() for b in self.biases])


@dataclass(eq=False)
class RelevanceHead:
    """Two-layer pair head; class 0 of the two-logit softmax means annotated."""

    w_s: np.ndarray   # (hidden, feature)
    w_o: np.ndarray   # (hidden, feature)
    b_so: np.ndarray  # (hidden,)
    w_r: np.ndarray   # (2, hidden)
    b: np.ndarray     # (2,)

    @classmethod
    def create(cls, feature_dim: int, hidden: int, rng) -> "RelevanceHead":
        scale = 1.0 / np.sqrt(feature_dim)
        return cls(rng.normal(0.0, scale, (hidden, feature_dim)),
                   rng.normal(0.0, scale, (hidden, feature_dim)),
                   np.zeros(hidden),
                   rng.normal(0.0, 1.0 / np.sqrt(hidden), (2, hidden)),
                   np.zeros(2))

    @property
    def feature_dim(self) -> int:
        return self.w_s.shape[1]

    def copy(self) -> "RelevanceHead":
        return RelevanceHead(self.w_s.copy(), self.w_o.copy(), self.b_so.copy(),
                             self.w_r.copy(), self.b.copy())


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward_mlp(head: MlpHead, x: np.ndarray):
    """Batch forward pass; returns (probs, hiddens) with hiddens[0] = input."""
    hiddens = [x]
    h = x
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = h @ w.T + b
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite values at layer {i}")
        if i < last:
            h = np.maximum(z, 0.0)
            hiddens.append(h)
        else:
            return softmax(z, axis=1), hiddens
    raise AssertionError("head has no layers")


def classify(head: MlpHead, x) -> np.ndarray:
    """Class distribution for one feature vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (head.in_dim,):
        raise ValueError(f"feature length {x.shape} does not match head input "
                         f"({head.in_dim},)")
    probs, _ = _forward_mlp(head, x[None, :])
    return probs[0]


def classify_batch(head: MlpHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[1] != head.in_dim:
        raise ValueError(f"feature length {x.shape[1]} does not match head input "
                         f"{head.in_dim}")
    return _forward_mlp(head, x)[0]


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _backward_mlp(head: MlpHead, hiddens, probs, targets):
    """Gradients of the mean batch cross-entropy against (soft) targets."""
    n = probs.shape[0]
    delta = (probs - targets) / n
    grads_w = [None] * len(head.weights)
    grads_b = [None] * len(head.biases)
    for i in reversed(range(len(head.weights))):
        grads_w[i] = delta.T @ hiddens[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ head.weights[i]) * (hiddens[i] > 0)
    return grads_w, grads_b


def mlp_gradients(head: MlpHead, x, targets):
    """Mean batch loss and analytic gradients for an MlpHead.

    `targets` is either an integer label vector or an (n, C) matrix of soft
    targets (distillation uses the mixed target, with the projection fixed).
    Returns (loss, (grads_w, grads_b)).
    """
    x = np.asarray(x, dtype=float)
    probs, hiddens = _forward_mlp(head, x)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = _one_hot(targets.astype(int), head.n_classes)
    log_p = np.log(np.maximum(probs, CE_FLOOR))
    loss = float(-(targets * log_p).sum() / x.shape[0])
    return loss, _backward_mlp(head, hiddens, probs, targets)


def _forward_relevance(head: RelevanceHead, xs: np.ndarray, xo: np.ndarray):
    z = xs @ head.w_s.T + xo @ head.w_o.T + head.b_so
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite values at layer 0")
    h = np.maximum(z, 0.0)
    logits = h @ head.w_r.T + head.b
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite values at layer 1")
    return softmax(logits, axis=1), h


def relevance_forward(head: RelevanceHead, x_s, x_o) -> float:
    """Probability that the (subject, object) pair would be annotated."""
    x_s = np.asarray(x_s, dtype=float)
    x_o = np.asarray(x_o, dtype=float)
    if x_s.shape != (head.feature_dim,) or x_o.shape != (head.feature_dim,):
        raise ValueError("feature length does not match head input")
    probs, _ = _forward_relevance(head, x_s[None, :], x_o[None, :])
    return float(probs[0, ANNOTATED])


def relevance_batch(head: RelevanceHead, xs: np.ndarray, xo: np.ndarray) -> np.ndarray:
    return _forward_relevance(head, xs, xo)[0][:, ANNOTATED]


def relevance_gradients(head: RelevanceHead, xs, xo, annotated):
    """Mean binary cross-entropy on the two-logit softmax and its gradients.

    `annotated` is a boolean vector; True rows belong to class ANNOTATED.
    Returns (loss, grads) with grads keyed by parameter name.
    """
    xs = np.asarray(xs, dtype=float)
    xo = np.asarray(xo, dtype=float)
    annotated = np.asarray(annotated, dtype=bool)
    probs, h = _forward_relevance(head, xs, xo)
    n = len(annotated)
    labels = np.where(annotated, ANNOTATED, 1 - ANNOTATED)
    targets = _one_hot(labels, 2)
    log_p = np.log(np.maximum(probs, CE_FLOOR))
    loss = float(-(targets * log_p).sum() / n)
    delta = (probs - targets) / n
    grads = {"w_r": delta.T @ h, "b": delta.sum(axis=0)}
    dh = (delta @ head.w_r) * (h > 0)
    grads["w_s"] = dh.T @ xs
    grads["w_o"] = dh.T @ xo
    grads["b_so"] = dh.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# Sample assembly
# ---------------------------------------------------------------------------

def _require_features(dataset: Dataset) -> None:
    if dataset.feature_dim <= 0:
        raise ValueError("dataset declares no region features (feature_dim 0)")
    for rec in dataset.records:
        for r in rec.regions:
            if r.feature is None:
                raise ValueError(f"region {r.region_id} in image {rec.image_id} "
                                 f"has no feature vector")


def predicate_samples(dataset: Dataset):
    """One sample per annotation: concatenated pair features, predicate label,
    and the (subject, object) class ids for constraint lookup."""
    xs, ys, subs, objs = [], [], [], []
    for rec in dataset.records:
        for ann in rec.annotations:
            s_reg = rec.region(ann.subject_region)
            o_reg = rec.region(ann.object_region)
            xs.append(np.concatenate([s_reg.feature, o_reg.feature]))
            ys.append(ann.predicate_id)
            subs.append(s_reg.class_id)
            objs.append(o_reg.class_id)
    if not ys:
        raise ValueError("dataset has no annotations to train on")
    return (np.vstack(xs), np.asarray(ys, dtype=np.int64),
            np.asarray(subs, dtype=np.int64), np.asarray(objs, dtype=np.int64))


def object_samples(dataset: Dataset):
    xs = [r.feature for rec in dataset.records for r in rec.regions]
    ys = [r.class_id for rec in dataset.records for r in rec.regions]
    if not ys:
        raise ValueError("dataset has no regions to train on")
    return np.vstack(xs), np.asarray(ys, dtype=np.int64)


def relevance_samples(dataset: Dataset, negative_ratio: float, rng):
    """Positives are the unique annotated ordered pairs; negatives are a
    seeded uniform sample of unannotated ordered pairs at the given ratio."""
    pos_s, pos_o, neg_s, neg_o = [], [], [], []
    for rec in dataset.records:
        annotated = set()
        for ann in rec.annotations:
            pair = (ann.subject_region, ann.object_region)
            if pair in annotated:
                continue
            annotated.add(pair)
            pos_s.append(rec.region(ann.subject_region).feature)
            pos_o.append(rec.region(ann.object_region).feature)
        for a in rec.regions:
            for b in rec.regions:
                if a.region_id == b.region_id:
                    continue
                if (a.region_id, b.region_id) in annotated:
                    continue
                neg_s.append(a.feature)
                neg_o.append(b.feature)
    if not pos_s:
        raise ValueError("dataset has no annotated pairs to train on")
    n_neg = min(len(neg_s), int(round(negative_ratio * len(pos_s))))
    picked = rng.choice(len(neg_s), size=n_neg, replace=False) if n_neg else []
    xs = np.vstack(pos_s + [neg_s[i] for i in picked])
    xo = np.vstack(pos_o + [neg_o[i] for i in picked])
    labels = np.zeros(len(xs), dtype=bool)
    labels[:len(pos_s)] = True
    return xs, xo, labels


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def _n_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def train_object(dataset: Dataset, config: TrainConfig):
    """Plain cross-entropy training of the per-region object classifier."""
    _require_features(dataset)
    x, y = object_samples(dataset)
    rng = np.random.default_rng(config.seed)
    head = MlpHead.create([dataset.feature_dim, config.hidden,
                           dataset.vocab.n_objects], rng)
    trace = _train_classifier(head, x, y, config, rng, constraints=None)
    return head, trace


def train_predicate(dataset: Dataset, config: TrainConfig,
                    sk=None, ik=None):
    """Train the predicate head, optionally distilling constraint knowledge.

    The constraint row of a sample comes from its ground-truth context: the
    annotated predicate for semantic knowledge, the (subject, object) class
    pair for internal knowledge.
    """
    _require_features(dataset)
    x, y, subs, objs = predicate_samples(dataset)
    constraints = _constraint_rows(config, y, subs, objs, sk, ik,
                                   dataset.vocab.n_predicates)
    rng = np.random.default_rng(config.seed)
    head = MlpHead.create([2 * dataset.feature_dim, config.hidden,
                           dataset.vocab.n_predicates], rng)
    trace = _train_classifier(head, x, y, config, rng, constraints)
    return head, trace


def _constraint_rows(config: TrainConfig, y, subs, objs, sk, ik, n_predicates):
    """Per-sample constraint-value matrices for the enabled knowledge sources.

    lam == 0 makes the projection the identity, so training runs the plain
    cross-entropy path and matches a distillation-off run exactly.
    """
    if config.distill == "off" or config.distill_config.lam == 0:
        return None
    rows = []
    if config.distill in ("sk", "both"):
        if sk is None:
            raise ValueError("semantic distillation requires a semantic matrix")
        rows.append(log_rows(sk)[y])
    if config.distill in ("ik", "both"):
        if ik is None:
            raise ValueError("internal distillation requires internal knowledge")
        cache: dict[tuple[str, str], np.ndarray] = {}
        ik_rows = np.empty((len(y), n_predicates))
        for i, (s, o) in enumerate(zip(subs, objs)):
            key = ik.stats.key(int(s), int(o))
            row = cache.get(key)
            if row is None:
                row = cache[key] = constraint_values(ik, (int(s), int(o)))
            ik_rows[i] = row
        rows.append(ik_rows)
    return rows


def _project_batch(probs: np.ndarray, f: np.ndarray, lam: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_q = np.log(probs) + lam * f
    log_q -= log_q.max(axis=1, keepdims=True)
    q = np.exp(log_q)
    return q / q.sum(axis=1, keepdims=True)


def _train_classifier(head: MlpHead, x, y, config: TrainConfig, rng,
                      constraints) -> list[float]:
    n = len(y)
    n_batches = _n_batches(n, config.batch_size)
    dcfg = config.distill_config
    if constraints is not None and dcfg.total_iters is None:
        dcfg = replace(dcfg, total_iters=max(1, config.epochs * n_batches))
    onehot = _one_hot(y, head.n_classes)
    trace = []
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for chunk in _batches(n, config.batch_size):
            idx = order[chunk]
            xb = x[idx]
            probs, hiddens = _forward_mlp(head, xb)
            log_p = np.log(np.maximum(probs, CE_FLOOR))
            if constraints is not None:
                pi = pi_schedule(t, dcfg)
                q = np.mean([_project_batch(probs, f[idx], dcfg.lam)
                             for f in constraints], axis=0)
                targets = (1.0 - pi) * onehot[idx] + pi * q
            else:
                targets = onehot[idx]
            batch_loss = float(-(targets * log_p).sum() / len(idx))
            grads_w, grads_b = _backward_mlp(head, hiddens, probs, targets)
            for w, gw in zip(head.weights, grads_w):
                w -= config.learning_rate * gw
            for b, gb in zip(head.biases, grads_b):
                b -= config.learning_rate * gb
            epoch_loss += batch_loss * len(idx)
            t += 1
        trace.append(epoch_loss / n)
    return trace


def train_relevance(dataset: Dataset, config: TrainConfig):
    """Train the pair-relevance head on annotated vs sampled unannotated pairs."""
    _require_features(dataset)
    rng = np.random.default_rng(config.seed)
    xs, xo, labels = relevance_samples(dataset, config.negative_ratio, rng)
    head = RelevanceHead.create(dataset.feature_dim, config.hidden, rng)
    n = len(labels)
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for chunk in _batches(n, config.batch_size):
            idx = order[chunk]
            loss, grads = relevance_gradients(head, xs[idx], xo[idx], labels[idx])
            head.w_s -= config.learning_rate * grads["w_s"]
            head.w_o -= config.learning_rate * grads["w_o"]
            head.b_so -= config.learning_rate * grads["b_so"]
            head.w_r -= config.learning_rate * grads["w_r"]
            head.b -= config.learning_rate * grads["b"]
            epoch_loss += loss * len(idx)
        trace.append(epoch_loss / n)
    return head, trace


# ---------------------------------------------------------------------------
# Serialization (versioned binary, little-endian float64, bit-exact)
# ---------------------------------------------------------------------------

_MAGIC = b"RRHD"
_FORMAT_VERSION = 1
_KIND_CLASSIFIER = 0
_KIND_RELEVANCE = 1


def _pack_str(s: str) -> bytes:
    data = s.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += struct.calcsize(fmt)
        return values

    def take_str(self) -> str:
        (length,) = self.take("<I")
        s = self.data[self.pos:self.pos + length].decode("utf-8")
        self.pos += length
        return s

    def take_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos)
        self.pos += count * 8
        return arr.reshape(shape).astype(float)


def save_head(head, path, vocab_hash: str, seed: int = 0) -> None:
    kind = _KIND_RELEVANCE if isinstance(head, RelevanceHead) else _KIND_CLASSIFIER
    parts = [_MAGIC, struct.pack("<HBQ", _FORMAT_VERSION, kind, seed),
             _pack_str(vocab_hash), _pack_str(TOOL_VERSION)]
    if kind == _KIND_CLASSIFIER:
        parts.append(struct.pack("<I", len(head.weights)))
        for w in head.weights:
            parts.append(struct.pack("<II", *w.shape))
        for w, b in zip(head.weights, head.biases):
            parts.append(_pack_array(w))
            parts.append(_pack_array(b))
    else:
        hidden, feature = head.w_s.shape
        parts.append(struct.pack("<II", hidden, feature))
        for arr in (head.w_s, head.w_o, head.b_so, head.w_r, head.b):
            parts.append(_pack_array(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_head(path):
    """Returns (head, meta) where meta carries vocab_hash, seed, and version."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a head file (bad magic)")
    reader = _Reader(data[4:])
    version, kind, seed = reader.take("<HBQ")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported head format version {version}")
    vocab_hash = reader.take_str()
    tool_version = reader.take_str()
    meta = {"vocab_hash": vocab_hash, "seed": seed, "version": tool_version}
    if kind == _KIND_CLASSIFIER:
        (n_layers,) = reader.take("<I")
        shapes = [reader.take("<II") for _ in range(n_layers)]
        weights, biases = [], []
        for shape in shapes:
            weights.append(reader.take_array(shape))
            biases.append(reader.take_array((shape[0],)))
        return MlpHead(weights, biases), meta
    if kind == _KIND_RELEVANCE:
        hidden, feature = reader.take("<II")
        w_s = reader.take_array((hidden, feature))
        w_o = reader.take_array((hidden, feature))
        b_so = reader.take_array((hidden,))
        w_r = reader.take_array((2, hidden))
        b = reader.take_array((2,))
        return RelevanceHead(w_s, w_o, b_so, w_r, b), meta
    raise ValueError(f"{path}: unknown head kind {kind}")
