import json

import pytest

from relrank.core import load_dataset
from relrank.synth import SynthSpec, generate

TINY_HEADER = {"object_classes": ["man", "horse", "traffic light"],
               "predicate_classes": ["on", "riding", "near"],
               "feature_dim": 2}

TINY_IMAGE = {"image_id": "im0",
              "regions": [
                  {"id": 0, "bbox": [0.0, 0.0, 10.0, 20.0], "class": "man",
                   "feature": [1.0, 0.0]},
                  {"id": 1, "bbox": [5.0, 5.0, 30.0, 15.0], "class": "horse",
                   "feature": [0.0, 1.0]}],
              "relationships": [{"sub": 0, "pred": "riding", "obj": 1}]}


def write_jsonl(path, docs):
    path.write_text("".join(json.dumps(d) + "\n" for d in docs),
                    encoding="utf-8")
    return path


@pytest.fixture
def tiny_dataset_path(tmp_path):
    return write_jsonl(tmp_path / "tiny.jsonl", [TINY_HEADER, TINY_IMAGE])


@pytest.fixture
def tiny_dataset(tiny_dataset_path):
    return load_dataset(tiny_dataset_path)


@pytest.fixture(scope="session")
def mini_synth():
    """One small generated world shared by module tests."""
    spec = SynthSpec(seed=7, images=60, test_images=20, n_object_classes=12,
                     n_heads=8, n_predicates=20, n_clusters=5, embed_dim=12,
                     regions_per_image=5, feature_dim=8)
    return generate(spec)
