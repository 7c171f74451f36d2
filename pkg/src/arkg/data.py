"""Sentence-level classification instances and text feature providers.

Datasets are JSONL: one object per line with ``id``, ``tokens``,
``aspect_span`` ([start, end)), ``entity`` (IRI or "UNK"), ``label``
("P"|"N"|"O") and optional ``features``. Text features come either from a
precomputed binary sidecar or from a small deterministic token-hashing
encoder that stands in for a sentence encoder at desk scale.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .two_level import UNK_MARKER, normalize_aspect
from .util import stable_id_hash, substream

LABELS = ("P", "N", "O")
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}

MASK_TOKEN = "<mask>"


@dataclass
class AlscInstance:
    id: str
    tokens: list
    aspect_span: tuple
    entity: str
    label: str
    features: np.ndarray = None
    disambiguation: str = None

    def __post_init__(self):
        start, end = self.aspect_span
        if not (0 <= start < end <= len(self.tokens)):
            raise ValueError(
                "instance %s: aspect span %r outside tokens" % (self.id, self.aspect_span)
            )
        if self.label not in LABEL_INDEX:
            raise ValueError("instance %s: label %r not in %s" % (self.id, self.label, LABELS))

    @property
    def aspect(self):
        return normalize_aspect(" ".join(self.tokens[self.aspect_span[0] : self.aspect_span[1]]))


@dataclass
class AlscDataset:
    instances: list = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def labels(self):
        return np.asarray([LABEL_INDEX[inst.label] for inst in self.instances])

    def aspects(self):
        return sorted({inst.aspect for inst in self.instances})

    def aspect_counts(self):
        counts = {}
        for inst in self.instances:
            counts[inst.aspect] = counts.get(inst.aspect, 0) + 1
        return counts


def load_jsonl(path):
    instances = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            features = obj.get("features")
            instances.append(
                AlscInstance(
                    id=str(obj["id"]),
                    tokens=list(obj["tokens"]),
                    aspect_span=tuple(obj["aspect_span"]),
                    entity=obj.get("entity", UNK_MARKER),
                    label=obj["label"],
                    features=None if features is None else np.asarray(features, dtype=np.float32),
                    disambiguation=obj.get("disambiguation"),
                )
            )
    return AlscDataset(instances)


def save_jsonl(dataset, path):
    with open(path, "w") as f:
        for inst in dataset:
            obj = {
                "id": inst.id,
                "tokens": inst.tokens,
                "aspect_span": list(inst.aspect_span),
                "entity": inst.entity,
                "label": inst.label,
            }
            if inst.features is not None:
                obj["features"] = [float(x) for x in inst.features]
            if inst.disambiguation is not None:
                obj["disambiguation"] = inst.disambiguation
            f.write(json.dumps(obj, sort_keys=True) + "\n")


class ToyTextEncoder:
    """Deterministic token-hashing sentence encoder.

    Each token gets a fixed pseudo-random vector derived from a hash of
    (seed, token); the sentence vector is the token mean with aspect-span
    tokens double-weighted. A stand-in for a real text encoder so the rest
    of the pipeline can run self-contained.
    """

    def __init__(self, dim=32, seed=0):
        self.dim = dim
        self.seed = seed
        self._cache = {}

    def token_vector(self, token):
        if token not in self._cache:
            rng = substream(self.seed, "token", token)
            self._cache[token] = rng.normal(0.0, 1.0, self.dim) / np.sqrt(self.dim)
        return self._cache[token]

    def encode_tokens(self, tokens, aspect_span):
        if not tokens:
            raise ValueError("cannot encode an empty token list")
        matrix = np.stack([self.token_vector(t) for t in tokens])
        weights = np.ones(len(tokens))
        weights[aspect_span[0] : aspect_span[1]] = 2.0
        h = (matrix * weights[:, None]).sum(axis=0) / weights.sum()
        return h, matrix

    def features(self, instance):
        return self.encode_tokens(instance.tokens, instance.aspect_span)


class FileFeatureProvider:
    """Precomputed per-instance feature vectors keyed by instance id."""

    def __init__(self, dim, vectors):
        self.dim = dim
        self._by_hash = vectors

    def features(self, instance):
        key = stable_id_hash(instance.id)
        if key not in self._by_hash:
            raise KeyError("no precomputed features for instance %r" % instance.id)
        return self._by_hash[key].astype(np.float64), None

    @classmethod
    def from_instances(cls, dataset, dim):
        vectors = {}
        for inst in dataset:
            if inst.features is None or len(inst.features) != dim:
                raise ValueError("instance %r lacks a %d-dim feature vector" % (inst.id, dim))
            vectors[stable_id_hash(inst.id)] = np.asarray(inst.features, dtype=np.float32)
        return cls(dim, vectors)


def text_features(instance, provider):
    """(sentence vector, per-token matrix or None) for one instance."""
    return provider.features(instance)


_ARFT_MAGIC = b"ARFT"
_ARFT_VERSION = 1


def save_arft(path, dim, vectors_by_id):
    """Write the feature sidecar: (instance-id-hash u64, float32 row) records."""
    items = sorted(
        (stable_id_hash(k) if isinstance(k, str) else int(k), v)
        for k, v in vectors_by_id.items()
    )
    seen = set()
    for h, _ in items:
        if h in seen:
            raise ValueError("duplicate instance id hash %d" % h)
        seen.add(h)
    with open(path, "wb") as f:
        f.write(_ARFT_MAGIC)
        f.write(struct.pack("<IIQ", _ARFT_VERSION, dim, len(items)))
        for h, vec in items:
            vec = np.ascontiguousarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError("feature row has dim %s, expected %d" % (vec.shape, dim))
            f.write(struct.pack("<Q", h))
            f.write(vec.tobytes())


def load_arft(path):
    with open(path, "rb") as f:
        if f.read(4) != _ARFT_MAGIC:
            raise ValueError("not an ARFT sidecar: %s" % path)
        version, dim, count = struct.unpack("<IIQ", f.read(16))
        if version != _ARFT_VERSION:
            raise ValueError("unsupported ARFT version %d" % version)
        vectors = {}
        for _ in range(count):
            (h,) = struct.unpack("<Q", f.read(8))
            vectors[h] = np.frombuffer(f.read(4 * dim), dtype="<f4").astype(np.float32)
    return FileFeatureProvider(dim, vectors)
