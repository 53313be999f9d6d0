"""Binary feature modalities: opcode 3-grams, API calls, permissions.

Column spaces are frozen artifacts. An :class:`NgramVocabulary` is built
from the training split only; :class:`FeatureList` comes from configuration.
Both carry a content fingerprint, and every vector or matrix produced against
them carries the same fingerprint so train/test skew is caught at load time.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .apk import ApkStaticFeatures
from .artifacts import fingerprint
from .errors import EmptyCorpus, FingerprintMismatch
from .symbols import UNKNOWN

MODALITIES = ("opcode", "api", "permission")


def ngrams(symbols, n=3):
    """Multiset of the ``len(symbols) - n + 1`` contiguous windows."""
    if len(symbols) < n:
        return Counter()
    return Counter(zip(*(symbols[i:] for i in range(n))))


def _record_ngrams(symbols, n, include_unknown):
    grams = ngrams(symbols, n)
    if not include_unknown:
        grams = Counter({g: c for g, c in grams.items() if UNKNOWN not in g})
    return grams


def api_key(signature):
    """``pkg.Cls->name(desc)ret`` -> ``pkg.Cls->name``."""
    return signature.split("(", 1)[0]


@dataclass(frozen=True)
class NgramVocabulary:
    n: int
    keys: tuple
    built_from: str = ""
    include_unknown: bool = False
    modality: str = "opcode"

    @property
    def dimension(self):
        return len(self.keys)

    @property
    def fingerprint(self):
        return fingerprint({
            "modality": self.modality,
            "n": self.n,
            "include_unknown": self.include_unknown,
            "keys": [" ".join(k) for k in self.keys],
        })

    def index(self):
        return {k: i for i, k in enumerate(self.keys)}

    def record_keys(self, record):
        return set(_record_ngrams(record.opcode_symbols, self.n, self.include_unknown))

    def to_json(self):
        return {
            "modality": self.modality,
            "n": self.n,
            "keys": [" ".join(k) for k in self.keys],
            "fingerprint": self.fingerprint,
            "built_from": self.built_from,
            "include_unknown": self.include_unknown,
        }

    @classmethod
    def from_json(cls, doc):
        vocab = cls(
            int(doc["n"]),
            tuple(tuple(k.split(" ")) for k in doc["keys"]),
            doc.get("built_from", ""),
            bool(doc.get("include_unknown", False)),
        )
        if "fingerprint" in doc and doc["fingerprint"] != vocab.fingerprint:
            raise FingerprintMismatch("vocabulary file fingerprint does not match its keys")
        return vocab

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def build_vocab(records, n=3, built_from="", include_unknown=False):
    """Keep exactly the n-grams that occur at least once in ``records``.

    ``records`` must be the training split; passing test records here leaks
    the future into the column space.
    """
    counts = Counter()
    n_records = 0
    for rec in records:
        n_records += 1
        counts.update(_record_ngrams(rec.opcode_symbols, n, include_unknown))
    if n_records == 0:
        raise EmptyCorpus("no training records to build a vocabulary from")
    keys = tuple(sorted(k for k, c in counts.items() if c > 0))
    if not keys:
        raise EmptyCorpus(f"training records contain no {n}-grams")
    return NgramVocabulary(n, keys, built_from, include_unknown)


@dataclass(frozen=True)
class FeatureList:
    modality: str
    names: tuple

    def __post_init__(self):
        if self.modality not in ("api", "permission"):
            raise ValueError(f"feature lists cover api/permission, not {self.modality!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"{self.modality} feature list has duplicate names")

    @property
    def dimension(self):
        return len(self.names)

    @property
    def keys(self):
        return self.names

    @property
    def fingerprint(self):
        return fingerprint({"modality": self.modality, "names": list(self.names)})

    def index(self):
        return {k: i for i, k in enumerate(self.names)}

    def record_keys(self, record):
        if self.modality == "api":
            return {api_key(a) for a in record.apis}
        return set(record.permissions)

    @classmethod
    def load(cls, modality, path=None):
        """One name per line; ``#`` starts a comment."""
        if path is None:
            fname = {"api": "api_features.txt", "permission": "permission_features.txt"}[modality]
            text = resources.files("timedroid.data").joinpath(fname).read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        names = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        return cls(modality, tuple(n for n in names if n))


@dataclass
class FeatureVector:
    modality: str
    fingerprint: str
    bits: np.ndarray


def _as_record(record):
    return record if isinstance(record, ApkStaticFeatures) else ApkStaticFeatures.from_dict(record)


def vectorize(record, columns, expected_fingerprint=None):
    """Presence/absence vector of ``record`` over ``columns``.

    Keys absent from ``columns`` are dropped: test-time patterns never seen in
    training cannot add dimensions.
    """
    if expected_fingerprint is not None and expected_fingerprint != columns.fingerprint:
        raise FingerprintMismatch(
            f"{columns.modality} columns have fingerprint {columns.fingerprint[:12]}, "
            f"pipeline expects {expected_fingerprint[:12]}"
        )
    record = _as_record(record)
    index = columns.index()
    bits = np.zeros(columns.dimension, dtype=np.uint8)
    for k in columns.record_keys(record):
        i = index.get(k)
        if i is not None:
            bits[i] = 1
    return FeatureVector(columns.modality, columns.fingerprint, bits)


@dataclass
class FeatureMatrix:
    modality: str
    fingerprint: str
    ids: list
    X: np.ndarray

    @property
    def dimension(self):
        return self.X.shape[1]

    def rows(self, ids):
        pos = {s: i for i, s in enumerate(self.ids)}
        return self.X[[pos[s] for s in ids]]

    def check(self, expected_fingerprint):
        if expected_fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"{self.modality} matrix fingerprint {self.fingerprint[:12]} != expected {expected_fingerprint[:12]}"
            )


def featurize(records, columns, expected_fingerprint=None):
    ids = []
    rows = []
    for rec in records:
        vec = vectorize(rec, columns, expected_fingerprint)
        ids.append(_as_record(rec).sha256)
        rows.append(vec.bits)
    X = np.vstack(rows) if rows else np.zeros((0, columns.dimension), dtype=np.uint8)
    return FeatureMatrix(columns.modality, columns.fingerprint, ids, X)


def write_matrix(path, matrix):
    """Compact NDJSON: a header line, then one line of set-bit indices per row."""
    with open(path, "w") as fh:
        header = {"modality": matrix.modality, "fingerprint": matrix.fingerprint, "dimension": matrix.dimension}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sha, row in zip(matrix.ids, matrix.X):
            fh.write(json.dumps({"sha256": sha, "bits": np.flatnonzero(row).tolist()}, separators=(",", ":")) + "\n")


def read_matrix(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        ids = []
        idx = []
        for line in fh:
            if line.strip():
                row = json.loads(line)
                ids.append(row["sha256"])
                idx.append(row["bits"])
    X = np.zeros((len(ids), header["dimension"]), dtype=np.uint8)
    for r, bits in enumerate(idx):
        X[r, bits] = 1
    return FeatureMatrix(header["modality"], header["fingerprint"], ids, X)


def write_matrix_csv(path, matrix, columns):
    """Dense CSV; the fingerprint rides in a leading comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# modality={matrix.modality} fingerprint={matrix.fingerprint}\n")
        w = csv.writer(fh)
        w.writerow(["sha256"] + [k if isinstance(k, str) else " ".join(k) for k in columns.keys])
        for sha, row in zip(matrix.ids, matrix.X):
            w.writerow([sha] + row.tolist())
