"""Time-stamped manifest, chronological train/test split, time-ordered CV folds."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field

from .errors import TooFewSamples, Unsatisfiable

log = logging.getLogger(__name__)

BENIGN, MALWARE = 0, 1
SOURCES = ("uploadDate", "first_submission_date")
_LABELS = {"0": BENIGN, "1": MALWARE, "benign": BENIGN, "malware": MALWARE}


@dataclass(frozen=True)
class TimestampedSample:
    sha256: str
    label: int
    timestamp: dt.date
    source: str = "uploadDate"
    path: str | None = None

    @property
    def year(self):
        return self.timestamp.year

    @property
    def order_key(self):
        return (self.timestamp, self.sha256)


def read_manifest(path):
    """Read ``sha256,label,timestamp,source`` rows (extra ``path`` column allowed;
    ``timestamp_source`` is accepted as an alias of ``source``)."""
    samples = []
    seen = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sha = row["sha256"].strip().lower()
            if sha in seen:
                raise ValueError(f"duplicate sha256 in manifest: {sha}")
            seen.add(sha)
            label = _LABELS.get(row["label"].strip().lower())
            if label is None:
                raise ValueError(f"{sha}: unknown label {row['label']!r}")
            source = (row.get("source") or row.get("timestamp_source") or "uploadDate").strip()
            samples.append(TimestampedSample(
                sha, label, dt.date.fromisoformat(row["timestamp"].strip()[:10]), source, row.get("path") or None
            ))
    return samples


def write_manifest(path, samples, with_path=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sha256", "label", "timestamp", "source"] + (["path"] if with_path else []))
        for s in samples:
            w.writerow([s.sha256, s.label, s.timestamp.isoformat(), s.source] + ([s.path or ""] if with_path else []))


@dataclass(frozen=True)
class SplitSpec:
    test_year: int
    test_malware: int
    test_benign: int
    target_benign_ratio: float = 9.0


@dataclass
class Split:
    train: list
    test: list
    excluded: list = field(default_factory=list)

    def to_json(self):
        return {"train": self.train, "test": self.test, "excluded": self.excluded}

    @classmethod
    def from_json(cls, doc):
        return cls(list(doc["train"]), list(doc["test"]), list(doc.get("excluded", [])))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=0)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def temporal_split(samples, spec):
    """Newest ``spec.test_*`` samples of each class within ``spec.test_year``
    form the test set; the rest train.

    The two classes are selected independently, so one class's cut can fall
    earlier than the other's. Non-test samples newer than the earliest test
    sample would then train on the future; they are moved to ``excluded``
    rather than silently kept.
    """
    by_class = {BENIGN: [], MALWARE: []}
    for s in sorted(samples, key=lambda s: s.order_key):
        by_class[s.label].append(s)

    test = []
    for label, want in ((MALWARE, spec.test_malware), (BENIGN, spec.test_benign)):
        pool = [s for s in by_class[label] if s.year == spec.test_year]
        if len(pool) < want:
            name = "malware" if label == MALWARE else "benign"
            raise Unsatisfiable(f"need {want} {name} samples in {spec.test_year}, have {len(pool)}")
        if want:
            test.extend(pool[-want:])
    test_ids = {s.sha256 for s in test}
    if not test:
        return Split(sorted(s.sha256 for s in samples), [], [])
    cut = min(s.order_key for s in test)[0]

    train, excluded = [], []
    for s in sorted(samples, key=lambda s: s.order_key):
        if s.sha256 in test_ids:
            continue
        (train if s.timestamp <= cut else excluded).append(s)
    if excluded:
        log.warning("excluded %d non-test samples dated after the test cut %s", len(excluded), cut)

    n_mal = sum(s.label == MALWARE for s in train)
    n_ben = len(train) - n_mal
    if n_mal:
        ratio = n_ben / n_mal
        if abs(ratio - spec.target_benign_ratio) > 0.1 * spec.target_benign_ratio:
            log.warning("train benign:malware ratio %.2f deviates >10%% from %.1f", ratio, spec.target_benign_ratio)
    return Split(
        [s.sha256 for s in train],
        [s.sha256 for s in sorted(test, key=lambda s: s.order_key)],
        [s.sha256 for s in excluded],
    )


@dataclass
class FoldPlan:
    k: int
    blocks: list        # k+1 lists of sample ids, oldest first
    folds: list         # k pairs (train_ids, val_ids)


def _block_bounds(samples, k):
    n = len(samples)
    bounds = [0]
    for j in range(1, k + 1):
        b = (j * n) // (k + 1)
        # Equal timestamps straddling a cut all move to the later block.
        while b > 0 and samples[b - 1].timestamp == samples[b].timestamp:
            b -= 1
        bounds.append(b)
    bounds.append(n)
    return bounds


def time_folds(samples, k=5):
    """Expanding-window folds: sort by time, cut into ``k+1`` contiguous
    blocks; fold ``i`` trains on blocks ``1..i`` and validates on ``i+1``."""
    if len(samples) < k + 1:
        raise TooFewSamples(f"{len(samples)} samples cannot form {k + 1} time blocks")
    ordered = sorted(samples, key=lambda s: s.order_key)
    bounds = _block_bounds(ordered, k)
    blocks = [[s.sha256 for s in ordered[a:b]] for a, b in zip(bounds, bounds[1:])]
    if any(not b for b in blocks):
        raise TooFewSamples(f"timestamp ties leave an empty block among {k + 1} (sizes {[len(b) for b in blocks]})")
    folds = []
    for i in range(1, k + 1):
        train = [sid for b in blocks[:i] for sid in b]
        folds.append((train, list(blocks[i])))
    return FoldPlan(k, blocks, folds)
