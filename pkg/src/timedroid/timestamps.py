"""Release-date lower bounds from API introduction dates.

An app cannot predate the newest framework API it calls. Each API is
resolved in three stages, stopping at the first hit:

1. direct ``(class, method)`` lookup in the introduction table;
2. breadth-first walk over the class's ancestors (superclass before
   interfaces), taking the earliest date among hits at the shallowest depth;
3. ``(class, method)`` -> API level -> platform release date.

Comparison with the claimed timestamp is at year granularity by default.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .dex import DEFAULT_FRAMEWORK_PREFIXES, ApiRef

LEVELS = ("direct", "inherited", "api_level")
UNMATCHED = "unmatched"


def _date(text):
    return dt.date.fromisoformat(str(text).strip()[:10])


@dataclass
class VerificationTables:
    intro: dict = field(default_factory=dict)       # (class, method) -> date
    parents: dict = field(default_factory=dict)     # class -> [superclass, interfaces...]
    api_levels: dict = field(default_factory=dict)  # (class, method) -> int
    level_dates: dict = field(default_factory=dict)  # int -> date
    max_depth: int = 32
    lookups: Counter = field(default_factory=Counter)

    def validate(self):
        for key, level in self.api_levels.items():
            if not isinstance(level, int) or level < 1:
                raise ValueError(f"API level for {key} must be a positive integer, got {level!r}")
            if level not in self.level_dates:
                raise ValueError(f"API level {level} (used by {key}) has no release date")
        self._check_acyclic()
        return self

    def _check_acyclic(self):
        WHITE, GREY, BLACK = 0, 1, 2
        color = defaultdict(int)
        for root in self.parents:
            if color[root] != WHITE:
                continue
            stack = [(root, iter(self.parents.get(root, ())))]
            color[root] = GREY
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = BLACK
                    stack.pop()
                elif color[nxt] == GREY:
                    raise ValueError(f"inheritance cycle through {nxt}")
                elif color[nxt] == WHITE:
                    color[nxt] = GREY
                    stack.append((nxt, iter(self.parents.get(nxt, ()))))

    def ancestors(self, class_name):
        """Ancestors grouped by depth, nearest first. Cycle- and depth-safe."""
        seen = {class_name}
        frontier = [class_name]
        depth = 0
        while frontier and depth < self.max_depth:
            depth += 1
            nxt = []
            for c in frontier:
                for p in self.parents.get(c, ()):
                    if p not in seen:
                        seen.add(p)
                        nxt.append(p)
            if nxt:
                yield nxt
            frontier = nxt

    @classmethod
    def load(cls, directory, max_depth=32):
        """Read ``api_intro.csv``, ``inheritance.json``, ``api_levels.csv`` and
        ``level_dates.csv`` from ``directory``. Missing files mean empty tables."""
        d = Path(directory)
        t = cls(max_depth=max_depth)
        if (d / "api_intro.csv").exists():
            with open(d / "api_intro.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    key = (row["class"], row["method"])
                    when = _date(row["first_seen_date"])
                    if key not in t.intro or when < t.intro[key]:
                        t.intro[key] = when
        if (d / "inheritance.json").exists():
            t.parents = {k: list(v) for k, v in json.loads((d / "inheritance.json").read_text()).items()}
        if (d / "level_dates.csv").exists():
            with open(d / "level_dates.csv", newline="") as fh:
                t.level_dates = {int(r["level"]): _date(r["release_date"]) for r in csv.DictReader(fh)}
        if (d / "api_levels.csv").exists():
            with open(d / "api_levels.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    key = (row["class"], row["method"])
                    level = int(row["level"])
                    t.api_levels[key] = min(level, t.api_levels.get(key, level))
        return t.validate()

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "api_intro.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "method", "first_seen_date"])
            for (c, m), when in sorted(self.intro.items()):
                w.writerow([c, m, when.isoformat()])
        (d / "inheritance.json").write_text(json.dumps(self.parents, indent=1, sort_keys=True) + "\n")
        with open(d / "api_levels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "method", "level"])
            for (c, m), level in sorted(self.api_levels.items()):
                w.writerow([c, m, level])
        with open(d / "level_dates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "release_date"])
            for level, when in sorted(self.level_dates.items()):
                w.writerow([level, when.isoformat()])


def _as_ref(api):
    return api if isinstance(api, ApiRef) else ApiRef.parse(api)


def resolve_intro_date(api, tables):
    """``(date, level)`` for one API, or ``None`` if nothing matches.

    ``tables.lookups`` counts which stages were consulted.
    """
    api = _as_ref(api)
    key = (api.class_name, api.method_name)
    tables.lookups["direct"] += 1
    if key in tables.intro:
        return tables.intro[key], "direct"

    tables.lookups["inherited"] += 1
    for layer in tables.ancestors(api.class_name):
        hits = [tables.intro[(a, api.method_name)] for a in layer if (a, api.method_name) in tables.intro]
        if hits:
            return min(hits), "inherited"

    tables.lookups["api_level"] += 1
    level = tables.api_levels.get(key)
    if level is not None:
        return tables.level_dates[level], "api_level"
    return None


def _is_framework(api, prefixes):
    return api.class_name.startswith(tuple(prefixes))


@dataclass
class LowerBound:
    date: dt.date
    api: ApiRef


def release_lower_bound(apis, tables, framework_prefixes=DEFAULT_FRAMEWORK_PREFIXES, _levels=None):
    """Newest introduction date across ``apis``; ``None`` when nothing resolves.

    Ties on date go to the lexicographically smallest signature so the result
    does not depend on iteration order.
    """
    best = None
    for api in apis:
        api = _as_ref(api)
        if not _is_framework(api, framework_prefixes):
            continue
        hit = resolve_intro_date(api, tables)
        if _levels is not None:
            _levels[hit[1] if hit else UNMATCHED] += 1
        if hit is None:
            continue
        when = hit[0]
        if best is None or when > best.date or (when == best.date and str(api) < str(best.api)):
            best = LowerBound(when, api)
    return best


@dataclass
class VerificationResult:
    sha256: str
    claimed: dt.date
    source: str
    lower_bound: dt.date | None
    bounding_api: str | None
    matched: dict
    discrepant: bool

    @property
    def unmatched_ratio(self):
        total = sum(self.matched.values())
        return self.matched.get(UNMATCHED, 0) / total if total else 0.0

    def to_row(self):
        return {
            "sha256": self.sha256,
            "claimed": self.claimed.isoformat(),
            "source": self.source,
            "lower_bound": self.lower_bound.isoformat() if self.lower_bound else "",
            "bounding_api": self.bounding_api or "",
            **{f"n_{k}": self.matched.get(k, 0) for k in LEVELS + (UNMATCHED,)},
            "discrepant": int(self.discrepant),
        }


def verify_sample(sample, apis, tables, strict_date=False, framework_prefixes=DEFAULT_FRAMEWORK_PREFIXES):
    """Flag ``sample`` when its lower bound postdates the claimed timestamp.

    Only the year is compared unless ``strict_date`` is set.
    """
    levels = Counter({k: 0 for k in LEVELS + (UNMATCHED,)})
    bound = release_lower_bound(
        sorted({_as_ref(a) for a in apis}, key=str), tables, framework_prefixes, _levels=levels
    )
    discrepant = False
    if bound is not None:
        if strict_date:
            discrepant = bound.date > sample.timestamp
        else:
            discrepant = bound.date.year > sample.timestamp.year
    return VerificationResult(
        sample.sha256,
        sample.timestamp,
        sample.source,
        bound.date if bound else None,
        str(bound.api) if bound else None,
        dict(levels),
        discrepant,
    )


@dataclass
class CorpusReport:
    per_year: dict      # claimed year -> {"total", "discrepant", "rate"}
    total: int
    discrepant: int
    unmatched_refs: int
    total_refs: int

    @property
    def discrepancy_rate(self):
        return self.discrepant / self.total if self.total else 0.0

    @property
    def unmatched_rate(self):
        return self.unmatched_refs / self.total_refs if self.total_refs else 0.0

    def to_json(self):
        return {
            "per_year": {str(y): v for y, v in sorted(self.per_year.items())},
            "total": self.total,
            "discrepant": self.discrepant,
            "discrepancy_rate": self.discrepancy_rate,
            "unmatched_refs": self.unmatched_refs,
            "total_refs": self.total_refs,
            "unmatched_rate": self.unmatched_rate,
        }


def verify_corpus(results):
    per_year = defaultdict(lambda: {"total": 0, "discrepant": 0})
    unmatched = total_refs = 0
    for r in results:
        cell = per_year[r.claimed.year]
        cell["total"] += 1
        cell["discrepant"] += int(r.discrepant)
        unmatched += r.matched.get(UNMATCHED, 0)
        total_refs += sum(r.matched.values())
    for cell in per_year.values():
        cell["rate"] = cell["discrepant"] / cell["total"]
    return CorpusReport(
        dict(per_year),
        sum(c["total"] for c in per_year.values()),
        sum(c["discrepant"] for c in per_year.values()),
        unmatched,
        total_refs,
    )


def write_results_csv(path, results):
    rows = [r.to_row() for r in results]
    with open(path, "w", newline="") as fh:
        fields = list(rows[0]) if rows else ["sha256"]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
