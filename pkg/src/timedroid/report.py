"""Error analysis of detected (TP) vs missed (FN) malware using cached
VirusTotal behaviour reports mapped to MITRE ATT&CK.

Everything runs from ``cache/vt/<sha256>.json``. The network client only
fills the cache; it is never needed for analysis.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AuthError, CacheMiss, EmptyCohort, MalformedReport, RateLimited

log = logging.getLogger(__name__)

VT_API = "https://www.virustotal.com/api/v3"
API_KEY_ENV = "VT_API_KEY"
OBFUSCATED_TAG = "obfuscated"
OBFUSCATION_TECHNIQUE = "T1406"
_TECHNIQUE = re.compile(r"^(T\d{4})(?:\.\d{3})?$")

ANDROID_TACTICS = (
    "Initial Access", "Execution", "Persistence", "Privilege Escalation", "Defense Evasion",
    "Credential Access", "Discovery", "Lateral Movement", "Collection", "Command and Control",
    "Exfiltration", "Impact", "Network Effects", "Remote Service Effects",
)


@dataclass
class BehaviorReport:
    sha256: str
    tactics: frozenset = frozenset()
    techniques: frozenset = frozenset()
    tags: frozenset = frozenset()
    raw: dict = field(default_factory=dict, repr=False, compare=False)


def parse_report(sha256, doc):
    """Parse a cached document ``{"file": <files/{id}>, "mitre": <files/{id}/behaviour_mitre_trees>}``.

    Sub-technique ids (``T1406.002``) are folded onto their parent technique.
    """
    if not isinstance(doc, dict):
        raise MalformedReport(f"{sha256}: report is not a JSON object")
    tactics, techniques, tags = set(), set(), set()
    try:
        attrs = (doc.get("file") or {}).get("data", {}).get("attributes", {})
        tags.update(str(t) for t in attrs.get("tags", []))
        sandboxes = (doc.get("mitre") or {}).get("data", {})
        for sandbox in sandboxes.values():
            for tactic in sandbox.get("tactics", []):
                name = tactic.get("name")
                if name:
                    tactics.add(str(name))
                for tech in tactic.get("techniques", []):
                    m = _TECHNIQUE.match(str(tech.get("id", "")))
                    if m:
                        techniques.add(m.group(1))
    except (AttributeError, TypeError) as exc:
        raise MalformedReport(f"{sha256}: unexpected report structure ({exc})") from exc
    return BehaviorReport(sha256, frozenset(tactics), frozenset(techniques), frozenset(tags), doc)


def cache_path(cache_dir, sha256):
    return Path(cache_dir) / "vt" / f"{sha256.lower()}.json"


def urllib_transport(url, headers, timeout=30):
    """Minimal GET: returns ``(status, headers, body)``."""
    req = urllib.request.Request(url, headers=headers)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, dict(resp.headers), resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, dict(exc.headers or {}), exc.read() or b""


class VtClient:
    def __init__(self, api_key=None, transport=None, max_retries=4, backoff=2.0, sleep=time.sleep):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.transport = transport or urllib_transport
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep

    def get(self, path):
        if not self.api_key:
            raise AuthError(f"no VirusTotal API key (set {API_KEY_ENV})")
        delay = self.backoff
        for attempt in range(self.max_retries + 1):
            status, headers, body = self.transport(f"{VT_API}/{path}", {"x-apikey": self.api_key})
            if status == 200:
                try:
                    return json.loads(body)
                except ValueError as exc:
                    raise MalformedReport(f"{path}: response is not JSON") from exc
            if status == 404:
                return None
            if status in (401, 403):
                raise AuthError(f"{path}: HTTP {status}")
            if status == 429:
                retry_after = _retry_after(headers)
                if attempt == self.max_retries:
                    raise RateLimited(f"{path}: still rate limited after {attempt + 1} attempts", retry_after)
                self.sleep(retry_after if retry_after is not None else delay)
                delay *= 2
                continue
            raise MalformedReport(f"{path}: HTTP {status}")
        raise AssertionError("unreachable")


def _retry_after(headers):
    for k, v in headers.items():
        if k.lower() == "retry-after":
            try:
                return float(v)
            except ValueError:
                return None
    return None


def fetch_report(sha256, cache_dir, offline=True, client=None):
    """Cached report for ``sha256``; fetch and cache it first unless offline."""
    path = cache_path(cache_dir, sha256)
    if path.exists():
        return parse_report(sha256, json.loads(path.read_text()))
    if offline:
        raise CacheMiss(f"{sha256}: not in cache {path.parent} (offline)")
    client = client or VtClient()
    doc = {"file": client.get(f"files/{sha256}"), "mitre": client.get(f"files/{sha256}/behaviour_mitre_trees")}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True))
    return parse_report(sha256, doc)


def fetch_reports(hashes, cache_dir, offline=True, client=None, max_concurrent=4):
    """Reports for every hash that can be had; misses are returned separately."""
    def one(h):
        try:
            return h, fetch_report(h, cache_dir, offline, client)
        except CacheMiss:
            return h, None

    hashes = sorted(set(hashes))
    if offline or max_concurrent <= 1:
        results = map(one, hashes)
    else:
        with ThreadPoolExecutor(max_workers=max_concurrent) as pool:
            results = list(pool.map(one, hashes))
    reports, missing = {}, []
    for h, rep in results:
        if rep is None:
            missing.append(h)
        else:
            reports[h] = rep
    return reports, missing


def read_predictions(path):
    with open(path, newline="") as fh:
        return [
            {"sha256": r["sha256"], "label": int(r["label"]), "true_label": int(r["true_label"])}
            for r in csv.DictReader(fh)
        ]


def _cohorts(predictions, reports):
    tp, fn, missing = [], [], 0
    for p in predictions:
        if p["true_label"] != 1:
            continue
        rep = reports.get(p["sha256"])
        if rep is None:
            missing += 1
            continue
        (tp if p["label"] == 1 else fn).append(rep)
    if not tp and not fn:
        raise EmptyCohort("no malware predictions with behaviour reports")
    return tp, fn, missing


def _pct(hits, total):
    return 100.0 * hits / total if total else None


@dataclass
class PrevalenceTable:
    kind: str                 # "tactic" | "technique"
    rows: dict                # key -> {"fn": hits, "tp": hits}
    fn_total: int
    tp_total: int
    missing_reports: int = 0
    absent: tuple = ()        # known keys seen in no report

    def percent(self, key):
        r = self.rows[key]
        return _pct(r["fn"], self.fn_total), _pct(r["tp"], self.tp_total)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.kind, "fn_hits", "fn_total", "fn_pct", "tp_hits", "tp_total", "tp_pct"])
            for key in sorted(self.rows):
                fn_pct, tp_pct = self.percent(key)
                w.writerow([
                    key, self.rows[key]["fn"], self.fn_total, "" if fn_pct is None else repr(fn_pct),
                    self.rows[key]["tp"], self.tp_total, "" if tp_pct is None else repr(tp_pct),
                ])

    def to_markdown(self):
        label = self.kind.capitalize()
        lines = [f"| {label} | FN (%) | TP (%) |", "|---|---:|---:|"]
        for key in sorted(self.rows):
            fn_pct, tp_pct = self.percent(key)
            fmt = lambda v: "n/a" if v is None else f"{v:.1f}"  # noqa: E731
            lines.append(f"| {key} | {fmt(fn_pct)} | {fmt(tp_pct)} |")
        notes = [f"FN n={self.fn_total}, TP n={self.tp_total}; {self.missing_reports} malware sample(s) without a report excluded."]
        if self.absent:
            notes.append(f"{len(self.absent)} {self.kind}(s) absent from every report: {', '.join(self.absent)}.")
        return "\n".join(lines) + "\n\n" + " ".join(notes) + "\n"


def prevalence(predictions, reports):
    """Tactic and technique prevalence among FN vs TP malware.

    Each percentage is hits over the cohort's reported samples. Keys that no
    report mentions get no row.
    """
    tp, fn, missing = _cohorts(predictions, reports)
    tables = []
    for kind, attr in (("tactic", "tactics"), ("technique", "techniques")):
        rows = {}
        for cohort, col in ((fn, "fn"), (tp, "tp")):
            for rep in cohort:
                for key in getattr(rep, attr):
                    rows.setdefault(key, {"fn": 0, "tp": 0})[col] += 1
        absent = tuple(t for t in ANDROID_TACTICS if t not in rows) if kind == "tactic" else ()
        tables.append(PrevalenceTable(kind, rows, len(fn), len(tp), missing, absent))
    return tables[0], tables[1]


def obfuscation_breakdown(predictions, reports):
    """Share of malware flagged obfuscated, and how the flagged ones split
    into TP/FN, via the ``obfuscated`` tag and via technique T1406.
    Percentages; ``None`` where the denominator is empty."""
    tp, fn, missing = _cohorts(predictions, reports)
    total = len(tp) + len(fn)
    out = {"malware_with_reports": total, "missing_reports": missing}
    for name, pred in (
        ("tag", lambda r: OBFUSCATED_TAG in r.tags),
        ("technique_T1406", lambda r: OBFUSCATION_TECHNIQUE in r.techniques),
    ):
        k_tp = sum(map(pred, tp))
        k_fn = sum(map(pred, fn))
        k = k_tp + k_fn
        out[name] = {
            "obfuscated": k,
            "obfuscated_pct": _pct(k, total),
            "tp_pct": _pct(k_tp, k),
            "fn_pct": _pct(k_fn, k),
        }
    return out


def render_report(tactics, techniques, obfuscation):
    def fmt(v):
        return "n/a" if v is None else f"{v:.1f}%"

    parts = ["# Malware error analysis (TP vs FN)", "", "## Obfuscation", ""]
    for name, label in (("tag", "`obfuscated` tag"), ("technique_T1406", "technique T1406")):
        o = obfuscation[name]
        parts.append(
            f"- {label}: {fmt(o['obfuscated_pct'])} of malware ({o['obfuscated']}/{obfuscation['malware_with_reports']}); "
            f"of these TP {fmt(o['tp_pct'])}, FN {fmt(o['fn_pct'])}"
        )
    parts += ["", "## Tactics", "", tactics.to_markdown(), "## Techniques", "", techniques.to_markdown()]
    return "\n".join(parts)
