"""APK container access and per-app static feature extraction."""
from __future__ import annotations

import hashlib
import json
import logging
import re
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .axml import parse_manifest_permissions
from .dex import DEFAULT_FRAMEWORK_PREFIXES, parse_dex
from .errors import MissingDex, MissingManifest, NotAZip, ParseError
from .symbols import default_alphabet

log = logging.getLogger(__name__)

_DEX_NAME = re.compile(r"^classes(\d*)\.dex$")
MANIFEST = "AndroidManifest.xml"


@dataclass
class ApkContainer:
    path: str
    entries: dict
    dex_names: list

    @property
    def dex_entries(self):
        return [self.entries[n] for n in self.dex_names]

    @property
    def manifest(self):
        return self.entries[MANIFEST]


def _dex_order(name):
    suffix = _DEX_NAME.match(name).group(1)
    return int(suffix) if suffix else 1


def open_apk(path):
    """Read every entry of the archive at ``path`` into memory.

    DEX entries are ordered numerically: classes.dex, classes2.dex, ...
    """
    path = str(path)
    if not zipfile.is_zipfile(path):
        raise NotAZip(path)
    try:
        with zipfile.ZipFile(path) as zf:
            entries = {}
            for info in zf.infolist():
                if info.is_dir():
                    continue
                if info.filename in entries:
                    log.warning("%s: duplicate entry %s, keeping first", path, info.filename)
                    continue
                entries[info.filename] = zf.read(info)
    except (zipfile.BadZipFile, EOFError) as exc:
        raise NotAZip(path) from exc
    dex_names = sorted((n for n in entries if _DEX_NAME.match(n)), key=_dex_order)
    if not dex_names:
        raise MissingDex(path)
    if MANIFEST not in entries:
        raise MissingManifest(path)
    return ApkContainer(path, entries, dex_names)


@dataclass
class ApkStaticFeatures:
    sha256: str
    opcode_symbols: list = field(default_factory=list)
    apis: list = field(default_factory=list)
    permissions: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "sha256": self.sha256,
            "opcode_symbols": self.opcode_symbols,
            "apis": self.apis,
            "permissions": self.permissions,
            "warnings": self.warnings,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["sha256"],
            list(d.get("opcode_symbols", [])),
            list(d.get("apis", [])),
            list(d.get("permissions", [])),
            list(d.get("warnings", [])),
        )


def extract_features(path, framework_prefixes=DEFAULT_FRAMEWORK_PREFIXES, alphabet=None, sha256=None):
    """Parse one APK into symbol sequence, API set and permission set.

    A malformed primary classes.dex fails the app; a malformed secondary DEX
    is skipped and noted in ``warnings``.
    """
    alphabet = alphabet or default_alphabet()
    apk = open_apk(path)
    if sha256 is None:
        sha256 = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    symbols = []
    apis = set()
    warnings = []
    for i, name in enumerate(apk.dex_names):
        try:
            parsed = parse_dex(apk.entries[name], framework_prefixes=framework_prefixes)
        except ParseError as exc:
            if i == 0:
                raise
            warnings.append(f"{name}: skipped ({type(exc).__name__}: {exc})")
            continue
        for method in parsed.methods:
            symbols.extend(alphabet.symbolize_opcodes(method.opcodes))
        apis.update(str(a) for a in parsed.apis)
        if parsed.unknown_opcodes:
            warnings.append(f"{name}: {len(parsed.unknown_opcodes)} unknown opcode(s)")
    perms = parse_manifest_permissions(apk.manifest)
    return ApkStaticFeatures(sha256, symbols, sorted(apis), sorted(perms), warnings)


def _extract_one(args):
    path, sha256, prefixes = args
    try:
        return extract_features(path, framework_prefixes=prefixes, sha256=sha256).to_dict(), None
    except ParseError as exc:
        return None, f"{path}: {type(exc).__name__}: {exc}"


def extract_corpus(items, workers=1, framework_prefixes=DEFAULT_FRAMEWORK_PREFIXES):
    """Extract ``(path, sha256)`` pairs, possibly in parallel.

    Yields ``(record_dict | None, error | None)`` in input order, so output
    does not depend on worker scheduling.
    """
    jobs = [(str(p), s, tuple(framework_prefixes)) for p, s in items]
    if workers <= 1:
        yield from map(_extract_one, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_extract_one, jobs, chunksize=4)


def read_features(path):
    """Iterate :class:`ApkStaticFeatures` from an NDJSON file."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield ApkStaticFeatures.from_dict(json.loads(line))


def write_features(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
