"""Content hashing and artifact persistence.

Stages never compare file mtimes. Every artifact gets a ``<name>.meta.json``
sidecar recording its own sha256 plus the hashes of the inputs it was built
from, so a downstream stage can tell when something upstream changed.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FingerprintMismatch, MissingArtifact

_FIXED_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fingerprint(obj):
    """sha256 of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_meta(path, stage, inputs=None, extra=None):
    """Record ``path``'s hash and the hashes of ``inputs`` (name -> path)."""
    doc = {
        "stage": stage,
        "sha256": file_sha256(path),
        "inputs": {name: file_sha256(p) for name, p in sorted((inputs or {}).items())},
    }
    if extra:
        doc.update(extra)
    write_json(meta_path(path), doc)
    return doc


def require(path, stage):
    """Check ``path`` exists and still matches its recorded hash."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"[{stage}] missing input artifact: {path}")
    mp = meta_path(path)
    if mp.exists():
        recorded = json.loads(mp.read_text()).get("sha256")
        if recorded and recorded != file_sha256(path):
            raise FingerprintMismatch(
                f"[{stage}] {path} changed after it was produced (hash differs from {mp.name})"
            )
    return path


def save_arrays(path, arrays, meta):
    """Write arrays plus a JSON metadata blob as a zip of .npy members.

    Zip timestamps are pinned so identical content gives identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_arrays(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta
