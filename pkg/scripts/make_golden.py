"""Produce golden listings for the fixture DEX files and manifests using
androguard as the reference disassembler.

androguard is not a dependency of the package; run this from an environment
that has it:

    python -m venv /tmp/agenv && /tmp/agenv/bin/pip install androguard
    /tmp/agenv/bin/python scripts/make_golden.py

Payload pseudo-instructions (``*-payload``) are dropped from the opcode
listings because the extractor treats them as data, not instructions.
"""
import re
import sys
from pathlib import Path

from androguard.core.axml import AXMLPrinter
from androguard.core.dex import DEX

try:
    from loguru import logger
    logger.remove()
except ImportError:
    pass

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
GOLDEN = FIXTURES / "golden"
ANDROID_NAME = "{http://schemas.android.com/apk/res/android}name"
FRAMEWORK = ("android.", "java.", "javax.", "androidx.", "kotlin.")


def dotted(desc):
    return desc[1:-1].replace("/", ".") if desc.startswith("L") and desc.endswith(";") else desc


def dex_listing(path):
    d = DEX(path.read_bytes())
    lines, defined = [], set()
    for cls in d.get_classes():
        defined.add(cls.get_name())
        for m in cls.get_methods():
            if m.get_code() is None:
                continue
            lines.append(f"{dotted(cls.get_name())}->{m.get_name()}")
            lines += [f"  {i.get_name()}" for i in m.get_instructions() if not i.get_name().endswith("-payload")]
    apis = set()
    for item in d.get_methods_id_item().method_id_items:
        cls = item.get_class_name()
        if cls in defined or not dotted(cls).startswith(FRAMEWORK):
            continue
        desc = re.sub(r"\s+", "", item.get_descriptor())
        apis.add(f"{dotted(cls)}->{item.get_name()}{desc}")
    return "\n".join(lines) + "\n", "\n".join(sorted(apis)) + "\n"


def manifest_permissions(path):
    root = AXMLPrinter(path.read_bytes()).get_xml_obj()
    perms = set()
    for tag in ("uses-permission", "uses-permission-sdk-23"):
        for el in root.iter(tag):
            perms.add(el.get(ANDROID_NAME))
    return "\n".join(sorted(perms)) + ("\n" if perms else "")


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name in ("tiny", "rich", "secondary"):
        listing, apis = dex_listing(FIXTURES / f"{name}.dex")
        (GOLDEN / f"{name}.opcodes.txt").write_text(listing)
        (GOLDEN / f"{name}.apis.txt").write_text(apis)
    for name in ("tiny_manifest", "rich_manifest", "no_permissions", "duplicate_permission"):
        (GOLDEN / f"{name}.permissions.txt").write_text(manifest_permissions(FIXTURES / f"{name}.axml"))
    print(f"wrote golden listings to {GOLDEN}", file=sys.stderr)


if __name__ == "__main__":
    main()
