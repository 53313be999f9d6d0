"""Regenerate the binary parser fixtures under tests/fixtures/.

    python3 scripts/make_fixtures.py

Golden listings are produced separately by scripts/make_golden.py with a
reference disassembler.
"""
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import builders as b  # noqa: E402

OUT = ROOT / "tests" / "fixtures"
RICH_PERMISSIONS = (
    "android.permission.SEND_SMS",
    "android.permission.READ_PHONE_STATE",
    "android.permission.SEND_SMS",
)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    tiny = b.tiny_dex()
    rich = b.rich_dex()
    second = b.secondary_dex()
    tiny_manifest = b.build_axml("com.example.tiny", b.TINY_PERMISSIONS)
    rich_manifest = b.build_axml(
        "com.example.rich", RICH_PERMISSIONS, utf8=True, strip_attr_names=True,
        extra_tags=[("uses-permission-sdk-23", "android.permission.ACCESS_FINE_LOCATION"),
                    ("uses-feature", "android.hardware.telephony")],
    )
    files = {
        "tiny.dex": tiny,
        "rich.dex": rich,
        "secondary.dex": second,
        "unknown_opcode.dex": b.unknown_opcode_dex(),
        "overrun.dex": b.overrun_dex(),
        "truncated.dex": tiny[:150],
        "tiny_manifest.axml": tiny_manifest,
        "rich_manifest.axml": rich_manifest,
        "no_permissions.axml": b.build_axml("com.example.none", []),
        "duplicate_permission.axml": b.build_axml(
            "com.example.dup", ["android.permission.INTERNET", "android.permission.INTERNET"]),
        "text_manifest.xml": b.text_manifest("com.example.text", b.TINY_PERMISSIONS),
        "bad_manifest.axml": tiny_manifest[:8] + b"\x01\x00\x1c\x00\xff\xff\xff\x7f" + tiny_manifest[16:40],
    }
    for name, payload in files.items():
        (OUT / name).write_bytes(payload)

    b.build_apk(OUT / "tiny.apk", {"classes.dex": tiny, "AndroidManifest.xml": tiny_manifest})
    # stored out of order on purpose: extraction must sort classes, classes2, classes10
    b.build_apk(OUT / "multi.apk", {
        "classes10.dex": tiny, "AndroidManifest.xml": rich_manifest,
        "classes2.dex": second, "classes.dex": rich, "res/raw/blob.bin": b"\x00" * 16,
    })
    b.build_apk(OUT / "broken_secondary.apk", {
        "classes.dex": tiny, "classes2.dex": rich[:200], "AndroidManifest.xml": tiny_manifest})
    b.build_apk(OUT / "broken_primary.apk", {"classes.dex": b"hello", "AndroidManifest.xml": tiny_manifest})
    b.build_apk(OUT / "no_dex.apk", {"AndroidManifest.xml": tiny_manifest})
    b.build_apk(OUT / "no_manifest.apk", {"classes.dex": tiny})
    (OUT / "empty.apk").write_bytes(b"")
    print(f"wrote fixtures to {OUT}")


if __name__ == "__main__":
    main()
