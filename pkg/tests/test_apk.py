import json

import pytest

from timedroid.apk import ApkStaticFeatures, extract_corpus, extract_features, open_apk, read_features, write_features
from timedroid.dex import DEFAULT_FRAMEWORK_PREFIXES
from timedroid.errors import BadMagic, MissingDex, MissingManifest, NotAZip


def test_open_tiny(fixtures):
    apk = open_apk(fixtures / "tiny.apk")
    assert len(apk.entries) == 2
    assert apk.dex_names == ["classes.dex"]
    assert apk.manifest == (fixtures / "tiny_manifest.axml").read_bytes()


def test_multidex_numeric_order(fixtures):
    apk = open_apk(fixtures / "multi.apk")
    assert apk.dex_names == ["classes.dex", "classes2.dex", "classes10.dex"]
    assert [len(p) for p in apk.dex_entries] == [len(apk.entries[n]) for n in apk.dex_names]


@pytest.mark.parametrize("name,err", [("empty.apk", NotAZip), ("no_dex.apk", MissingDex), ("no_manifest.apk", MissingManifest)])
def test_container_errors_name_the_path(fixtures, name, err):
    with pytest.raises(err) as info:
        open_apk(fixtures / name)
    assert name in str(info.value)


def test_tiny_features(fixtures):
    f = extract_features(fixtures / "tiny.apk")
    assert len(f.opcode_symbols) == 3
    assert f.opcode_symbols == ["CONST", "INVOKE", "RETURN"]
    assert f.apis == ["java.lang.String->length()I"]
    assert f.permissions == ["android.permission.INTERNET", "android.permission.READ_SMS"]
    assert f.warnings == []


def test_extraction_is_byte_identical(fixtures):
    a = extract_features(fixtures / "multi.apk").to_json()
    b = extract_features(fixtures / "multi.apk").to_json()
    assert a == b


def test_multidex_concatenation_order(fixtures):
    from timedroid.dex import parse_dex
    from timedroid.symbols import default_alphabet

    f = extract_features(fixtures / "multi.apk")
    expected = []
    for name in ("rich", "secondary", "tiny"):
        for m in parse_dex((fixtures / f"{name}.dex").read_bytes()).methods:
            expected += default_alphabet().symbolize(m.mnemonics)
    assert f.opcode_symbols == expected
    assert "android.provider.Settings$Secure->getString(Landroid/content/ContentResolver;Ljava/lang/String;)Ljava/lang/String;" in f.apis
    assert all(a.split("->")[0].startswith(DEFAULT_FRAMEWORK_PREFIXES) for a in f.apis)


def test_broken_secondary_is_skipped_with_warning(fixtures):
    f = extract_features(fixtures / "broken_secondary.apk")
    assert f.opcode_symbols == ["CONST", "INVOKE", "RETURN"]
    assert len(f.warnings) == 1 and f.warnings[0].startswith("classes2.dex")


def test_broken_primary_fails_the_app(fixtures):
    with pytest.raises(BadMagic):
        extract_features(fixtures / "broken_primary.apk")


def test_parallel_workers_match_serial(fixtures):
    items = [(fixtures / n, None) for n in ("tiny.apk", "multi.apk", "broken_primary.apk", "broken_secondary.apk")]
    serial = list(extract_corpus(items, workers=1))
    parallel = list(extract_corpus(items, workers=2))
    assert serial == parallel
    assert serial[2][0] is None and "BadMagic" in serial[2][1]


def test_ndjson_roundtrip(tmp_path, fixtures):
    recs = [extract_features(fixtures / "tiny.apk"), extract_features(fixtures / "multi.apk")]
    path = tmp_path / "f.ndjson"
    write_features(path, recs)
    back = list(read_features(path))
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]
    line = json.loads(path.read_text().splitlines()[0])
    assert set(line) == {"sha256", "opcode_symbols", "apis", "permissions", "warnings"}
    assert isinstance(back[0], ApkStaticFeatures)
