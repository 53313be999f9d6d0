import datetime as dt
import json
import shutil

import numpy as np
import pytest

from timedroid.artifacts import fingerprint, load_arrays, meta_path, require, save_arrays, write_meta
from timedroid.cli import main
from timedroid.config import PipelineConfig
from timedroid.dex import ApiRef
from timedroid.errors import ConfigInvalid, FingerprintMismatch, MissingArtifact
from timedroid.timestamps import VerificationTables


def test_fingerprint_is_key_order_independent():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})


def test_require_detects_missing_and_changed(tmp_path):
    p = tmp_path / "x.txt"
    with pytest.raises(MissingArtifact):
        require(p, "stage")
    p.write_text("one")
    write_meta(p, "stage")
    assert require(p, "stage") == p
    p.write_text("two")
    with pytest.raises(FingerprintMismatch):
        require(p, "stage")


def test_save_arrays_is_byte_deterministic(tmp_path):
    arrays = {"b": np.arange(5.0), "a": np.eye(2)}
    save_arrays(tmp_path / "1.npz", arrays, {"k": 1})
    save_arrays(tmp_path / "2.npz", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()
    back, meta = load_arrays(tmp_path / "1.npz")
    assert meta == {"k": 1} and np.array_equal(back["a"], np.eye(2))


def test_config_json_roundtrip_and_overrides(tmp_path):
    cfg = PipelineConfig(seed=3).override("split", test_year=2023, test_malware=None)
    assert cfg.split.test_year == 2023 and cfg.split.test_malware == 400
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_json()))
    assert PipelineConfig.load(p) == cfg


def test_per_modality_byol_settings():
    cfg = PipelineConfig(seed=10, byol={"epochs": 5, "api": {"epochs": 7}})
    assert cfg.byol_for("opcode").epochs == 5 and cfg.byol_for("api").epochs == 7
    assert [cfg.byol_for(m).seed for m in ("opcode", "api", "permission")] == [10, 11, 12]


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"split": {"bogus": 1}},
    {"classifier": {"grid": []}},
    {"classifier": {"grid": [-1.0]}},
    {"classifier": {"threshold": 1.5}},
    {"byol": {"tau": 2.0}, "seed": 0},
    {"byol": {"nonsense": 1}},
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_json(doc).validate()


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigInvalid):
        PipelineConfig.load(tmp_path / "nope.json")


def test_cli_out_of_order_stage_is_missing_artifact(tmp_path, caplog):
    assert main(["featurize", "--workdir", str(tmp_path)]) == MissingArtifact.exit_code
    assert "MissingArtifact" in caplog.text and "vocab.json" in caplog.text


def test_cli_missing_seed(tmp_path):
    assert main(["pretrain", "--workdir", str(tmp_path)]) == ConfigInvalid.exit_code
    assert MissingArtifact.exit_code != ConfigInvalid.exit_code


SMALL_BYOL = {"encoder_hidden": [32], "embed_dim": 16, "projector_hidden": 32, "projection_dim": 8,
              "predictor_hidden": 32, "epochs": 2, "batch_size": 64}


def run_small_pipeline(workdir, config):
    argv = ["pipeline", "--synthetic", "600", "--workdir", str(workdir), "--config", str(config), "--seed", "5",
            "--test-year", "2024", "--test-malware", "10", "--test-benign", "90", "--folds", "2",
            "--grid", "0.1", "1.0"]
    return main(argv)


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"byol": SMALL_BYOL}))
    return p


def test_cli_pipeline_rerun_is_byte_identical(tmp_path, small_config, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_small_pipeline(a, small_config) == 0
    assert run_small_pipeline(b, small_config) == 0
    out = capsys.readouterr().out
    assert "evaluate:" in out
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for expected in ("split.json", "vocab.json", "byol_api.npz", "embeddings.npz", "lr_model.json",
                     "predictions.csv", "metrics.json", "cv_table.csv", "loss_opcode.csv"):
        assert expected in names
        assert meta_path(a / expected).exists()
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    metrics = json.loads((a / "metrics.json").read_text())
    assert metrics["tp"] + metrics["fn"] == 10 and metrics["tn"] + metrics["fp"] == 90

    # tampering with an upstream artifact is caught downstream
    with open(a / "embeddings.npz", "ab") as fh:
        fh.write(b"x")
    assert main(["train", "--workdir", str(a), "--seed", "5", "--folds", "2"]) == FingerprintMismatch.exit_code


def test_cli_extract_and_verify(tmp_path, fixtures, capsys):
    apks = tmp_path / "apks"
    apks.mkdir()
    for name in ("tiny.apk", "multi.apk", "no_dex.apk"):
        shutil.copy(fixtures / name, apks / name)
    work = tmp_path / "w"
    assert main(["extract", "--apks", str(apks), "--workdir", str(work)]) == 0
    records = [json.loads(l) for l in (work / "features.ndjson").read_text().splitlines()]
    assert len(records) == 2
    meta = json.loads(meta_path(work / "features.ndjson").read_text())
    assert len(meta["failures"]) == 1 and "MissingDex" in meta["failures"][0]

    # a manifest claiming 2010 for every app against tables dating one API to 2015
    api = records[0]["apis"][0]
    tables = tmp_path / "tables"
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("sha256,label,timestamp,source\n" + "".join(
        f"{r['sha256']},1,2010-05-05,first_submission_date\n" for r in records))
    ref = ApiRef.parse(api)
    VerificationTables(intro={(ref.class_name, ref.method_name): dt.date(2015, 1, 1)}).save(tables)
    assert main(["verify-timestamps", "--workdir", str(work), "--manifest", str(manifest), "--tables", str(tables)]) == 0
    out = capsys.readouterr().out
    assert "discrepant" in out
    summary = json.loads((work / "verification_summary.json").read_text())
    assert summary["discrepant"] >= 1
