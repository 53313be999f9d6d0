import json
import random
import shutil

import pytest
from hypothesis import given, strategies as st

from timedroid.errors import AuthError, CacheMiss, EmptyCohort, MalformedReport, RateLimited
from timedroid.report import (
    BehaviorReport, VtClient, cache_path, fetch_report, fetch_reports, obfuscation_breakdown, parse_report,
    prevalence, read_predictions, render_report,
)

SHA = "a" * 64


def test_fixture_report_parses(fixtures):
    doc = json.loads((fixtures / "vt" / f"{SHA}.json").read_text())
    rep = parse_report(SHA, doc)
    assert rep.tactics == {"Collection", "Discovery"}
    # T1636.004 folds onto T1636; T1426 seen by two sandboxes counts once
    assert rep.techniques == {"T1430", "T1636", "T1426", "T1418"}
    assert "obfuscated" in rep.tags


def test_missing_sections_give_empty_report():
    rep = parse_report(SHA, {"file": None, "mitre": None})
    assert rep.tactics == rep.techniques == rep.tags == frozenset()


@pytest.mark.parametrize("doc", [[], {"mitre": {"data": {"x": {"tactics": [{"techniques": 5}]}}}}])
def test_malformed(doc):
    with pytest.raises(MalformedReport):
        parse_report(SHA, doc)


def rep(sha, tactics=(), techniques=(), tags=()):
    return BehaviorReport(sha, frozenset(tactics), frozenset(techniques), frozenset(tags))


def pred(sha, label, true_label=1):
    return {"sha256": sha, "label": label, "true_label": true_label}


def test_prevalence_example():
    preds = [pred("f0", 0), pred("f1", 0)] + [pred(f"t{i}", 1) for i in range(4)] + [pred("b0", 0, 0), pred("m", 1)]
    reports = {
        "f0": rep("f0", ["Collection"]), "f1": rep("f1"),
        "t0": rep("t0", ["Collection"]), "t1": rep("t1", ["Collection"]), "t2": rep("t2", ["Collection"]),
        "t3": rep("t3", ["Discovery"]), "b0": rep("b0", ["Impact"]),
    }
    tactics, _ = prevalence(preds, reports)
    assert (tactics.fn_total, tactics.tp_total, tactics.missing_reports) == (2, 4, 1)
    assert tactics.percent("Collection") == (50.0, 75.0)
    assert tactics.percent("Discovery") == (0.0, 25.0)
    assert "Impact" not in tactics.rows        # only benign apps showed it
    assert "Impact" in tactics.absent
    md = tactics.to_markdown()
    assert "| Collection | 50.0 | 75.0 |" in md and "absent from every report" in md


def test_empty_fn_cohort_gives_na():
    tactics, _ = prevalence([pred("t", 1)], {"t": rep("t", ["Collection"])})
    assert tactics.percent("Collection") == (None, 100.0)
    assert "| Collection | n/a | 100.0 |" in tactics.to_markdown()
    with pytest.raises(EmptyCohort):
        prevalence([pred("b", 0, 0)], {"b": rep("b")})


def test_obfuscation_example():
    preds, reports = [], {}
    # 100 malware: 70 tagged obfuscated, 60 of those detected
    for i in range(100):
        sha = f"{i:064x}"
        tagged = i < 70
        detected = i < 60 or i >= 85
        preds.append(pred(sha, int(detected)))
        reports[sha] = rep(sha, tags=["obfuscated"] if tagged else [], techniques=["T1406"] if i % 2 else [])
    out = obfuscation_breakdown(preds, reports)
    tag = out["tag"]
    assert tag["obfuscated"] == 70 and tag["obfuscated_pct"] == 70.0
    assert round(tag["tp_pct"], 1) == 85.7 and round(tag["fn_pct"], 1) == 14.3
    assert out["technique_T1406"]["obfuscated"] == 50


def test_obfuscation_none_tagged():
    out = obfuscation_breakdown([pred("x", 1)], {"x": rep("x")})
    assert out["tag"]["obfuscated_pct"] == 0.0
    assert out["tag"]["tp_pct"] is None and out["tag"]["fn_pct"] is None
    text = render_report(*prevalence([pred("x", 1)], {"x": rep("x")}), out)
    assert "of these TP n/a, FN n/a" in text


TACTICS = ["Collection", "Discovery", "Impact", "Persistence"]


@given(st.integers(0, 2**31))
def test_prevalence_matches_recount(seed):
    rng = random.Random(seed)
    preds, reports = [], {}
    for i in range(rng.randint(1, 40)):
        sha = str(i)
        truth = int(rng.random() < 0.8)
        preds.append(pred(sha, int(rng.random() < 0.6), truth))
        if rng.random() < 0.9:
            reports[sha] = rep(sha, [t for t in TACTICS if rng.random() < 0.4])
    mal = [p for p in preds if p["true_label"] == 1 and p["sha256"] in reports]
    if not mal:
        return
    tactics, _ = prevalence(preds, reports)
    for cohort, lab in (("fn", 0), ("tp", 1)):
        members = [p["sha256"] for p in mal if p["label"] == lab]
        assert getattr(tactics, f"{cohort}_total") == len(members)
        for t in TACTICS:
            hits = sum(t in reports[s].tactics for s in members)
            if t in tactics.rows:
                assert tactics.rows[t][cohort] == hits
            else:
                assert hits == 0


class Transport:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def __call__(self, url, headers):
        self.calls.append((url, headers))
        return self.responses.pop(0)


def test_offline_never_touches_the_network(tmp_path):
    t = Transport([])
    client = VtClient("key", t)
    with pytest.raises(CacheMiss):
        fetch_report(SHA, tmp_path, offline=True, client=client)
    reports, missing = fetch_reports([SHA, "b" * 64], tmp_path, offline=True, client=client)
    assert reports == {} and missing == [SHA, "b" * 64]
    assert t.calls == []


def test_online_fetch_fills_cache_deterministically(tmp_path, fixtures):
    doc = json.loads((fixtures / "vt" / f"{SHA}.json").read_text())
    body = lambda d: (200, {}, json.dumps(d).encode())  # noqa: E731
    t = Transport([body(doc["file"]), body(doc["mitre"]), body(doc["file"]), body(doc["mitre"])])
    client = VtClient("key", t)
    r1 = fetch_report(SHA, tmp_path / "a", offline=False, client=client)
    r2 = fetch_report(SHA, tmp_path / "b", offline=False, client=client)
    assert r1 == r2
    assert cache_path(tmp_path / "a", SHA).read_bytes() == cache_path(tmp_path / "b", SHA).read_bytes()
    assert t.calls[0][0].endswith(f"/files/{SHA}") and t.calls[0][1] == {"x-apikey": "key"}
    assert t.calls[1][0].endswith("/behaviour_mitre_trees")
    # now cached: no further calls even when online
    fetch_report(SHA, tmp_path / "a", offline=False, client=client)
    assert len(t.calls) == 4


def test_cache_is_read_from_fixture_dir(tmp_path, fixtures):
    shutil.copytree(fixtures / "vt", tmp_path / "vt")
    reports, missing = fetch_reports([SHA], tmp_path)
    assert missing == [] and reports[SHA].tactics == {"Collection", "Discovery"}


def test_client_status_handling():
    assert VtClient("k", Transport([(404, {}, b"")])).get("files/x") is None
    with pytest.raises(AuthError):
        VtClient("k", Transport([(401, {}, b"")])).get("files/x")
    with pytest.raises(AuthError):
        VtClient("", Transport([])).get("files/x")
    with pytest.raises(MalformedReport):
        VtClient("k", Transport([(200, {}, b"not json")])).get("files/x")
    with pytest.raises(MalformedReport):
        VtClient("k", Transport([(500, {}, b"")])).get("files/x")


def test_rate_limit_honours_retry_after():
    slept = []
    t = Transport([(429, {"Retry-After": "7"}, b""), (429, {}, b""), (200, {}, b"{}")])
    assert VtClient("k", t, backoff=2.0, sleep=slept.append).get("files/x") == {}
    assert slept == [7.0, 4.0]
    t = Transport([(429, {"retry-after": "3"}, b"")] * 3)
    with pytest.raises(RateLimited) as exc:
        VtClient("k", t, max_retries=2, sleep=slept.append).get("files/x")
    assert exc.value.retry_after == 3.0
    assert len(t.calls) == 3


def test_read_predictions(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sha256,probability,label,true_label\nab,0.9,1,1\ncd,0.1,0,1\n")
    assert read_predictions(p) == [pred("ab", 1), pred("cd", 0)]
