"""Command-line entry point.

Every stage reads and writes files in a work directory. Each output gets a
``.meta.json`` sidecar holding its hash, the hashes of its inputs and the
configuration in force, so later stages can detect upstream edits.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .apk import extract_corpus, read_features, write_features, ApkStaticFeatures
from .artifacts import file_sha256, fingerprint, require, write_json, write_meta
from .byol import ByolModel, Embedding, embed, train_byol
from .classifier import LrModel, evaluate, grid_search
from .config import PipelineConfig
from .dataset import Split, SplitSpec, read_manifest, temporal_split, time_folds, write_manifest
from .errors import ConfigInvalid, EmptyCorpus, TimedroidError
from .features import MODALITIES, FeatureList, NgramVocabulary, build_vocab, featurize, read_matrix, write_matrix
from .report import fetch_reports, obfuscation_breakdown, prevalence, read_predictions, render_report
from .timestamps import VerificationTables, verify_corpus, verify_sample, write_results_csv

log = logging.getLogger("timedroid")

FEATURES = "features.ndjson"
MANIFEST = "manifest.csv"
VERIFICATION = "verification.csv"
SPLIT = "split.json"
VOCAB = "vocab.json"
EMBEDDINGS = "embeddings.npz"
LR_MODEL = "lr_model.json"
CV_TABLE = "cv_table.csv"
PREDICTIONS = "predictions.csv"
METRICS = "metrics.json"


def matrix_name(m):
    return f"matrix_{m}.ndjson"


def model_name(m):
    return f"byol_{m}.npz"


class Stage:
    """Per-invocation context: resolved config plus work-directory paths."""

    def __init__(self, name, cfg):
        self.name = name
        self.cfg = cfg
        self.work = Path(cfg.paths.workdir)
        self.work.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.work / name

    def need(self, name_or_path):
        p = Path(name_or_path)
        if not p.is_absolute() and p.parent == Path("."):
            p = self.path(str(p))
        return require(p, self.name)

    def manifest(self):
        p = Path(self.cfg.paths.manifest) if self.cfg.paths.manifest else self.path(MANIFEST)
        return require(p, self.name)

    def done(self, out, inputs, **extra):
        write_meta(out, self.name, {k: v for k, v in inputs.items() if v is not None},
                   {"config": portable_config(self.cfg), "version": __version__, **extra})


def portable_config(cfg):
    """Config as stored next to artifacts; the work directory itself is left
    out so a relocated run produces the same bytes."""
    doc = cfg.to_json()
    doc["paths"] = {k: v for k, v in doc["paths"].items() if k != "workdir"}
    return doc


def _needs_seed(cfg, stage):
    if cfg.seed is None:
        raise ConfigInvalid(f"[{stage}] --seed is required")


def _columns(cfg, vocab):
    return {
        "opcode": vocab,
        "api": FeatureList.load("api", cfg.featurizer.api_list),
        "permission": FeatureList.load("permission", cfg.featurizer.permission_list),
    }


def _present(ids, available, what, stage):
    have = [i for i in ids if i in available]
    if len(have) < len(ids):
        log.warning("[%s] %d %s id(s) have no extracted features and are skipped", stage, len(ids) - len(have), what)
    return have


# -- stages ----------------------------------------------------------------

def cmd_extract(cfg, args):
    st = Stage("extract", cfg)
    items = []
    if cfg.paths.manifest and Path(cfg.paths.manifest).exists():
        base = Path(cfg.paths.manifest).parent
        for s in read_manifest(cfg.paths.manifest):
            if s.path:
                items.append((base / s.path, s.sha256))
    if not items:
        if not cfg.paths.apks:
            raise ConfigInvalid("[extract] need --apks DIR or a manifest with a path column")
        items = [(p, None) for p in sorted(Path(cfg.paths.apks).rglob("*.apk"))]
    if not items:
        raise EmptyCorpus(f"[extract] no APKs found under {cfg.paths.apks}")
    records, errors = [], []
    for rec, err in extract_corpus(items, cfg.workers, cfg.featurizer.framework_prefixes):
        if err:
            log.warning("[extract] %s", err)
            errors.append(err)
        else:
            records.append(ApkStaticFeatures.from_dict(rec))
    out = st.path(FEATURES)
    write_features(out, records)
    st.done(out, {}, failures=errors, apps=len(records))
    print(f"extract: {len(records)} app(s) written to {out}, {len(errors)} failed")


def cmd_synth(cfg, args):
    from .synthetic import SyntheticSpec, generate

    st = Stage("synth", cfg)
    spec = SyntheticSpec(n_samples=args.n, seed=args.synthetic_seed)
    records, samples = generate(
        spec,
        FeatureList.load("api", cfg.featurizer.api_list),
        FeatureList.load("permission", cfg.featurizer.permission_list),
    )
    out = st.path(FEATURES)
    write_features(out, records)
    st.done(out, {}, synthetic=spec.__dict__)
    man = st.path(MANIFEST)
    write_manifest(man, samples)
    st.done(man, {}, synthetic=spec.__dict__)
    print(f"synth: {len(records)} synthetic app(s) in {st.work}")


def cmd_verify_timestamps(cfg, args):
    st = Stage("verify-timestamps", cfg)
    features = st.need(args.features or FEATURES)
    manifest = st.manifest()
    if not cfg.paths.tables:
        raise ConfigInvalid("[verify-timestamps] --tables DIR is required")
    tables = VerificationTables.load(cfg.paths.tables).validate()
    apis = {r.sha256: r.apis for r in read_features(features)}
    results = []
    for s in read_manifest(manifest):
        if s.sha256 in apis:
            results.append(verify_sample(s, apis[s.sha256], tables, cfg.strict_date, cfg.featurizer.framework_prefixes))
    out = Path(args.out) if args.out else st.path(VERIFICATION)
    write_results_csv(out, results)
    report = verify_corpus(results)
    summary = out.with_name(out.stem + "_summary.json")
    write_json(summary, report.to_json())
    inputs = {"features": features, "manifest": manifest}
    st.done(out, inputs)
    st.done(summary, inputs)
    print(f"verify-timestamps: {report.discrepant}/{report.total} discrepant "
          f"({100 * report.discrepancy_rate:.2f}%), unmatched API refs {100 * report.unmatched_rate:.2f}%")


def cmd_split(cfg, args):
    st = Stage("split", cfg)
    manifest = st.manifest()
    sp = cfg.split
    split = temporal_split(read_manifest(manifest), SplitSpec(sp.test_year, sp.test_malware, sp.test_benign))
    out = st.path(SPLIT)
    split.save(out)
    st.done(out, {"manifest": manifest})
    print(f"split: train {len(split.train)}, test {len(split.test)}, excluded {len(split.excluded)}")


def cmd_build_vocab(cfg, args):
    st = Stage("build-vocab", cfg)
    features = st.need(FEATURES)
    split_path = st.need(SPLIT)
    train = set(Split.load(split_path).train)
    records = [r for r in read_features(features) if r.sha256 in train]
    vocab = build_vocab(records, cfg.featurizer.n, file_sha256(split_path), cfg.featurizer.include_unknown)
    out = st.path(VOCAB)
    vocab.save(out)
    st.done(out, {"features": features, "split": split_path}, fingerprint=vocab.fingerprint)
    print(f"build-vocab: {vocab.dimension} {vocab.n}-grams from {len(records)} training app(s)")


def cmd_featurize(cfg, args):
    st = Stage("featurize", cfg)
    vocab_path = st.need(VOCAB)
    features = st.need(FEATURES)
    columns = _columns(cfg, NgramVocabulary.load(vocab_path))
    records = list(read_features(features))
    for m in MODALITIES:
        mat = featurize(records, columns[m])
        out = st.path(matrix_name(m))
        write_matrix(out, mat)
        st.done(out, {"features": features, "vocab": vocab_path if m == "opcode" else None},
                fingerprint=mat.fingerprint)
        print(f"featurize: {m} {mat.X.shape[0]}x{mat.dimension}")


def _load_matrices(st):
    return {m: read_matrix(st.need(matrix_name(m))) for m in MODALITIES}


def cmd_pretrain(cfg, args):
    _needs_seed(cfg, "pretrain")
    st = Stage("pretrain", cfg)
    split_path = st.need(SPLIT)
    mats = _load_matrices(st)
    train = _present(Split.load(split_path).train, set(mats["opcode"].ids), "train", st.name)
    for m in MODALITIES:
        bcfg = cfg.byol_for(m)
        model = train_byol(mats[m].rows(train), bcfg, m, mats[m].fingerprint, log)
        out = st.path(model_name(m))
        model.save(out)
        curve = st.path(f"loss_{m}.csv")
        model.write_loss_curve(curve)
        inputs = {"matrix": st.path(matrix_name(m)), "split": split_path}
        st.done(out, inputs, fingerprint=model.fingerprint)
        st.done(curve, inputs)
        losses = model.epoch_losses()
        if losses:
            print(f"pretrain: {m} loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epoch(s)")


def cmd_embed(cfg, args):
    st = Stage("embed", cfg)
    mats = _load_matrices(st)
    models = {m: ByolModel.load(st.need(model_name(m))) for m in MODALITIES}
    emb = embed(models, mats)
    out = st.path(EMBEDDINGS)
    emb.save(out)
    inputs = {f"model_{m}": st.path(model_name(m)) for m in MODALITIES}
    inputs.update({f"matrix_{m}": st.path(matrix_name(m)) for m in MODALITIES})
    st.done(out, inputs, fingerprint=emb.fingerprint)
    print(f"embed: {emb.X.shape[0]} sample(s) x {emb.X.shape[1]} dims")


def _labels(manifest):
    return {s.sha256: s for s in read_manifest(manifest)}


def cmd_train(cfg, args):
    _needs_seed(cfg, "train")
    st = Stage("train", cfg)
    emb_path = st.need(EMBEDDINGS)
    split_path = st.need(SPLIT)
    manifest = st.manifest()
    emb = Embedding.load(emb_path)
    samples = _labels(manifest)
    train = _present(Split.load(split_path).train, set(emb.ids), "train", st.name)
    plan = time_folds([samples[i] for i in train], cfg.classifier.folds)
    y = np.array([samples[i].label for i in train])
    result = grid_search(emb.rows(train), y, train, plan, cfg.classifier.grid, cfg.seed, emb.fingerprint)
    model = replace(result.best, threshold=cfg.classifier.threshold)
    out = st.path(LR_MODEL)
    model.save(out)
    table = st.path(CV_TABLE)
    result.write_table(table)
    inputs = {"embeddings": emb_path, "split": split_path, "manifest": manifest}
    st.done(out, inputs, best_C=result.best_C)
    st.done(table, inputs)
    means = ", ".join(f"C={c:g}: {f:.3f}" for c, f in sorted(result.mean_f1().items()))
    print(f"train: best C={result.best_C:g} (mean CV F1 {means}); stop={model.stop_reason}")


def cmd_evaluate(cfg, args):
    st = Stage("evaluate", cfg)
    model_path = st.need(LR_MODEL)
    emb_path = st.need(EMBEDDINGS)
    split_path = st.need(SPLIT)
    manifest = st.manifest()
    model = LrModel.load(model_path)
    emb = Embedding.load(emb_path)
    samples = _labels(manifest)
    test = _present(Split.load(split_path).test, set(emb.ids), "test", st.name)
    y = np.array([samples[i].label for i in test])
    rep = evaluate(model, emb.rows(test), y, test, emb.fingerprint)
    preds = st.path(PREDICTIONS)
    rep.write_predictions(preds)
    metrics = st.path(METRICS)
    write_json(metrics, rep.summary())
    inputs = {"model": model_path, "embeddings": emb_path, "split": split_path, "manifest": manifest}
    st.done(preds, inputs)
    st.done(metrics, inputs)
    s = rep.summary()
    print(f"evaluate: n={rep.n} accuracy {s['accuracy']:.4f} precision {s['precision']:.4f} "
          f"recall {s['recall']:.4f} F1 {s['f1']:.4f} (TP {rep.tp}, FP {rep.fp}, TN {rep.tn}, FN {rep.fn})")


def cmd_report_mitre(cfg, args):
    st = Stage("report-mitre", cfg)
    preds_path = st.need(args.predictions or PREDICTIONS)
    if not cfg.paths.cache:
        raise ConfigInvalid("[report-mitre] --cache DIR is required")
    preds = read_predictions(preds_path)
    malware = [p["sha256"] for p in preds if p["true_label"] == 1]
    reports, missing = fetch_reports(malware, cfg.paths.cache, cfg.report.offline,
                                     max_concurrent=cfg.report.max_concurrent)
    if missing:
        log.warning("[report-mitre] %d malware sample(s) have no cached report", len(missing))
    tactics, techniques = prevalence(preds, reports)
    obf = obfuscation_breakdown(preds, reports)
    outputs = {
        "mitre_tactics.csv": tactics.write_csv,
        "mitre_techniques.csv": techniques.write_csv,
    }
    for name, writer in outputs.items():
        writer(st.path(name))
    write_json(st.path("obfuscation.json"), obf)
    st.path("mitre_report.md").write_text(render_report(tactics, techniques, obf))
    cache_fp = fingerprint(sorted(file_sha256(Path(cfg.paths.cache) / "vt" / f"{h}.json") for h in reports))
    for name in (*outputs, "obfuscation.json", "mitre_report.md"):
        st.done(st.path(name), {"predictions": preds_path}, cache_fingerprint=cache_fp)
    print(f"report-mitre: {len(reports)} report(s), {len(missing)} missing; "
          f"TP n={tactics.tp_total}, FN n={tactics.fn_total}")


def cmd_pipeline(cfg, args):
    if args.synthetic:
        args.n = args.synthetic
        cfg = replace(cfg, paths=replace(cfg.paths, manifest=None))
        cmd_synth(cfg, args)
    elif cfg.paths.apks or (cfg.paths.manifest and not Path(cfg.paths.workdir, FEATURES).exists()):
        cmd_extract(cfg, args)
    _needs_seed(cfg, "pipeline")
    if cfg.paths.tables:
        cmd_verify_timestamps(cfg, args)
    for fn in (cmd_split, cmd_build_vocab, cmd_featurize, cmd_pretrain, cmd_embed, cmd_train, cmd_evaluate):
        fn(cfg, args)
    if cfg.paths.cache:
        cmd_report_mitre(cfg, args)


COMMANDS = {
    "extract": cmd_extract,
    "synth": cmd_synth,
    "verify-timestamps": cmd_verify_timestamps,
    "split": cmd_split,
    "build-vocab": cmd_build_vocab,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report-mitre": cmd_report_mitre,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared options (override --config)")
    g.add_argument("--config", help="JSON pipeline config")
    g.add_argument("--workdir")
    g.add_argument("--apks", help="directory of .apk files")
    g.add_argument("--manifest", help="CSV: sha256,label,timestamp,source[,path]")
    g.add_argument("--tables", help="directory holding the API-introduction tables")
    g.add_argument("--cache", help="cache root holding vt/<sha256>.json")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--include-unknown", action="store_true", default=None)
    g.add_argument("--api-list")
    g.add_argument("--permission-list")
    g.add_argument("--test-year", type=int)
    g.add_argument("--test-malware", type=int)
    g.add_argument("--test-benign", type=int)
    g.add_argument("--folds", type=int)
    g.add_argument("--grid", type=float, nargs="+")
    g.add_argument("--epochs", type=int, help="BYOL epochs for every modality")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--strict-date", action="store_true", default=None)
    online = g.add_mutually_exclusive_group()
    online.add_argument("--offline", dest="offline", action="store_true", default=None)
    online.add_argument("--online", dest="offline", action="store_false")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="timedroid", description="Time-aware Android malware detection pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "verify-timestamps":
            sp.add_argument("--features")
            sp.add_argument("--out")
        if name == "report-mitre":
            sp.add_argument("--predictions")
        if name == "synth":
            sp.add_argument("--n", type=int, default=5000)
        if name == "pipeline":
            sp.add_argument("--synthetic", type=int, metavar="N", help="generate an N-sample synthetic corpus first")
        if name in ("synth", "pipeline"):
            sp.add_argument("--synthetic-seed", type=int, default=0)
    return p


def resolve_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.override("paths", workdir=args.workdir, apks=args.apks, manifest=args.manifest,
                       tables=args.tables, cache=args.cache)
    cfg = cfg.override("featurizer", include_unknown=args.include_unknown, api_list=args.api_list,
                       permission_list=args.permission_list)
    cfg = cfg.override("split", test_year=args.test_year, test_malware=args.test_malware, test_benign=args.test_benign)
    cfg = cfg.override("classifier", folds=args.folds, grid=args.grid)
    cfg = cfg.override("report", offline=args.offline)
    cfg = cfg.override(None, seed=args.seed, workers=args.workers, strict_date=args.strict_date)
    byol = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size)) if v is not None}
    if byol:
        cfg = replace(cfg, byol={**cfg.byol, **byol})
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        Path(cfg.paths.workdir).mkdir(parents=True, exist_ok=True)
        write_json(Path(cfg.paths.workdir) / "config.json", portable_config(cfg))
        COMMANDS[args.command](cfg, args)
    except TimedroidError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        log.error("[%s] %s: %s", args.command, type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
