"""Command line entry point: ``crossrec <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import export_dataset, save_vocabulary
from .evaluation import write_report
from .models import _unique_sessions, train_autoencoder
from .pipeline import (
    STAGES,
    PreprocessConfig,
    StageError,
    _write_json,
    analyze_stage,
    evaluate_stage,
    ingest_stage,
    load_config,
    load_trained,
    preprocess_stage,
    read_tasks,
    run_experiment,
    split_tasks,
    stage,
    threshold_stage,
    write_tasks,
)
from .registry import MODEL_NAMES, load_autoencoder, make_recommender, save_autoencoder, save_recommender
from .sessionize import DAY, assemble_tasks
from .synth import SynthConfig, generate

__all__ = ["main", "build_parser", "STAGES"]

log = logging.getLogger("crossrec")


def _synth(a):
    raw = json.loads(Path(a.config).read_text()) if a.config else {}
    flags = {"n_users": a.users, "n_items": a.items, "n_coverages": a.coverages,
             "rule_strength": a.rule_strength, "noise": a.noise, "seed": a.seed}
    raw.update({k: v for k, v in flags.items() if v is not None})
    with stage("synth"):
        generate(SynthConfig.model_validate(raw), a.out)
    print(f"wrote synthetic dataset to {a.out}")


def _ingest(a):
    with stage("ingest"):
        ds = ingest_stage(a.data, a.schema_manifest)
        export_dataset(ds, a.out)
        save_vocabulary(ds.vocabulary, Path(a.out) / "vocabulary.json")
    print(f"{len(ds.sessions)} sessions, {len(ds.purchases)} purchase events, {len(ds.users)} users -> {a.out}")


def _preprocess(a):
    with stage("ingest"):
        ds = ingest_stage(a.data, a.schema_manifest)
    with stage("preprocess"):
        cfg = PreprocessConfig(min_freq=a.min_freq, min_actions=a.min_actions, max_actions=a.max_actions, cutoff=a.cutoff)
        ds, rep = preprocess_stage(ds, cfg)
        export_dataset(ds, a.out)
        save_vocabulary(ds.vocabulary, Path(a.out) / "vocabulary.json")
        _write_json(Path(a.out) / "preprocess_report.json", rep.to_dict())
    print(json.dumps(rep.to_dict(), indent=2))


def _threshold(a):
    with stage("ingest"):
        ds = ingest_stage(a.data, a.schema_manifest)
    with stage("estimate-threshold"):
        out = threshold_stage(ds, a.seed)
        _write_json(a.out, out)
    print(f"threshold {out['threshold_days']:.4f} days -> {a.out}")


def _assemble(a):
    with stage("ingest"):
        ds = ingest_stage(a.data, a.schema_manifest)
    with stage("assemble"):
        if a.threshold_days is not None:
            t = a.threshold_days * DAY
        elif a.threshold:
            t = json.loads(Path(a.threshold).read_text())["threshold_seconds"]
        else:
            raise ValueError("give --threshold FILE or --threshold-days")
        tasks, rep = assemble_tasks(ds.purchases, ds.sessions, ds.users, t, a.max_sessions)
        write_tasks(a.out, tasks, ds.vocabulary, ds.catalog)
        _write_json(Path(a.out) / "assembly_report.json", rep.to_dict())
    print(f"{len(tasks)} tasks -> {a.out}")


def _hyper_flags(a) -> dict:
    flags = {"units": a.units, "batch_size": a.batch_size, "dropout": a.dropout,
             "max_epochs": a.max_epochs, "patience": a.patience, "lr": a.lr}
    return {k: v for k, v in flags.items() if v is not None}


def _cfg(a, **extra):
    over = {k: v for k, v in extra.items() if v is not None}
    if getattr(a, "seed", None) is not None:
        over["seed"] = a.seed
    return load_config(a.config, over)


def _train(a):
    cfg = _cfg(a, test_frac=a.test_frac, val_frac=a.val_frac)
    with stage("train"):
        tasks, vocab, _ = read_tasks(a.tasks)
        train, val, _ = split_tasks(tasks, cfg.test_frac, cfg.val_frac)
        hyper = {**cfg.hyperparameters.get(a.model, {}), **_hyper_flags(a)}
        if a.model == "autoencoder":
            ae, hist = train_autoencoder(
                _unique_sessions(train), vocab, hyper.get("units", 512), hyper.get("batch_size", 128),
                hyper.get("max_epochs", 20), hyper.get("patience", 1), hyper.get("lr", 1e-3), cfg.seed,
                _unique_sessions(val),
            )
            save_autoencoder(ae, vocab, a.out, {"history": hist.to_dict()})
        else:
            rec = make_recommender(a.model, vocab, hyper, cfg.seed)
            if a.autoencoder:
                if not a.model.endswith("auto"):
                    raise ValueError("--autoencoder only applies to auto variants")
                rec.autoencoder = load_autoencoder(a.autoencoder, vocab)
            rec.fit(train, val)
            save_recommender(rec, a.out, {"config_hash": cfg.config_hash()})
    print(f"trained {a.model} -> {a.out}")


def _evaluate(a):
    cfg = _cfg(a, test_frac=a.test_frac, val_frac=a.val_frac, reference=a.reference, cutoff_k=a.k)
    with stage("evaluate"):
        tasks, vocab, catalog = read_tasks(a.tasks)
        _, _, test = split_tasks(tasks, cfg.test_frac, cfg.val_frac)
        recs = load_trained(a.checkpoints, vocab)
        report = evaluate_stage(recs, test, vocab, catalog, cfg.reference, cfg.cutoff_k)
        write_report(report, a.out, cfg.cutoff_k)
    print((Path(a.out) / "summary.md").read_text())


def _analyze(a):
    toggles = {k: v for k, v in {"shuffle": a.shuffle or None, "ablation": a.ablation or None,
                                  "shuffle_repeats": a.repeats}.items() if v is not None}
    if a.ablation_models:
        toggles["ablation_models"] = a.ablation_models.split(",")
    cfg = _cfg(a, analysis=toggles or None, test_frac=a.test_frac, val_frac=a.val_frac)
    with stage("analyze"):
        tasks, vocab, catalog = read_tasks(a.tasks)
        train, val, test = split_tasks(tasks, cfg.test_frac, cfg.val_frac)
        if not a.checkpoints:
            raise FileNotFoundError("analyze needs at least one trained checkpoint")
        recs = load_trained(a.checkpoints, vocab)
        report = evaluate_stage(recs, test, vocab, catalog, cfg.reference, cfg.cutoff_k)
        written = analyze_stage(recs, vocab, catalog, train, val, test, report, cfg, a.out)
    print("wrote " + ", ".join(written))


def _run(a):
    over = {"pipeline": a.pipeline, "data": a.data, "seed": a.seed, "out": a.out, "schema_manifest": a.schema_manifest}
    if a.models:
        over["models"] = a.models.split(",")
    if a.users is not None:
        over["synth"] = {"n_users": a.users}
    if a.rule_strength is not None:
        over.setdefault("synth", {})["rule_strength"] = a.rule_strength
    cfg = load_config(a.config, {k: v for k, v in over.items() if v is not None})
    out = run_experiment(cfg)
    print((out / "reports" / "summary.md").read_text())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, out_help):
        sp.add_argument("--data", required=True, help="directory with sessions.csv, purchases.csv, users.csv")
        sp.add_argument("--schema-manifest", help="JSON file mapping file names and column headers")
        sp.add_argument("--out", required=True, help=out_help)

    def split_args(sp):
        sp.add_argument("--tasks", required=True, help="directory written by the assemble stage")
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--test-frac", type=float, help="share of latest purchase events used for testing")
        sp.add_argument("--val-frac", type=float, help="share of the training set used for validation")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="JSON file with synthetic-data settings")
    s.add_argument("--users", type=int, help="number of users")
    s.add_argument("--items", type=int, help="catalog size K")
    s.add_argument("--coverages", type=int, help="how many catalog items are additional coverages")
    s.add_argument("--rule-strength", type=float, help="probability a purchase leaves item actions behind")
    s.add_argument("--noise", type=float, help="per-session probability of a distractor item")
    s.add_argument("--seed", type=int, help="random seed")
    s.set_defaults(func=_synth)

    s = sub.add_parser("ingest", help="validate input CSVs and write them in canonical form")
    data_args(s, "output directory")
    s.set_defaults(func=_ingest)

    s = sub.add_parser("preprocess", help="rare-label filter, de-duplication, session length limits")
    data_args(s, "output directory for the cleaned CSVs")
    s.add_argument("--min-freq", type=float, default=0.001, help="minimum relative frequency of a label or item")
    s.add_argument("--min-actions", type=int, default=3, help="drop sessions with fewer actions")
    s.add_argument("--max-actions", type=int, default=30, help="truncate sessions to this many actions")
    s.add_argument("--cutoff", help="ISO time; frequencies are counted on data before it")
    s.set_defaults(func=_preprocess)

    s = sub.add_parser("estimate-threshold", help="fit the two-component gap mixture and report the threshold")
    data_args(s, "output JSON file")
    s.add_argument("--seed", type=int, default=0, help="seed for the k-means++ initialisation")
    s.set_defaults(func=_threshold)

    s = sub.add_parser("assemble", help="build one task per purchase event")
    data_args(s, "output directory (tasks.jsonl, vocabulary.json, catalog.json)")
    s.add_argument("--threshold", help="JSON written by estimate-threshold")
    s.add_argument("--threshold-days", type=float, help="inactivity threshold in days (overrides --threshold)")
    s.add_argument("--max-sessions", type=int, default=7, help="keep at most this many recent sessions")
    s.set_defaults(func=_assemble)

    s = sub.add_parser("train", help="train one model and write a checkpoint")
    split_args(s)
    s.add_argument("--model", required=True, choices=MODEL_NAMES + ("autoencoder",), help="model name")
    s.add_argument("--out", required=True, help="checkpoint path (.npz)")
    s.add_argument("--autoencoder", help="pre-trained autoencoder checkpoint for auto variants")
    s.add_argument("--units", type=int, help="hidden units")
    s.add_argument("--batch-size", type=int, help="mini-batch size")
    s.add_argument("--dropout", type=float, help="dropout rate on the recurrent output")
    s.add_argument("--max-epochs", type=int, help="epoch limit")
    s.add_argument("--patience", type=int, help="epochs without validation improvement before stopping")
    s.add_argument("--lr", type=float, help="Adam learning rate")
    s.set_defaults(func=_train)

    s = sub.add_parser("evaluate", help="score checkpoints on the test split and write reports")
    split_args(s)
    s.add_argument("--checkpoints", nargs="+", required=True, help="trained model checkpoints")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--reference", help="model the significance tests compare against (default encode)")
    s.add_argument("--k", type=int, help="cutoff for the summary and significance tests (default 3)")
    s.set_defaults(func=_evaluate)

    s = sub.add_parser("analyze", help="cutoff sweep, breakdowns, shuffle and ablation studies")
    split_args(s)
    s.add_argument("--checkpoints", nargs="*", default=[], help="trained model checkpoints")
    s.add_argument("--out", required=True, help="analysis directory")
    s.add_argument("--shuffle", action="store_true", help="retrain on session-order-shuffled data")
    s.add_argument("--repeats", type=int, help="shuffle repetitions (default 5)")
    s.add_argument("--ablation", action="store_true", help="retrain without each action group")
    s.add_argument("--ablation-models", help="comma-separated models for the ablation study")
    s.set_defaults(func=_analyze)

    s = sub.add_parser("run", help="run the whole pipeline into one artifacts directory")
    s.add_argument("--config", help="JSON run config; flags below override it")
    s.add_argument("--pipeline", choices=("full", "evaluate"), help="'full' also runs the analyses")
    s.add_argument("--data", help="'synth' or a dataset directory")
    s.add_argument("--schema-manifest", help="JSON file mapping file names and column headers")
    s.add_argument("--seed", type=int, help="random seed for every stage")
    s.add_argument("--models", help="comma-separated model names")
    s.add_argument("--out", help="artifacts directory")
    s.add_argument("--users", type=int, help="synthetic users (with --data synth)")
    s.add_argument("--rule-strength", type=float, help="synthetic planted-rule strength")
    s.set_defaults(func=_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"crossrec: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # config and argument problems
        print(f"crossrec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
