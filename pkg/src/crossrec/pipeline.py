"""End-to-end stages: synth, ingest, preprocess, threshold, assemble, train, evaluate, analyze."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .base import Recommender
from .data import (
    Catalog,
    Dataset,
    SchemaManifest,
    Session,
    Action,
    Vocabulary,
    load_dataset,
    parse_timestamp,
)
from .evaluation import (
    EvalReport,
    PostFilter,
    ablation_groups,
    breakdown_rows,
    cutoff_rows,
    evaluate,
    relative_change,
    remove_actions,
    shuffle_sessions,
    temporal_split,
    write_csv,
    write_report,
)
from .preprocess import PreprocessReport, preprocess
from .registry import CROSS_SESSIONS, MODEL_NAMES, load_recommender, make_recommender, save_recommender
from .sessionize import (
    DAY,
    TaskInstance,
    assemble_tasks,
    crossing_threshold,
    fit_gmm2_em,
    gap_histogram,
    inter_session_gaps,
    log_gaps,
)
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "preprocess", "estimate-threshold", "assemble", "train", "evaluate", "analyze")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return 10 + STAGES.index(self.stage)


@dataclass
class stage:
    """Context manager that tags any failure with the stage name."""

    name: str

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# -------------------------------------------------------------------- config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PreprocessConfig(_Strict):
    min_freq: float = Field(0.001, gt=0.0, lt=1.0)
    min_actions: int = Field(3, ge=1)
    max_actions: int = Field(30, ge=1)
    cutoff: str | None = None


class AnalysisConfig(_Strict):
    cutoffs: bool = True
    breakdown: bool = True
    shuffle: bool = False
    shuffle_repeats: int = Field(5, ge=1)
    ablation: bool = False
    ablation_models: list[str] = ["encode"]


class RunConfig(_Strict):
    """Everything a run needs; unknown keys are rejected."""

    data: str = "synth"
    out: str = "runs/default"
    schema_manifest: str | None = None
    pipeline: Literal["full", "evaluate"] = "full"
    seed: int = 0
    models: list[str] = list(MODEL_NAMES)
    reference: str = "encode"
    synth: SynthConfig = SynthConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    threshold_days: float | None = Field(None, gt=0)
    max_sessions: int = Field(7, ge=1)
    test_frac: float = Field(0.10, gt=0, lt=1)
    val_frac: float = Field(0.10, gt=0, lt=1)
    cutoff_k: int = Field(3, ge=1, le=5)
    hyperparameters: dict[str, dict[str, Any]] = {}
    analysis: AnalysisConfig = AnalysisConfig()

    @field_validator("models")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in MODEL_NAMES]
        if bad:
            raise ValueError(f"unknown models {bad}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate model names")
        return v

    def config_hash(self) -> str:
        """sha256 of every setting except the output location, which does not affect results."""
        payload = self.model_dump(mode="json", exclude={"out"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file (JSON) with flag overrides applied on top; nested keys use dicts."""
    raw = json.loads(Path(path).read_text()) if path else {}
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    return RunConfig.model_validate(raw)


# ---------------------------------------------------------------- task files


def _session_to_dict(s: Session) -> dict:
    return {"session_id": s.session_id, "actions": [list(a) for a in s.actions]}


def task_to_dict(t: TaskInstance) -> dict:
    return {
        "user_id": t.user_id,
        "timestamp": t.timestamp,
        "items": list(t.items),
        "portfolio": dict(sorted(t.portfolio.items())),
        "demographics": list(t.demographics),
        "demographics_missing": t.demographics_missing,
        "sessions": [_session_to_dict(s) for s in t.sessions],
    }


def task_from_dict(d: dict) -> TaskInstance:
    sessions = tuple(
        Session(s["session_id"], d["user_id"], tuple(Action(a[0], a[1], a[2], int(a[3])) for a in s["actions"]))
        for s in d["sessions"]
    )
    return TaskInstance(
        d["user_id"], int(d["timestamp"]), sessions, tuple(d["items"]), dict(d["portfolio"]),
        tuple(float(x) for x in d["demographics"]), bool(d["demographics_missing"]),
    )


def write_tasks(out_dir, tasks: Sequence[TaskInstance], vocab: Vocabulary, catalog: Catalog) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "tasks.jsonl").open("w") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_dict(t), sort_keys=True) + "\n")
    _write_json(out / "vocabulary.json", vocab.to_dict())
    _write_json(out / "catalog.json", {"items": list(catalog.items), "base_of": dict(catalog.base_of)})


def read_tasks(task_dir) -> tuple[list[TaskInstance], Vocabulary, Catalog]:
    d = Path(task_dir)
    for name in ("tasks.jsonl", "vocabulary.json", "catalog.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing {d / name}; run the assemble stage first")
    tasks = [task_from_dict(json.loads(line)) for line in (d / "tasks.jsonl").read_text().splitlines() if line]
    vocab = Vocabulary.from_dict(json.loads((d / "vocabulary.json").read_text()))
    c = json.loads((d / "catalog.json").read_text())
    return tasks, vocab, Catalog(tuple(c["items"]), c["base_of"])


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------------- stages


def ingest_stage(data_dir, schema_manifest=None) -> Dataset:
    m = SchemaManifest.load(schema_manifest) if schema_manifest else None
    return load_dataset(data_dir, m)


def preprocess_stage(ds: Dataset, cfg: PreprocessConfig) -> tuple[Dataset, PreprocessReport]:
    cutoff = parse_timestamp(cfg.cutoff) if cfg.cutoff else None
    return preprocess(ds, cfg.min_freq, cfg.min_actions, cfg.max_actions, cutoff)


def threshold_stage(ds: Dataset, seed: int = 0, override_days: float | None = None) -> dict:
    """Fit the gap mixture; `override_days` replaces the estimate but the fit is still reported."""
    x = log_gaps(inter_session_gaps(ds.sessions))
    g = fit_gmm2_em(x, seed=seed)
    t = crossing_threshold(g)
    out = {
        "gmm": g.to_dict(),
        "threshold_seconds": t,
        "threshold_days": t / DAY,
        "n_gaps": int(x.size),
        "histogram": gap_histogram(x, g, 50),
    }
    if override_days is not None:
        out["override_days"] = override_days
        out["threshold_seconds"] = override_days * DAY
        out["threshold_days"] = override_days
    return out


def split_tasks(tasks: Sequence[TaskInstance], test_frac: float = 0.1, val_frac: float = 0.1):
    """Temporal train/validation/test; validation repeats the rule inside training."""
    train, test = temporal_split(tasks, test_frac)
    train, val = temporal_split(train, val_frac)
    return train, val, test


def train_one(name, vocab, train, val, cfg: RunConfig) -> Recommender:
    rec = make_recommender(name, vocab, cfg.hyperparameters.get(name), cfg.seed)
    return rec.fit(train, val)


def score_all(recs: dict[str, Recommender], tasks) -> dict[str, np.ndarray]:
    return {name: rec.score(tasks) for name, rec in recs.items()}


def evaluate_stage(recs, test, vocab, catalog, reference="encode", k=3) -> EvalReport:
    return evaluate(score_all(recs, test), test, vocab, PostFilter(catalog, vocab), reference, k)


def _measures_at(report: EvalReport, model: str, k: int) -> dict[str, float]:
    return {m: report.mean(model, f"{m}@{k}") for m in ("HR", "Precision", "Recall", "MRR", "MAP")}


def shuffle_study(models, vocab, catalog, train, val, test, base: EvalReport, cfg: RunConfig) -> list[dict]:
    """Retrain on session-order-shuffled tasks; mean relative change per measure."""
    rows = []
    for name in models:
        deltas: dict[str, list[float]] = {}
        for r in range(cfg.analysis.shuffle_repeats):
            rng = np.random.default_rng([cfg.seed, 1000 + r])
            tr, va, te = (shuffle_sessions(x, rng) for x in (train, val, test))
            rec = train_one(name, vocab, tr, va, cfg)
            rep = evaluate_stage({name: rec}, te, vocab, catalog, k=cfg.cutoff_k)
            for meas, v in _measures_at(rep, name, cfg.cutoff_k).items():
                deltas.setdefault(meas, []).append(relative_change(v, base.mean(name, f"{meas}@{cfg.cutoff_k}")))
        for meas, d in deltas.items():
            rows.append({"model": name, "measure": f"{meas}@{cfg.cutoff_k}", "repeats": len(d), "mean_relative_change": float(np.mean(d))})
    return rows


def ablation_study(models, vocab, catalog, train, val, test, base: EvalReport, cfg: RunConfig) -> list[dict]:
    """Remove one action group everywhere, retrain, and compare on the same test purchases."""
    rows = []
    for group, drop in ablation_groups(vocab).items():
        tr, va, te = (remove_actions(x, drop) for x in (train, val, test))
        removed = sum(len(s) for x in (train, val, test) for t in x for s in t.sessions) - sum(
            len(s) for x in (tr, va, te) for t in x for s in t.sessions
        )
        for name in models:
            if removed:
                rec = train_one(name, vocab, tr, va, cfg)
                rep = evaluate_stage({name: rec}, te, vocab, catalog, k=cfg.cutoff_k)
                vals = _measures_at(rep, name, cfg.cutoff_k)
            else:
                # nothing removed: identical inputs and seeds give identical metrics
                vals = _measures_at(base, name, cfg.cutoff_k)
            for meas, v in vals.items():
                ref = base.mean(name, f"{meas}@{cfg.cutoff_k}")
                rows.append({
                    "model": name,
                    "group": group,
                    "removed_actions": removed,
                    "measure": f"{meas}@{cfg.cutoff_k}",
                    "value": v,
                    "baseline": ref,
                    "relative_change": relative_change(v, ref),
                })
    return rows


def analyze_stage(recs, vocab, catalog, train, val, test, report: EvalReport, cfg: RunConfig, out_dir) -> list[str]:
    out = Path(out_dir)
    written = []
    a = cfg.analysis
    if a.cutoffs:
        rows = [r for r in cutoff_rows(report) if r["measure"] in ("HR", "MRR")]
        write_csv(out / "cutoff_sweep.csv", rows, ["model", "measure", "k", "value"])
        written.append("cutoff_sweep.csv")
    if a.breakdown:
        write_csv(out / "breakdown.csv", breakdown_rows(report, f"HR@{cfg.cutoff_k}"), ["model", "group", "bin", "n_tasks", "value"])
        written.append("breakdown.csv")
    cross = [m for m in recs if m in CROSS_SESSIONS]
    if a.shuffle and cross:
        rows = shuffle_study(cross, vocab, catalog, train, val, test, report, cfg)
        write_csv(out / "shuffle.csv", rows, ["model", "measure", "repeats", "mean_relative_change"])
        written.append("shuffle.csv")
    if a.ablation:
        missing = [m for m in a.ablation_models if m not in recs]
        if missing:
            raise FileNotFoundError(f"no trained checkpoint for ablation models {missing}")
        rows = ablation_study(a.ablation_models, vocab, catalog, train, val, test, report, cfg)
        write_csv(out / "ablation.csv", rows, ["model", "group", "removed_actions", "measure", "value", "baseline", "relative_change"])
        written.append("ablation.csv")
    return written


# ------------------------------------------------------------------------ run


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: RunConfig) -> Path:
    """Run every stage and write a deterministic artifacts directory."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.data == "synth":
        with stage("synth"):
            data_dir = generate(cfg.synth.model_copy(update={"seed": cfg.seed}), out / "data")
    else:
        data_dir = Path(cfg.data)

    with stage("ingest"):
        ds = ingest_stage(data_dir, cfg.schema_manifest)
    with stage("preprocess"):
        ds, prep = preprocess_stage(ds, cfg.preprocess)
        _write_json(out / "preprocess_report.json", prep.to_dict())
    with stage("estimate-threshold"):
        thr = threshold_stage(ds, cfg.seed, cfg.threshold_days)
        _write_json(out / "threshold.json", thr)
    with stage("assemble"):
        tasks, asm = assemble_tasks(ds.purchases, ds.sessions, ds.users, thr["threshold_seconds"], cfg.max_sessions)
        write_tasks(out / "tasks", tasks, ds.vocabulary, ds.catalog)
        _write_json(out / "tasks" / "assembly_report.json", asm.to_dict())
    vocab, catalog = ds.vocabulary, ds.catalog

    with stage("train"):
        train, val, test = split_tasks(tasks, cfg.test_frac, cfg.val_frac)
        _write_json(out / "split.json", {"train": len(train), "validation": len(val), "test": len(test)})
        recs = {}
        for name in cfg.models:
            log.info("training %s", name)
            recs[name] = train_one(name, vocab, train, val, cfg)
            save_recommender(recs[name], out / "checkpoints" / f"{name}.npz", {"config_hash": cfg.config_hash()})

    with stage("evaluate"):
        report = evaluate_stage(recs, test, vocab, catalog, cfg.reference, cfg.cutoff_k)
        write_report(report, out / "reports", cfg.cutoff_k)

    if cfg.pipeline == "full":
        with stage("analyze"):
            analyze_stage(recs, vocab, catalog, train, val, test, report, cfg, out / "analysis")

    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _write_json(out / "manifest.json", {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "threshold_days": thr["threshold_days"],
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    })
    return out


def load_trained(checkpoints: Sequence, vocab: Vocabulary | None = None) -> dict[str, Recommender]:
    recs = {}
    for p in checkpoints:
        rec = load_recommender(p, vocab)
        recs[rec.name] = rec
    return recs


__all__ = [
    "STAGES", "StageError", "RunConfig", "AnalysisConfig", "PreprocessConfig", "load_config",
    "task_to_dict", "task_from_dict", "write_tasks", "read_tasks", "ingest_stage", "preprocess_stage",
    "threshold_stage", "split_tasks", "train_one", "evaluate_stage", "analyze_stage", "run_experiment",
    "load_trained",
]
