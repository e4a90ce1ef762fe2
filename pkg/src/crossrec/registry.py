"""Model names, construction from overrides, and checkpoint round-trips."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

from .base import Recommender
from .baselines import (
    DemographicRecommender,
    GRU4RecRecommender,
    PopularRecommender,
    RandomRecommender,
    SKNNRecommender,
    SVDRecommender,
)
from .data import Vocabulary
from .models import CrossSessionsModel, ModelSpec, SessionAutoencoder
from .nn import load_checkpoint, save_checkpoint

CROSS_SESSIONS = ("encode", "concat", "auto", "hybrid-encode", "hybrid-concat", "hybrid-auto")
BASELINES = ("random", "popular", "svd", "demographic", "gru4rec", "gru4rec-concat", "sknn-e", "sknn-eb")
MODEL_NAMES = CROSS_SESSIONS + BASELINES
NEURAL_KEYS = ("units", "batch_size", "dropout", "max_epochs", "patience", "lr", "seed")
SKNN_BOOST = 0.5


def _pick(overrides: Mapping[str, Any], allowed) -> dict:
    unknown = set(overrides) - set(allowed)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
    return dict(overrides)


def make_recommender(name: str, vocab: Vocabulary, overrides: Mapping[str, Any] | None = None, seed: int = 0) -> Recommender:
    """Untrained recommender for `name`; `overrides` replace the default hyperparameters."""
    o = {"seed": seed, **(overrides or {})}
    if name in CROSS_SESSIONS:
        demographic = name.startswith("hybrid-")
        variant = name.removeprefix("hybrid-")
        spec_keys = {f.name for f in fields(ModelSpec)} - {"variant", "demographic"}
        return CrossSessionsModel(vocab, ModelSpec(variant=variant, demographic=demographic, **_pick(o, spec_keys)))
    if name == "random":
        return RandomRecommender(vocab, **_pick(o, ("seed",)))
    if name in ("popular", "svd", "sknn-e", "sknn-eb"):
        o.pop("seed")
    if name == "popular":
        return PopularRecommender(vocab, **_pick(o, ()))
    if name == "svd":
        return SVDRecommender(vocab, **_pick(o, ("factors", "fold")))
    if name == "demographic":
        return DemographicRecommender(vocab, **_pick(o, NEURAL_KEYS))
    if name in ("gru4rec", "gru4rec-concat"):
        return GRU4RecRecommender(vocab, concat=name.endswith("concat"), **_pick(o, NEURAL_KEYS + ("item_agg",)))
    if name in ("sknn-e", "sknn-eb"):
        boost = SKNN_BOOST if name == "sknn-eb" else 0.0
        o = {"boost": boost, **o}
        if name == "sknn-eb" and not o["boost"]:
            raise ValueError("sknn-eb needs a positive boost")
        if name == "sknn-e" and o["boost"]:
            raise ValueError("sknn-e has no boost")
        return SKNNRecommender(vocab, **_pick(o, ("neighbors", "boost")))
    raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")


def save_recommender(rec: Recommender, path, extra: Mapping | None = None) -> Path:
    arrays, meta = rec.get_state()
    meta = {"model": rec.name, "vocabulary": rec.vocab.to_dict(), "state": meta, **(extra or {})}
    save_checkpoint(path, arrays, meta)
    return Path(path)


def load_recommender(path, vocab: Vocabulary | None = None) -> Recommender:
    """Rebuild a trained recommender; `vocab`, if given, must match the stored one."""
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    arrays, meta = load_checkpoint(path)
    stored = Vocabulary.from_dict(meta["vocabulary"])
    if vocab is not None and vocab != stored:
        raise ValueError(f"checkpoint {path} was trained with a different vocabulary")
    name = meta["model"]
    state = meta["state"]
    if name in CROSS_SESSIONS:
        spec = ModelSpec(**state["spec"])
        rec = CrossSessionsModel(stored, spec)
    else:
        rec = make_recommender(name, stored)
    rec.set_state(arrays, state)
    return rec


def save_autoencoder(ae: SessionAutoencoder, vocab: Vocabulary, path, extra: Mapping | None = None) -> Path:
    meta = {"model": "autoencoder", "units": ae.units, "vocabulary": vocab.to_dict(), **(extra or {})}
    save_checkpoint(path, ae.params, meta)
    return Path(path)


def load_autoencoder(path, vocab: Vocabulary | None = None) -> SessionAutoencoder:
    arrays, meta = load_checkpoint(path)
    if meta.get("model") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    stored = Vocabulary.from_dict(meta["vocabulary"])
    if vocab is not None and vocab != stored:
        raise ValueError(f"autoencoder {path} was trained with a different vocabulary")
    ae = SessionAutoencoder(stored.block_sizes, meta["units"])
    ae.params = arrays
    return ae
