"""Dataset schema, vocabularies, action binarization and CSV ingestion."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

SECTIONS = ("e-commerce", "claims-reporting", "information", "personal-account")
ACTION_TYPES = ("click", "start", "act", "complete")
NO_OBJECT = "no-object"


class DataFormatError(ValueError):
    """Malformed input file. Carries the offending path and 1-based line number."""

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}, line {line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class VocabularyError(KeyError):
    pass


class Action(NamedTuple):
    """A logged (section, object, type) action with its timestamp in epoch seconds."""

    section: str
    object: str
    action_type: str
    timestamp: int = 0

    @property
    def key(self) -> tuple[str, str, str]:
        return self.section, self.object, self.action_type


@dataclass(frozen=True)
class Session:
    session_id: str
    user_id: str
    actions: tuple[Action, ...]

    def __post_init__(self):
        if not self.actions:
            raise ValueError(f"session {self.session_id} has no actions")
        ts = [a.timestamp for a in self.actions]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"session {self.session_id}: timestamps decrease")

    @property
    def start_time(self) -> int:
        return self.actions[0].timestamp

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class PurchaseEvent:
    user_id: str
    timestamp: int
    items: tuple[str, ...]

    def __post_init__(self):
        if not self.items:
            raise ValueError("purchase event without items")


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    demographics: tuple[float, ...] = ()
    portfolio: Mapping[str, int] = field(default_factory=dict)
    demographics_missing: bool = False

    def __post_init__(self):
        if any(v < 0 for v in self.portfolio.values()):
            raise ValueError(f"user {self.user_id}: negative portfolio count")


@dataclass(frozen=True)
class Catalog:
    """Item catalog. `base_of` maps each additional-coverage item to its base product."""

    items: tuple[str, ...]
    base_of: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.items)
        for cov, base in self.base_of.items():
            if cov not in known or base not in known:
                raise ValueError(f"unknown base-product mapping {cov} -> {base}")
            if base in self.base_of:
                raise ValueError(f"base product {base} is itself a coverage")

    def restrict(self, keep: Iterable[str]) -> "Catalog":
        keep = set(keep)
        items = tuple(i for i in self.items if i in keep)
        base_of = {c: b for c, b in self.base_of.items() if c in keep and b in keep}
        return Catalog(items, base_of)


def natural_key(label: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", label)]


def _ordered(observed: Iterable[str], preferred: Sequence[str] = ()) -> tuple[str, ...]:
    observed = set(observed)
    head = [x for x in preferred if x in observed]
    tail = sorted(observed.difference(head), key=natural_key)
    return tuple(head) + tuple(tail)


class Vocabulary:
    """Index<->label bijections for the three action blocks and the item catalog.

    Binarized actions are laid out as ``[section | object | action_type]``.
    Items are aligned with object labels by name; ``item_object[k]`` is the
    object index of item k, or -1 when the item never appears as an object.
    """

    def __init__(self, sections, objects, action_types, items, frozen: bool = True):
        self.sections = tuple(sections)
        self.objects = tuple(objects)
        self.action_types = tuple(action_types)
        self.items = tuple(items)
        self.frozen = frozen
        for name in ("sections", "objects", "action_types", "items"):
            labels = getattr(self, name)
            if len(set(labels)) != len(labels):
                raise ValueError(f"duplicate labels in {name}")
        self._section_ix = {s: i for i, s in enumerate(self.sections)}
        self._object_ix = {s: i for i, s in enumerate(self.objects)}
        self._type_ix = {s: i for i, s in enumerate(self.action_types)}
        self._item_ix = {s: i for i, s in enumerate(self.items)}
        self.item_object = np.array([self._object_ix.get(i, -1) for i in self.items], dtype=np.int64)

    @classmethod
    def build(cls, actions: Iterable[Action], items: Iterable[str], frozen: bool = True) -> "Vocabulary":
        secs, objs, types = set(), set(), set()
        for a in actions:
            secs.add(a.section)
            objs.add(a.object)
            types.add(a.action_type)
        items = tuple(items)
        return cls(
            _ordered(secs, SECTIONS),
            _ordered(objs, items),
            _ordered(types, ACTION_TYPES),
            items,
            frozen=frozen,
        )

    @property
    def K(self) -> int:
        return len(self.items)

    @property
    def block_sizes(self) -> tuple[int, int, int]:
        return len(self.sections), len(self.objects), len(self.action_types)

    @property
    def dim(self) -> int:
        return sum(self.block_sizes)

    def section_index(self, label: str) -> int:
        return self._lookup(self._section_ix, label, "section")

    def object_index(self, label: str) -> int:
        return self._lookup(self._object_ix, label, "object")

    def type_index(self, label: str) -> int:
        return self._lookup(self._type_ix, label, "action type")

    def item_index(self, label: str) -> int:
        return self._lookup(self._item_ix, label, "item")

    def has_item(self, label: str) -> bool:
        return label in self._item_ix

    @staticmethod
    def _lookup(table, label, kind):
        try:
            return table[label]
        except KeyError:
            raise VocabularyError(f"{kind} label {label!r} not in vocabulary") from None

    def action_codes(self, actions: Sequence[Action]) -> np.ndarray:
        """(n, 3) positions of the three active bits of each action in the binarized layout."""
        n_sec, n_obj, _ = self.block_sizes
        out = np.empty((len(actions), 3), dtype=np.int64)
        for j, a in enumerate(actions):
            out[j, 0] = self.section_index(a.section)
            out[j, 1] = n_sec + self.object_index(a.object)
            out[j, 2] = n_sec + n_obj + self.type_index(a.action_type)
        return out

    def binarize(self, actions: Sequence[Action]) -> np.ndarray:
        codes = self.action_codes(actions)
        out = np.zeros((len(actions), self.dim))
        np.put_along_axis(out, codes, 1.0, axis=1)
        return out

    def items_vector(self, items: Iterable[str]) -> np.ndarray:
        p = np.zeros(self.K)
        for i in items:
            p[self.item_index(i)] = 1.0
        return p

    def to_dict(self) -> dict:
        return {
            "sections": list(self.sections),
            "objects": list(self.objects),
            "action_types": list(self.action_types),
            "items": list(self.items),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(d["sections"], d["objects"], d["action_types"], d["items"], frozen=True)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "Vocabulary(sections={}, objects={}, types={}, K={})".format(*self.block_sizes, self.K)


def binarize_action(a: Action, vocab: Vocabulary) -> np.ndarray:
    """Concatenated one-hot blocks ``[section | object | action_type]`` for one action."""
    return vocab.binarize([a])[0]


@dataclass(frozen=True)
class Dataset:
    sessions: tuple[Session, ...]
    purchases: tuple[PurchaseEvent, ...]
    users: Mapping[str, UserRecord]
    catalog: Catalog
    vocabulary: Vocabulary
    demographic_names: tuple[str, ...] = ()

    def actions(self) -> Iterable[Action]:
        for s in self.sessions:
            yield from s.actions

    def replace(self, **changes) -> "Dataset":
        kw = dict(
            sessions=self.sessions,
            purchases=self.purchases,
            users=self.users,
            catalog=self.catalog,
            vocabulary=self.vocabulary,
            demographic_names=self.demographic_names,
        )
        kw.update(changes)
        return Dataset(**kw)


# --------------------------------------------------------------------- schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SessionColumns(_Strict):
    user_id: str = "user_id"
    session_id: str = "session_id"
    timestamp: str = "timestamp"
    section: str = "action_section"
    object: str = "action_object"
    action_type: str = "action_type"


class PurchaseColumns(_Strict):
    user_id: str = "user_id"
    timestamp: str = "timestamp"
    item_id: str = "item_id"


class UserColumns(_Strict):
    user_id: str = "user_id"
    portfolio_prefix: str = "portfolio_"
    missing_flag: str = "demographics_missing"
    # None: every remaining column is a demographic feature
    demographics: list[str] | None = None


class CatalogColumns(_Strict):
    item_id: str = "item_id"
    base_item: str = "base_item"


class SchemaManifest(_Strict):
    """Column roles for the four input files, so foreign headers map without code changes."""

    sessions_file: str = "sessions.csv"
    purchases_file: str = "purchases.csv"
    users_file: str = "users.csv"
    catalog_file: str = "catalog.csv"
    sessions: SessionColumns = SessionColumns()
    purchases: PurchaseColumns = PurchaseColumns()
    users: UserColumns = UserColumns()
    catalog: CatalogColumns = CatalogColumns()
    # label rewrites applied on read, e.g. {"section": {"Ecommerce": "e-commerce"}}
    labels: dict[str, dict[str, str]] = {}

    @classmethod
    def load(cls, path) -> "SchemaManifest":
        return cls.model_validate_json(Path(path).read_text())


# --------------------------------------------------------------------- ingest


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if re.fullmatch(r"\d+", text):
        return int(text)
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    ts = int(dt.timestamp())
    if ts < 0:
        raise ValueError("timestamp before epoch")
    return ts


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def _read_rows(path, required: Sequence[str]):
    """Yield (line_number, row_dict). Validates header and field counts."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(path, 1, "empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataFormatError(path, 1, f"missing columns {missing}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield line, header, dict(zip(header, row))


def _field(path, line, row, col, label_map=None) -> str:
    value = row[col].strip()
    if not value:
        raise DataFormatError(path, line, f"empty value in column {col!r}")
    if label_map:
        value = label_map.get(value, value)
    return value


def _ts(path, line, row, col) -> int:
    try:
        return parse_timestamp(row[col])
    except ValueError as exc:
        raise DataFormatError(path, line, f"bad timestamp {row[col]!r} in column {col!r}") from exc


def read_sessions(path, manifest: SchemaManifest | None = None) -> list[Session]:
    m = manifest or SchemaManifest()
    c = m.sessions
    per_session: dict[str, list] = {}
    owner: dict[str, str] = {}
    for line, _, row in _read_rows(path, [c.user_id, c.session_id, c.timestamp, c.section, c.object, c.action_type]):
        uid = _field(path, line, row, c.user_id)
        sid = _field(path, line, row, c.session_id)
        ts = _ts(path, line, row, c.timestamp)
        a = Action(
            _field(path, line, row, c.section, m.labels.get("section")),
            _field(path, line, row, c.object, m.labels.get("object")),
            _field(path, line, row, c.action_type, m.labels.get("action_type")),
            ts,
        )
        if owner.setdefault(sid, uid) != uid:
            raise DataFormatError(path, line, f"session {sid} belongs to two users")
        per_session.setdefault(sid, []).append(a)
    sessions = []
    for sid, acts in per_session.items():
        # stable: ties keep file order
        acts.sort(key=lambda a: a.timestamp)
        sessions.append(Session(sid, owner[sid], tuple(acts)))
    sessions.sort(key=lambda s: (s.user_id, s.start_time, s.session_id))
    return sessions


def read_purchases(path, manifest: SchemaManifest | None = None) -> list[PurchaseEvent]:
    m = manifest or SchemaManifest()
    c = m.purchases
    events: dict[tuple[str, int], list[str]] = {}
    for line, _, row in _read_rows(path, [c.user_id, c.timestamp, c.item_id]):
        key = (_field(path, line, row, c.user_id), _ts(path, line, row, c.timestamp))
        item = _field(path, line, row, c.item_id, m.labels.get("item"))
        bucket = events.setdefault(key, [])
        if item not in bucket:
            bucket.append(item)
    out = [PurchaseEvent(u, t, tuple(sorted(items, key=natural_key))) for (u, t), items in events.items()]
    out.sort(key=lambda e: (e.user_id, e.timestamp))
    return out


def read_users(path, manifest: SchemaManifest | None = None) -> tuple[dict[str, UserRecord], tuple[str, ...]]:
    m = manifest or SchemaManifest()
    c = m.users
    users: dict[str, UserRecord] = {}
    demo_cols: list[str] | None = None
    for line, header, row in _read_rows(path, [c.user_id]):
        if demo_cols is None:
            if c.demographics is not None:
                absent = [d for d in c.demographics if d not in header]
                if absent:
                    raise DataFormatError(path, 1, f"missing demographic columns {absent}")
                demo_cols = list(c.demographics)
            else:
                demo_cols = [
                    h for h in header
                    if h not in (c.user_id, c.missing_flag) and not h.startswith(c.portfolio_prefix)
                ]
        uid = _field(path, line, row, c.user_id)
        try:
            demo = tuple(float(row[d]) if row[d].strip() else 0.0 for d in demo_cols)
            portfolio = {
                h[len(c.portfolio_prefix):]: int(float(row[h]))
                for h in header
                if h.startswith(c.portfolio_prefix) and row[h].strip()
            }
            missing = c.missing_flag in row and row[c.missing_flag].strip() in ("1", "true", "True")
            rec = UserRecord(uid, demo, {k: v for k, v in portfolio.items() if v}, missing)
        except ValueError as exc:
            raise DataFormatError(path, line, str(exc)) from exc
        if uid in users:
            raise DataFormatError(path, line, f"duplicate user {uid}")
        users[uid] = rec
    return users, tuple(demo_cols or ())


def read_catalog(path, manifest: SchemaManifest | None = None) -> Catalog:
    m = manifest or SchemaManifest()
    c = m.catalog
    items, base_of = [], {}
    for line, header, row in _read_rows(path, [c.item_id]):
        item = _field(path, line, row, c.item_id)
        items.append(item)
        base = row.get(c.base_item, "").strip()
        if base:
            base_of[item] = base
    try:
        return Catalog(tuple(items), base_of)
    except ValueError as exc:
        raise DataFormatError(path, None, str(exc)) from exc


def ingest(
    session_path,
    purchase_path,
    user_path,
    catalog_path=None,
    manifest: SchemaManifest | None = None,
    vocabulary: Vocabulary | None = None,
) -> Dataset:
    """Parse the CSV files into an immutable `Dataset`.

    Without `vocabulary`, labels are collected open-world and the resulting
    vocabulary is frozen. With a frozen `vocabulary`, unknown labels raise
    `VocabularyError`.
    """
    sessions = read_sessions(session_path, manifest)
    purchases = read_purchases(purchase_path, manifest)
    users, demo_names = read_users(user_path, manifest)

    if catalog_path is not None and Path(catalog_path).exists():
        catalog = read_catalog(catalog_path, manifest)
    else:
        observed = {i for e in purchases for i in e.items}
        observed.update(k for u in users.values() for k in u.portfolio)
        if vocabulary is not None:
            observed.update(vocabulary.items)
        catalog = Catalog(tuple(sorted(observed, key=natural_key)))

    known_items = set(catalog.items)
    for e in purchases:
        unknown = set(e.items) - known_items
        if unknown:
            raise VocabularyError(f"purchase of unknown items {sorted(unknown)}")

    width = len(demo_names)
    for uid in sorted({s.user_id for s in sessions} | {e.user_id for e in purchases}):
        if uid not in users:
            users[uid] = UserRecord(uid, (0.0,) * width, {}, True)
    users = dict(sorted(users.items()))

    if vocabulary is None:
        vocab = Vocabulary.build((a for s in sessions for a in s.actions), catalog.items)
    else:
        vocab = vocabulary
        for s in sessions:
            vocab.action_codes(s.actions)
        for i in known_items:
            vocab.item_index(i)
    return Dataset(tuple(sessions), tuple(purchases), users, catalog, vocab, demo_names)


def load_dataset(directory, manifest: SchemaManifest | None = None, vocabulary: Vocabulary | None = None) -> Dataset:
    m = manifest or SchemaManifest()
    d = Path(directory)
    for name in (m.sessions_file, m.purchases_file, m.users_file):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing input file {d / name}")
    return ingest(
        d / m.sessions_file,
        d / m.purchases_file,
        d / m.users_file,
        d / m.catalog_file,
        manifest=m,
        vocabulary=vocabulary,
    )


def export_dataset(ds: Dataset, directory) -> None:
    """Write `ds` in the canonical CSV layout (the default manifest)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "sessions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "session_id", "timestamp", "action_section", "action_object", "action_type"])
        for s in ds.sessions:
            for a in s.actions:
                w.writerow([s.user_id, s.session_id, format_timestamp(a.timestamp), a.section, a.object, a.action_type])
    with (d / "purchases.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "timestamp", "item_id"])
        for e in ds.purchases:
            for i in e.items:
                w.writerow([e.user_id, format_timestamp(e.timestamp), i])
    with (d / "users.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", *ds.demographic_names, "demographics_missing", *(f"portfolio_{i}" for i in ds.catalog.items)])
        for u in ds.users.values():
            w.writerow([
                u.user_id,
                *(repr(float(x)) for x in u.demographics),
                int(u.demographics_missing),
                *(u.portfolio.get(i, 0) for i in ds.catalog.items),
            ])
    with (d / "catalog.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "base_item"])
        for i in ds.catalog.items:
            w.writerow([i, ds.catalog.base_of.get(i, "")])


def save_vocabulary(vocab: Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_dict(), indent=2))


def load_vocabulary(path) -> Vocabulary:
    return Vocabulary.from_dict(json.loads(Path(path).read_text()))
