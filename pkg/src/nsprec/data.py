"""Events, sessions, user sequences, synthetic logs and token sequences."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import DataConfig

log = logging.getLogger(__name__)

ACTIONS = ("exposure", "click", "pay")
SIDE_FIELDS = ("cat1", "cat2", "seller", "price_bucket")
SECONDS_PER_DAY = 86400

# token kinds
CONTEXT, ITEM = 0, 1
# action table rows; pays enter the sequence as clicks
ACT_ABSENT, ACT_EXPOSURE, ACT_CLICK = 0, 1, 2
NUM_TIME_BUCKETS = 24


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    user_id: str
    timestamp: int
    scenario: str
    session_id: str
    item_id: str
    action: str
    cat1: Optional[int] = None
    cat2: Optional[int] = None
    seller: Optional[int] = None
    price_bucket: Optional[int] = None

    def to_json(self) -> str:
        d = {
            "user_id": self.user_id,
            "timestamp": self.timestamp,
            "scenario": self.scenario,
            "session_id": self.session_id,
            "item_id": self.item_id,
            "action": self.action,
        }
        for name in SIDE_FIELDS:
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return json.dumps(d, separators=(",", ":"))


@dataclass(frozen=True)
class ItemInfo:
    cat1: Optional[int] = None
    cat2: Optional[int] = None
    seller: Optional[int] = None
    price_bucket: Optional[int] = None
    exposure_count: int = 0

    def side(self) -> tuple:
        return (self.cat1, self.cat2, self.seller, self.price_bucket)


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    scenario: str
    start_time: int
    exposed: tuple[str, ...]
    clicked: frozenset = frozenset()
    paid: frozenset = frozenset()

    def __post_init__(self):
        if not self.exposed:
            raise DataError(f"session {self.session_id} has no exposed items")
        if not self.paid <= self.clicked or not self.clicked <= set(self.exposed):
            raise DataError(f"session {self.session_id} breaks paid <= clicked <= exposed")

    @property
    def day(self) -> int:
        return self.start_time // SECONDS_PER_DAY


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    sessions: tuple[SessionRecord, ...]

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)


@dataclass
class Dataset:
    users: dict[str, UserSequence]
    catalog: dict[str, ItemInfo]
    day_index: dict[str, frozenset] = field(default_factory=dict)
    scenarios: tuple[str, ...] = ("GUL", "IS", "SE")

    def __post_init__(self):
        if not self.day_index:
            self.day_index = {
                uid: frozenset(s.day for s in seq.sessions) for uid, seq in self.users.items()
            }

    @property
    def num_sessions(self) -> int:
        return sum(seq.num_sessions for seq in self.users.values())

    def days(self) -> tuple[int, int]:
        all_days = [d for days in self.day_index.values() for d in days]
        return min(all_days), max(all_days)

    def stats(self) -> dict:
        sessions = [s for seq in self.users.values() for s in seq.sessions]
        exposures = sum(len(s.exposed) for s in sessions)
        clicks = sum(len(s.clicked) for s in sessions)
        pays = sum(len(s.paid) for s in sessions)
        first, last = self.days() if sessions else (0, 0)
        return {
            "users": len(self.users),
            "items": len(self.catalog),
            "sessions": len(sessions),
            "exposures": exposures,
            "clicks": clicks,
            "pays": pays,
            "click_rate": clicks / exposures if exposures else 0.0,
            "pay_per_click": pays / clicks if clicks else 0.0,
            "first_day": first,
            "last_day": last,
            "scenario_sessions": dict(Counter(s.scenario for s in sessions)),
        }

    def summary(self) -> str:
        st = self.stats()
        lines = [f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}" for k, v in st.items()]
        return "\n".join(lines)


@dataclass
class IngestReport:
    lines: int = 0
    malformed: int = 0
    unknown_scenario: int = 0
    order_violations: int = 0
    span_violations: int = 0
    duplicates: int = 0

    @property
    def dropped(self) -> int:
        return (self.malformed + self.unknown_scenario + self.order_violations
                + self.span_violations + self.duplicates)


# ---------------------------------------------------------------------------
# ingestion


def parse_event(line: str) -> Event:
    d = json.loads(line)
    if not isinstance(d, dict):
        raise ValueError("event is not an object")
    for key in ("user_id", "scenario", "item_id", "action"):
        if not isinstance(d.get(key), str) or not d[key]:
            raise ValueError(f"missing {key}")
    ts = d.get("timestamp")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise ValueError("timestamp must be an integer")
    if d["action"] not in ACTIONS:
        raise ValueError(f"bad action {d['action']!r}")
    session_id = d.get("session_id") or ""
    if not isinstance(session_id, str):
        raise ValueError("session_id must be a string")
    side = {}
    for name in SIDE_FIELDS:
        value = d.get(name)
        if value is not None and (not isinstance(value, int) or isinstance(value, bool) or value < 0):
            raise ValueError(f"{name} must be a non-negative integer")
        side[name] = value
    return Event(d["user_id"], ts, d["scenario"], session_id, d["item_id"], d["action"], **side)


def _assign_gap_sessions(events: list[Event], gap: int) -> list[Event]:
    """Give session ids to events that lack one by splitting on time gaps."""
    by_user = defaultdict(list)
    out = []
    for ev in events:
        if ev.session_id:
            out.append(ev)
        else:
            by_user[ev.user_id].append(ev)
    for uid, evs in by_user.items():
        evs.sort(key=lambda e: e.timestamp)
        n, last = 0, None
        for ev in evs:
            if last is not None and ev.timestamp - last > gap:
                n += 1
            last = ev.timestamp
            out.append(Event(**{**ev.__dict__, "session_id": f"{uid}#gap{n}"}))
    return out


def _enforce_consistency(events: list[Event], gap: int, report: IngestReport) -> list[Event]:
    groups = defaultdict(list)
    for ev in events:
        groups[(ev.user_id, ev.session_id)].append(ev)
    kept = []
    for evs in groups.values():
        evs.sort(key=lambda e: (e.timestamp, ACTIONS.index(e.action)))
        start = evs[0].timestamp
        seen = defaultdict(set)
        for ev in evs:
            if ev.timestamp - start > gap:
                report.span_violations += 1
                continue
            acts = seen[ev.item_id]
            if ev.action in acts:
                report.duplicates += 1
                continue
            needed = {"exposure": None, "click": "exposure", "pay": "click"}[ev.action]
            if needed is not None and needed not in acts:
                report.order_violations += 1
                continue
            acts.add(ev.action)
            kept.append(ev)
    return kept


def sessionize(events: Iterable[Event], config: DataConfig | None = None) -> list[UserSequence]:
    """Group events into chronological per-user session lists.

    Events are assumed action-consistent (see ``ingest_events``). Users keep only
    their most recent ``config.max_sessions`` sessions.
    """
    config = config or DataConfig()
    events = list(events)
    if not events:
        return []
    if any(not ev.session_id for ev in events):
        events = _assign_gap_sessions(events, config.session_gap)
    grouped = defaultdict(list)
    for ev in events:
        grouped[(ev.user_id, ev.session_id)].append(ev)
    per_user = defaultdict(list)
    for (uid, sid), evs in grouped.items():
        evs.sort(key=lambda e: (e.timestamp, ACTIONS.index(e.action)))
        exposed, clicked, paid = [], set(), set()
        for ev in evs:
            if ev.action == "exposure" and ev.item_id not in exposed:
                exposed.append(ev.item_id)
            elif ev.action == "click":
                clicked.add(ev.item_id)
            elif ev.action == "pay":
                paid.add(ev.item_id)
        if not exposed:
            continue
        clicked &= set(exposed)
        paid &= clicked
        per_user[uid].append(SessionRecord(
            session_id=sid,
            scenario=evs[0].scenario,
            start_time=evs[0].timestamp,
            exposed=tuple(exposed),
            clicked=frozenset(clicked),
            paid=frozenset(paid),
        ))
    out = []
    for uid in sorted(per_user):
        sessions = sorted(per_user[uid], key=lambda s: (s.start_time, s.session_id))
        sessions = sessions[-config.max_sessions:]
        out.append(UserSequence(uid, tuple(sessions)))
    return out


def build_dataset(events: list[Event], config: DataConfig | None = None,
                  items: dict[str, ItemInfo] | None = None) -> Dataset:
    config = config or DataConfig()
    sequences = sessionize(events, config)
    counts = Counter(ev.item_id for ev in events if ev.action == "exposure")
    side = {}
    for ev in events:
        if ev.item_id not in side and any(getattr(ev, n) is not None for n in SIDE_FIELDS):
            side[ev.item_id] = (ev.cat1, ev.cat2, ev.seller, ev.price_bucket)
    catalog = {}
    for iid in set(counts) | set(items or {}):
        if items and iid in items:
            base = items[iid].side()
        else:
            base = side.get(iid, (None, None, None, None))
        catalog[iid] = ItemInfo(*base, exposure_count=counts.get(iid, 0))
    users = {seq.user_id: seq for seq in sequences}
    for seq in sequences:
        for s in seq.sessions:
            for iid in s.exposed:
                if iid not in catalog:
                    raise DataError(f"item {iid} missing from catalog")
    return Dataset(users=users, catalog=dict(sorted(catalog.items())), scenarios=tuple(config.scenarios))


def read_items(path: str | Path) -> dict[str, ItemInfo]:
    items = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            items[d["item_id"]] = ItemInfo(*(d.get(n) for n in SIDE_FIELDS))
    return items


def write_items(items: dict[str, ItemInfo], path: str | Path) -> None:
    with open(path, "w") as fh:
        for iid, info in items.items():
            d = {"item_id": iid}
            for name, value in zip(SIDE_FIELDS, info.side()):
                if value is not None:
                    d[name] = value
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")


def write_events(events: Iterable[Event], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def ingest_events(path: str | Path, config: DataConfig | None = None,
                  items_path: str | Path | None = None) -> tuple[Dataset, IngestReport]:
    """Read a JSON Lines event log into a sessionized Dataset.

    Malformed lines, unknown or disallowed scenarios, duplicate actions, events
    past the session-gap bound and pays without a click (clicks without an
    exposure) are skipped and counted in the returned report.
    """
    config = config or DataConfig()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cannot read event log {path}")
    allowed = set(config.scenario_allow or config.scenarios)
    report = IngestReport()
    events = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            report.lines += 1
            try:
                ev = parse_event(line)
            except (ValueError, TypeError):
                report.malformed += 1
                continue
            if ev.scenario not in allowed:
                report.unknown_scenario += 1
                continue
            events.append(ev)
    if any(not ev.session_id for ev in events):
        events = _assign_gap_sessions(events, config.session_gap)
    events = _enforce_consistency(events, config.session_gap, report)
    items = read_items(items_path) if items_path else None
    if report.dropped:
        log.warning("ingest %s: dropped %d of %d lines", path, report.dropped, report.lines)
    return build_dataset(events, config, items), report


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticWorld:
    """Hidden state behind a generated log, kept for oracle checks."""

    item_latent: np.ndarray
    user_latent: np.ndarray
    popularity: np.ndarray


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_events(config: DataConfig, seed: int) -> tuple[list[Event], dict[str, ItemInfo], SyntheticWorld]:
    """Latent-factor session log.

    Every session exposes the top-n items by noise-perturbed user-item affinity;
    clicks follow a logistic response in the standardized affinity and pays are
    subsampled from clicks at ``config.pay_rate``.
    """
    for name in ("num_users", "num_items", "num_days", "latent_dim", "num_cat1",
                 "cat2_per_cat1", "num_sellers", "num_price_buckets", "min_items"):
        if getattr(config, name) <= 0:
            raise DataError(f"data.{name} must be positive")
    if config.max_items < config.min_items or config.max_items > config.num_items:
        raise DataError("need min_items <= max_items <= num_items")
    rng = np.random.default_rng(seed)
    n_items, n_users, dim = config.num_items, config.num_users, config.latent_dim
    n_cat2 = config.num_cat1 * config.cat2_per_cat1

    cat1_center = rng.normal(size=(config.num_cat1, dim))
    cat2_offset = 0.6 * rng.normal(size=(n_cat2, dim))
    cat1 = rng.integers(config.num_cat1, size=n_items)
    cat2 = cat1 * config.cat2_per_cat1 + rng.integers(config.cat2_per_cat1, size=n_items)
    sellers_per_cat = max(1, config.num_sellers // config.num_cat1)
    seller = np.minimum(cat1 * sellers_per_cat + rng.integers(sellers_per_cat, size=n_items),
                        config.num_sellers - 1)
    price = rng.integers(config.num_price_buckets, size=n_items)
    item_latent = cat1_center[cat1] + cat2_offset[cat2] + 0.4 * rng.normal(size=(n_items, dim))
    popularity = config.popularity_scale * rng.normal(size=n_items)

    interests = rng.integers(config.num_cat1, size=(n_users, config.user_interests))
    user_latent = cat1_center[interests].mean(axis=1) + 0.3 * rng.normal(size=(n_users, dim))

    weights = np.asarray(config.scenario_mix, dtype=float)
    weights = weights / weights.sum()
    item_ids = [f"i{i:05d}" for i in range(n_items)]
    items = {
        iid: ItemInfo(int(cat1[i]), int(cat2[i]), int(seller[i]), int(price[i]))
        for i, iid in enumerate(item_ids)
    }

    events: list[Event] = []
    slots = 18
    for u in range(n_users):
        uid = f"u{u:05d}"
        latent = user_latent[u].copy()
        counts = rng.poisson(config.sessions_per_day, size=config.num_days)
        counts = np.minimum(counts, slots)
        if counts.sum() == 0:
            counts[rng.integers(config.num_days)] = 1
        n_session = 0
        for day in range(config.num_days):
            latent += config.drift * rng.normal(size=dim)
            if counts[day] == 0:
                continue
            affinity = item_latent @ latent / np.sqrt(dim)
            z = (affinity - affinity.mean()) / (affinity.std() + 1e-12)
            hours = np.sort(rng.choice(slots, size=counts[day], replace=False)) + 6
            for hour in hours:
                start = int(day * SECONDS_PER_DAY + hour * 3600 + rng.integers(0, 1800))
                scenario = config.scenarios[rng.choice(len(weights), p=weights)]
                n = int(rng.integers(config.min_items, config.max_items + 1))
                noisy = z + popularity + config.affinity_noise * rng.normal(size=n_items)
                shown = np.argpartition(-noisy, n)[:n]
                shown = shown[np.argsort(-noisy[shown], kind="stable")]
                # click response relative to the exposed set, so the rate stays off the ceiling
                zs = z[shown]
                p_click = _sigmoid(config.click_scale * (zs - zs.mean()) + config.click_bias)
                clicks = rng.random(n) < p_click
                pays = clicks & (rng.random(n) < config.pay_rate)
                sid = f"{uid}-s{n_session:05d}"
                n_session += 1
                for m, i in enumerate(shown):
                    info = items[item_ids[i]]
                    kw = dict(user_id=uid, scenario=scenario, session_id=sid,
                              item_id=item_ids[i], cat1=info.cat1, cat2=info.cat2,
                              seller=info.seller, price_bucket=info.price_bucket)
                    events.append(Event(timestamp=start + m, action="exposure", **kw))
                    if clicks[m]:
                        events.append(Event(timestamp=start + 300 + m, action="click", **kw))
                    if pays[m]:
                        events.append(Event(timestamp=start + 600 + m, action="pay", **kw))
    events.sort(key=lambda e: (e.timestamp, e.user_id, ACTIONS.index(e.action), e.item_id))
    return events, items, SyntheticWorld(item_latent, user_latent, popularity)


def generate_synthetic(config: DataConfig, seed: int) -> Dataset:
    """Deterministic synthetic Dataset for ``(config, seed)``."""
    events, items, _ = generate_events(config, seed)
    return build_dataset(events, config, items)


# ---------------------------------------------------------------------------
# buckets


def assign_bucket(user_id: str, num_buckets: int) -> int:
    """Stable bucket in ``[0, num_buckets)`` from a hash of the user id."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    digest = hashlib.blake2b(user_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % num_buckets


@dataclass
class BucketAssignment:
    num_buckets: int
    assignment: dict[str, int]

    @classmethod
    def for_users(cls, user_ids: Iterable[str], num_buckets: int = 10) -> "BucketAssignment":
        return cls(num_buckets, {u: assign_bucket(u, num_buckets) for u in user_ids})


# ---------------------------------------------------------------------------
# token sequences


@dataclass(frozen=True, eq=False)
class Vocab:
    """Index maps shared by the model, the losses and the item index.

    Row 0 of every table is the absent slot; real values start at 1.
    """

    item_ids: tuple[str, ...]
    # (num_items + 1, 4): cat1, cat2, seller, price rows per item
    item_side: np.ndarray
    side_sizes: tuple[int, int, int, int]
    scenarios: tuple[str, ...]
    exposure_counts: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Vocab":
        ids = tuple(sorted(ds.catalog))
        side = np.zeros((len(ids) + 1, 4), dtype=np.int64)
        counts = np.zeros(len(ids) + 1, dtype=np.int64)
        for row, iid in enumerate(ids, 1):
            info = ds.catalog[iid]
            side[row] = [0 if v is None else v + 1 for v in info.side()]
            counts[row] = info.exposure_count
        sizes = tuple(int(side[:, j].max()) + 1 for j in range(4))
        return cls(ids, side, sizes, tuple(ds.scenarios), counts)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def item_index(self, item_id: str) -> int:
        idx = self._index().get(item_id)
        if idx is None:
            raise KeyError(f"unknown item {item_id}")
        return idx

    def _index(self) -> dict:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {iid: i for i, iid in enumerate(self.item_ids, 1)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def scenario_index(self, name: str) -> int:
        try:
            return self.scenarios.index(name) + 1
        except ValueError:
            raise DataError(f"unknown scenario {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "item_ids": list(self.item_ids),
            "item_side": self.item_side.tolist(),
            "side_sizes": list(self.side_sizes),
            "scenarios": list(self.scenarios),
            "exposure_counts": self.exposure_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["item_ids"]), np.asarray(d["item_side"], dtype=np.int64),
                   tuple(d["side_sizes"]), tuple(d["scenarios"]),
                   np.asarray(d["exposure_counts"], dtype=np.int64))


def time_bucket(timestamp: int) -> int:
    return (timestamp % SECONDS_PER_DAY) // 3600 + 1


FEATURES = ("kind", "session", "item", "action", "cat1", "cat2", "seller", "price", "hour", "scenario")


@dataclass
class TokenSequence:
    """Model-ready token stream; every field is an int array of length L.

    ``first_session`` is the offset into the source session list of token
    session 1, so token session ``k`` is ``sessions[first_session + k - 1]``.
    """

    kind: np.ndarray
    session: np.ndarray
    item: np.ndarray
    action: np.ndarray
    cat1: np.ndarray
    cat2: np.ndarray
    seller: np.ndarray
    price: np.ndarray
    hour: np.ndarray
    scenario: np.ndarray
    first_session: int = 0

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def context_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kind == CONTEXT)

    def permuted(self, order: np.ndarray) -> "TokenSequence":
        return TokenSequence(*(getattr(self, f)[order] for f in FEATURES), first_session=self.first_session)


def build_token_sequence(sessions: UserSequence | tuple | list, next_scenario: str, next_time: int,
                         vocab: Vocab, max_seq_len: int = 256) -> TokenSequence:
    """Lay out ``[c1, items of s1, c2, ..., cK, items of sK, c(K+1)]``.

    Oldest sessions are dropped whole until the sequence fits ``max_seq_len``;
    session indices are renumbered from 1.
    """
    if isinstance(sessions, UserSequence):
        sessions = sessions.sessions
    sessions = list(sessions)
    next_sc = vocab.scenario_index(next_scenario)
    sizes = [1 + len(s.exposed) for s in sessions]
    if sessions and sizes[-1] + 1 > max_seq_len:
        raise DataError(f"sequence too long: last session needs {sizes[-1] + 1} tokens, "
                        f"max_seq_len={max_seq_len}")
    total = sum(sizes) + 1
    first = 0
    while total > max_seq_len:
        total -= sizes[first]
        first += 1
    rows = []
    for k, s in enumerate(sessions[first:], 1):
        sc = vocab.scenario_index(s.scenario)
        hour = time_bucket(s.start_time)
        rows.append((CONTEXT, k, 0, ACT_ABSENT, 0, 0, 0, 0, hour, sc))
        for iid in s.exposed:
            idx = vocab.item_index(iid)
            act = ACT_CLICK if iid in s.clicked else ACT_EXPOSURE
            c1, c2, sel, pr = vocab.item_side[idx]
            rows.append((ITEM, k, idx, act, c1, c2, sel, pr, hour, sc))
    rows.append((CONTEXT, len(sessions) - first + 1, 0, ACT_ABSENT, 0, 0, 0, 0, time_bucket(next_time), next_sc))
    arr = np.asarray(rows, dtype=np.int64)
    return TokenSequence(*(arr[:, j].copy() for j in range(len(FEATURES))), first_session=first)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class HeldOutQuery:
    user_id: str
    history: tuple[SessionRecord, ...]
    target: SessionRecord


def split_holdout(ds: Dataset, holdout_days: int = 1) -> tuple[Dataset, list[HeldOutQuery]]:
    """Train on days before the final ``holdout_days``; query every held-out session.

    A held-out session's history includes earlier held-out sessions of the same user.
    """
    _, last = ds.days()
    cutoff = last - holdout_days + 1
    train_users, queries = {}, []
    for uid, seq in ds.users.items():
        past = tuple(s for s in seq.sessions if s.day < cutoff)
        if past:
            train_users[uid] = UserSequence(uid, past)
        for i, s in enumerate(seq.sessions):
            if s.day >= cutoff:
                queries.append(HeldOutQuery(uid, seq.sessions[:i], s))
    # exposure counts (pool membership, negative weights) must not see held-out days
    counts = Counter(i for seq in train_users.values() for s in seq.sessions for i in s.exposed)
    catalog = {iid: replace(info, exposure_count=counts.get(iid, 0)) for iid, info in ds.catalog.items()}
    train = Dataset(users=train_users, catalog=catalog, scenarios=ds.scenarios)
    return train, queries
