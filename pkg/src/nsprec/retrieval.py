"""Item index, top-k retrieval, hit-rate evaluation and the nearline cache."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans

from .config import RetrievalConfig
from .data import Event, HeldOutQuery, SessionRecord, UserSequence, Vocab, build_token_sequence, sessionize
from .model import NSPModel, collate


class RetrievalError(ValueError):
    pass


@dataclass
class ItemIndex:
    """Scoring rows ``e_id + e_side`` for the pooled items, sorted by item id."""

    item_ids: tuple[str, ...]
    rows: np.ndarray
    mode: str = "exact"
    clusters: int = 0
    probes: int = 0
    centroids: np.ndarray | None = None
    members: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.item_ids)


def pool_rows(vocab: Vocab, min_exposures: int = 1) -> np.ndarray:
    """Vocab rows (1-based, ascending id) of items exposed at least ``min_exposures`` times."""
    rows = np.arange(1, vocab.num_items + 1)
    return rows[vocab.exposure_counts[1:] >= min_exposures]


def build_index(model: NSPModel, vocab: Vocab, cfg: RetrievalConfig | None = None, seed: int = 0,
                rows: np.ndarray | None = None) -> ItemIndex:
    cfg = cfg or RetrievalConfig()
    rows = pool_rows(vocab, cfg.min_exposures) if rows is None else np.asarray(rows)
    if len(rows) == 0:
        raise RetrievalError("empty item pool")
    with torch.no_grad():
        emb = model.item_embeddings(torch.as_tensor(rows)).double().numpy().copy()
    ids = tuple(vocab.item_ids[r - 1] for r in rows)
    index = ItemIndex(ids, emb, cfg.mode)
    if cfg.mode == "approximate":
        _build_clusters(index, cfg.clusters, cfg.probes, seed)
    return index


def _build_clusters(index: ItemIndex, clusters: int, probes: int, seed: int) -> None:
    n = index.size
    clusters = max(1, min(clusters, n))
    norms = np.linalg.norm(index.rows, axis=1, keepdims=True)
    unit = index.rows / np.maximum(norms, 1e-12)
    km = KMeans(n_clusters=clusters, n_init=1, random_state=seed).fit(unit)
    index.clusters = clusters
    index.probes = min(probes, clusters)
    index.centroids = km.cluster_centers_
    index.members = [np.flatnonzero(km.labels_ == c) for c in range(clusters)]


@dataclass
class RetrievalResult:
    items: tuple[str, ...]
    scores: np.ndarray


def _rank(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Top ``k`` of ``candidates`` (ascending positions) by score, ties by position."""
    order = np.argsort(-scores[candidates], kind="stable")[:k]
    return candidates[order]


def retrieve_topk(context: np.ndarray | torch.Tensor, index: ItemIndex, k: int) -> RetrievalResult:
    """Top ``k`` items by inner product; pool order is item id order, so stable sort breaks ties by id."""
    if k > index.size:
        raise RetrievalError(f"k={k} exceeds pool size {index.size}")
    if k < 0:
        raise RetrievalError("k must be >= 0")
    q = np.asarray(context.detach() if isinstance(context, torch.Tensor) else context, dtype=np.float64)
    scores = index.rows @ q
    if index.mode == "exact":
        candidates = np.arange(index.size)
    else:
        candidates = _probe(index, q, k)
    top = _rank(scores, candidates, k)
    return RetrievalResult(tuple(index.item_ids[i] for i in top), scores[top])


def _probe(index: ItemIndex, q: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-(index.centroids @ q), kind="stable")
    picked, total = [], 0
    for j, c in enumerate(order):
        if j >= index.probes and total >= k:
            break
        picked.append(index.members[c])
        total += len(index.members[c])
    return np.sort(np.concatenate(picked))


def linear_scan_topk(context, item_ids, rows, k: int) -> list[str]:
    """Reference top-k: score every item in a plain loop, sort by (-score, id)."""
    q = np.asarray(context, dtype=np.float64)
    scored = [(-float(np.dot(r, q)), iid) for iid, r in zip(item_ids, rows)]
    scored.sort()
    return [iid for _, iid in scored[:k]]


def hit_rate_at_k(results: dict[str, list], truth: dict[str, set], k: int) -> float:
    """Mean over users of ``|top-k ∩ G| / |G|``; users with empty ``G`` are skipped."""
    values = [len(set(results[u][:k]) & g) / len(g) for u, g in truth.items() if g]
    if not values:
        raise RetrievalError("no evaluable user")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    overall: dict[int, float]
    per_scenario: dict[str, dict[int, float]]
    users: dict[str, int]
    per_user: dict[str, dict[int, np.ndarray]]
    skipped_ks: tuple[int, ...] = ()
    excluded_queries: int = 0
    pool_size: int = 0
    tag: str = "gt=click;unit=session;avg=user"

    def hr(self, k: int, scenario: str = "all") -> float:
        return self.overall[k] if scenario == "all" else self.per_scenario[scenario][k]

    def standard_error(self, k: int, scenario: str = "all") -> float:
        v = self.per_user[scenario][k]
        return float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for sc in ["all", *self.per_scenario]:
            for k in self.ks:
                out.append({"scenario": sc, "K": k, "hit_rate": self.hr(k, sc), "users": self.users[sc]})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["scenario", "K", "hit_rate", "users"], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({**r, "hit_rate": f"{r['hit_rate']:.6f}"})
        return buf.getvalue()


def ground_truth(session: SessionRecord, rule: str = "click") -> set:
    return set(session.clicked if rule == "click" else session.exposed)


@torch.no_grad()
def user_vectors(model: NSPModel, histories: list, scenarios: list[str], times: list[int],
                 chunk: int = 64) -> np.ndarray:
    """Trailing-context outputs for each (history, next scenario, next time)."""
    out = []
    for start in range(0, len(histories), chunk):
        seqs = [build_token_sequence(h, sc, t, model.vocab, model.cfg.max_seq_len)
                for h, sc, t in zip(histories[start:start + chunk], scenarios[start:start + chunk],
                                    times[start:start + chunk])]
        out.append(model(collate(seqs)).last_context().double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.dim))


def evaluate(model: NSPModel, queries: list[HeldOutQuery], cfg: RetrievalConfig | None = None,
             index: ItemIndex | None = None, seed: int = 0) -> EvalReport:
    """HR@K per held-out session, averaged per user, then across users."""
    cfg = cfg or RetrievalConfig()
    index = index or build_index(model, model.vocab, cfg, seed)
    usable = [q for q in queries if ground_truth(q.target, cfg.ground_truth)]
    if not usable:
        raise RetrievalError("no evaluable user")
    ks = tuple(k for k in cfg.ks if k <= index.size)
    skipped = tuple(k for k in cfg.ks if k > index.size)
    vecs = user_vectors(model, [q.history for q in usable], [q.target.scenario for q in usable],
                        [q.target.start_time for q in usable])
    kmax = max(ks)
    # scenario -> user -> K -> list of per-session hit fractions
    hits = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for q, v in zip(usable, vecs):
        top = retrieve_topk(v, index, kmax).items
        g = ground_truth(q.target, cfg.ground_truth)
        for k in ks:
            frac = len(g.intersection(top[:k])) / len(g)
            hits["all"][q.user_id][k].append(frac)
            hits[q.target.scenario][q.user_id][k].append(frac)
    per_user = {sc: {k: np.array([np.mean(u[k]) for u in users.values()]) for k in ks}
                for sc, users in hits.items()}
    overall = {k: float(per_user["all"][k].mean()) for k in ks}
    per_scenario = {sc: {k: float(per_user[sc][k].mean()) for k in ks}
                    for sc in model.vocab.scenarios if sc in per_user}
    users = {sc: len(u) for sc, u in hits.items()}
    return EvalReport(ks, overall, per_scenario, users, per_user, skipped, len(queries) - len(usable),
                      index.size, f"gt={cfg.ground_truth};unit=session;avg=user")


# ---------------------------------------------------------------------------
# nearline


def merge_sessions(history: tuple[SessionRecord, ...], new: list[SessionRecord]) -> tuple[SessionRecord, ...]:
    """Fold new session records into a history, merging records that share a session id."""
    by_id = {s.session_id: s for s in history}
    for s in new:
        old = by_id.get(s.session_id)
        if old is not None:
            exposed = tuple(dict.fromkeys(old.exposed + s.exposed))
            s = SessionRecord(s.session_id, old.scenario, min(old.start_time, s.start_time), exposed,
                              old.clicked | s.clicked, old.paid | s.paid)
        by_id[s.session_id] = s
    return tuple(sorted(by_id.values(), key=lambda s: (s.start_time, s.session_id)))


class NearlineCache:
    """``user_id -> RetrievalResult`` precomputed from event batches.

    ``fetch`` is a dictionary read; only ``refresh`` runs the model.
    """

    def __init__(self, model: NSPModel, index: ItemIndex, histories: dict[str, UserSequence] | None = None,
                 k: int = 100, serve_scenario: str = "GUL"):
        self.model = model
        self.index = index
        self.k = min(k, index.size)
        self.serve_scenario = serve_scenario
        self.histories = {u: tuple(s.sessions) for u, s in (histories or {}).items()}
        self.cache: dict[str, RetrievalResult] = {}
        self.forward_calls = 0
        self.misses = 0
        self.hits = 0

    def refresh(self, events: list[Event]) -> set[str]:
        touched = defaultdict(list)
        for ev in events:
            touched[ev.user_id].append(ev)
        users = sorted(touched)
        if not users:
            return set()
        histories, times = [], []
        for u in users:
            new = [s for seq in sessionize(touched[u]) for s in seq.sessions]
            self.histories[u] = merge_sessions(self.histories.get(u, ()), new)
            histories.append(self.histories[u])
            times.append(max(ev.timestamp for ev in touched[u]))
        self.forward_calls += 1
        vecs = user_vectors(self.model, histories, [self.serve_scenario] * len(users), times)
        for u, v in zip(users, vecs):
            self.cache[u] = retrieve_topk(v, self.index, self.k)
        return set(users)

    def fetch(self, user_id: str) -> RetrievalResult | None:
        hit = self.cache.get(user_id)
        if hit is None:
            self.misses += 1
        else:
            self.hits += 1
        return hit

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for u in sorted(self.cache):
                r = self.cache[u]
                fh.write(json.dumps({"user_id": u, "items": list(r.items),
                                     "scores": [float(s) for s in r.scores]}) + "\n")
