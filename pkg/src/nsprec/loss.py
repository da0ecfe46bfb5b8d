"""Negative sampling and the session-level training objective.

Each target session contributes a sampled-softmax term over its exposed items
against shared negatives, plus click-vs-exposed and pay-vs-clicked cascade
terms. Terms are averaged per scenario and the scenario means are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import LossConfig, ModelConfig
from .data import SessionRecord, Vocab, build_token_sequence
from .model import NSPModel, TokenBatch, collate

# stands in for -inf in masked log-sum-exp so gradients stay finite
NEG_FILL = -1e30


class LossError(ValueError):
    pass


# ---------------------------------------------------------------------------
# negative sampling


def sampling_weights(exposure_counts: np.ndarray, beta: float) -> np.ndarray:
    """Unnormalized draw weights ``count ** beta``; row 0 (absent slot) never drawn."""
    counts = np.asarray(exposure_counts, dtype=np.float64)
    w = np.ones_like(counts) if beta == 0 else counts ** beta
    w[0] = 0.0
    return w


def sample_negatives_batch(weights: np.ndarray, count: int, excludes: list, rng: np.random.Generator) -> np.ndarray:
    """Weighted draws without replacement, one row per exclusion set.

    Uses Gumbel top-k on ``log w``, which draws ``count`` distinct items with
    the same law as sequential weighted sampling without replacement.
    """
    n = len(weights)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    keys = logw[None, :] + rng.gumbel(size=(len(excludes), n))
    for row, ex in enumerate(excludes):
        ex = np.fromiter(ex, dtype=np.int64, count=len(ex))
        keys[row, ex] = -np.inf
        available = np.count_nonzero(np.isfinite(keys[row]))
        if count > available:
            raise LossError(f"cannot draw {count} negatives from {available} available items")
    top = np.argpartition(-keys, count - 1, axis=1)[:, :count]
    # order inside the draw is irrelevant to the loss; sort for stable output
    return np.sort(top, axis=1)


def sample_negatives(weights: np.ndarray, count: int, exclude, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise LossError("count must be >= 1")
    return sample_negatives_batch(weights, count, [set(exclude)], rng)[0]


# ---------------------------------------------------------------------------
# per-session terms


def sample_logits(context: torch.Tensor, item_emb: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Inner product of the context output with each item vector, over temperature."""
    return (item_emb @ context[..., None])[..., 0] / temperature


def _masked_lse(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(torch.where(mask, x, torch.full_like(x, NEG_FILL)), dim=-1)


def _contrast(pos: torch.Tensor, target: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    """Mean over ``target`` entries of -log(p_i / (p_i + sum of others)).

    ``others`` is a log-sum-exp per row; rows with no target give 0.
    """
    terms = torch.logaddexp(pos, others[:, None]) - pos
    terms = torch.where(target, terms, torch.zeros_like(terms))
    n = target.sum(-1)
    return terms.sum(-1) / n.clamp(min=1).to(terms.dtype)


def nce_terms(pos_logits, pos_mask, neg_logits) -> torch.Tensor:
    """Per-row sampled-softmax loss, (T,)."""
    if bool((pos_mask.sum(-1) == 0).any()):
        raise LossError("session with no positive items")
    return _contrast(pos_logits, pos_mask, torch.logsumexp(neg_logits, dim=-1))


def cascade_terms(pos_logits, pos_mask, click_mask, pay_mask) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-row click and pay terms, (T,) each; empty sets give exactly 0."""
    unclicked = pos_mask & ~click_mask
    unpaid = click_mask & ~pay_mask
    click = _contrast(pos_logits, click_mask, _masked_lse(pos_logits, unclicked))
    pay = _contrast(pos_logits, pay_mask, _masked_lse(pos_logits, unpaid))
    # an empty contrast set makes the ratio 1; pin those rows to an exact zero
    click = torch.where(unclicked.any(-1), click, torch.zeros_like(click))
    pay = torch.where(unpaid.any(-1), pay, torch.zeros_like(pay))
    return click, pay


@dataclass
class SessionLossInput:
    context: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    clicked: torch.Tensor
    paid: torch.Tensor
    scenario: str = ""

    def logits(self, temperature: float = 1.0):
        return (sample_logits(self.context, self.positives, temperature),
                sample_logits(self.context, self.negatives, temperature))


def nce_loss(inp: SessionLossInput, temperature: float = 1.0) -> torch.Tensor:
    if inp.positives.shape[0] == 0:
        raise LossError("session with no positive items")
    pos, neg = inp.logits(temperature)
    mask = torch.ones_like(pos, dtype=torch.bool)
    return nce_terms(pos[None], mask[None], neg[None])[0]


def cascade_losses(inp: SessionLossInput, temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    pos, _ = inp.logits(temperature)
    mask = torch.ones_like(pos, dtype=torch.bool)
    click, pay = cascade_terms(pos[None], mask[None], inp.clicked[None], inp.paid[None])
    return click[0], pay[0]


def msp_targets(num_sessions: int, depth: int) -> list[tuple[int, int, int]]:
    """``(context session, target session, depth)`` triples, 1-based sessions."""
    out = [(k, k, 0) for k in range(1, num_sessions + 1)]
    for d in range(1, depth + 1):
        out += [(k, k + d, d) for k in range(1, num_sessions - d + 1)]
    return out


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class TrainExample:
    """One user's history up to the last target session.

    ``targets`` holds indices into ``sessions`` that receive a loss; other
    sessions are input context only.
    """

    user_id: str
    sessions: tuple[SessionRecord, ...]
    targets: frozenset

    @classmethod
    def full(cls, user_id: str, sessions) -> "TrainExample":
        sessions = tuple(sessions)
        return cls(user_id, sessions, frozenset(range(len(sessions))))


@dataclass
class LossBatch:
    tokens: TokenBatch
    ctx_row: torch.Tensor
    ctx_pos: torch.Tensor
    depth: torch.Tensor
    scenario: torch.Tensor
    pos: torch.Tensor
    pos_mask: torch.Tensor
    click_mask: torch.Tensor
    pay_mask: torch.Tensor
    neg: torch.Tensor
    scenarios: tuple[str, ...]
    # (example index, session index) per target row, for audits
    keys: list = field(default_factory=list)

    @property
    def num_targets(self) -> int:
        return int(self.ctx_row.shape[0])


def make_loss_batch(examples: list[TrainExample], vocab: Vocab, model_cfg: ModelConfig,
                    loss_cfg: LossConfig, rng: np.random.Generator) -> LossBatch:
    """Token sequences, target rows and per-session negatives for ``examples``.

    The final session of each example is predicted from the trailing context
    token, so its items never enter the input.
    """
    if not examples:
        raise LossError("empty batch")
    depth = model_cfg.msp_heads
    seqs, rows, session_rows = [], [], {}
    for b, ex in enumerate(examples):
        last = ex.sessions[-1]
        seq = build_token_sequence(ex.sessions[:-1], last.scenario, last.start_time, vocab, model_cfg.max_seq_len)
        seqs.append(seq)
        positions = seq.context_positions
        kept = len(positions)
        for k, t, d in msp_targets(kept, depth):
            idx = seq.first_session + t - 1
            if idx not in ex.targets:
                continue
            session_rows.setdefault((b, idx), len(session_rows))
            rows.append((b, int(positions[k - 1]), d, idx))
    if not rows:
        raise LossError("batch has no target sessions")

    keys = list(session_rows)
    sessions = [examples[b].sessions[i] for b, i in keys]
    exclude = [{vocab.item_index(iid) for iid in s.exposed} for s in sessions]
    weights = sampling_weights(vocab.exposure_counts, loss_cfg.neg_beta)
    negs = sample_negatives_batch(weights, loss_cfg.num_negatives, exclude, rng)

    width = max(len(s.exposed) for s in sessions)
    pos = np.zeros((len(sessions), width), dtype=np.int64)
    pmask = np.zeros((len(sessions), width), dtype=bool)
    cmask = np.zeros_like(pmask)
    ymask = np.zeros_like(pmask)
    for r, s in enumerate(sessions):
        for m, iid in enumerate(s.exposed):
            pos[r, m] = vocab.item_index(iid)
            pmask[r, m] = True
            cmask[r, m] = iid in s.clicked
            ymask[r, m] = iid in s.paid
    srow = np.array([session_rows[(b, i)] for b, _, _, i in rows])
    sc = np.array([vocab.scenario_index(sessions[r].scenario) for r in srow])
    t = torch.from_numpy
    return LossBatch(
        tokens=collate(seqs),
        ctx_row=torch.tensor([r[0] for r in rows]),
        ctx_pos=torch.tensor([r[1] for r in rows]),
        depth=torch.tensor([r[2] for r in rows]),
        scenario=t(sc),
        pos=t(pos[srow]), pos_mask=t(pmask[srow]), click_mask=t(cmask[srow]), pay_mask=t(ymask[srow]),
        neg=t(negs[srow]),
        scenarios=vocab.scenarios,
        keys=[(b, i, d) for b, _, d, i in rows],
    )


# ---------------------------------------------------------------------------
# aggregation


def scenario_mean_sum(values: torch.Tensor, scenario: torch.Tensor, include: torch.Tensor | None = None):
    """Sum over scenarios of the mean of ``values`` within each scenario."""
    if include is None:
        include = torch.ones_like(scenario, dtype=torch.bool)
    total = values.new_zeros(())
    for sc in torch.unique(scenario[include]).tolist():
        rows = include & (scenario == sc)
        total = total + values[rows].sum() / rows.sum().to(values.dtype)
    return total


@dataclass
class LossBreakdown:
    total: torch.Tensor
    # scenario -> {"nce", "click", "pay", "msp", "sessions", "msp_sessions"}
    per_scenario: dict
    expert_loads: list = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def rows(self) -> list[dict]:
        out = []
        for sc, terms in self.per_scenario.items():
            out.append({"scenario": sc, **{k: v for k, v in terms.items()}})
        return out


def loss_from_hidden(model: NSPModel, final: torch.Tensor, batch: LossBatch, loss_cfg: LossConfig,
                     temperature: float) -> tuple[torch.Tensor, dict]:
    h = final[batch.ctx_row, batch.ctx_pos]
    if model.cfg.msp_heads:
        h = model.msp_project(h, batch.depth)
    pos_logits = (model.item_embeddings(batch.pos) @ h[:, :, None])[..., 0] / temperature
    neg_logits = (model.item_embeddings(batch.neg) @ h[:, :, None])[..., 0] / temperature
    nce = nce_terms(pos_logits, batch.pos_mask, neg_logits)
    click, pay = cascade_terms(pos_logits, batch.pos_mask, batch.click_mask, batch.pay_mask)
    per_session = nce + click + pay
    base = batch.depth == 0
    deep = ~base
    total = scenario_mean_sum(per_session, batch.scenario, base)
    if bool(deep.any()):
        total = total + loss_cfg.msp_weight * scenario_mean_sum(per_session, batch.scenario, deep)

    per_scenario = {}
    with torch.no_grad():
        for sc in torch.unique(batch.scenario).tolist():
            rows = base & (batch.scenario == sc)
            drows = deep & (batch.scenario == sc)
            n, nd = int(rows.sum()), int(drows.sum())
            per_scenario[batch.scenarios[sc - 1]] = {
                "nce": float(nce[rows].mean()) if n else 0.0,
                "click": float(click[rows].mean()) if n else 0.0,
                "pay": float(pay[rows].mean()) if n else 0.0,
                "msp": float(per_session[drows].mean()) if nd else 0.0,
                "sessions": n,
                "msp_sessions": nd,
            }
    return total, per_scenario


def total_loss(model: NSPModel, batch: LossBatch, loss_cfg: LossConfig) -> LossBreakdown:
    """Multi-scene normalized objective on a prepared batch.

    ``total = sum_sc mean_sc(nce + click + pay) + msp_weight * (same over MSP rows)``.
    """
    hidden = model(batch.tokens)
    total, per_scenario = loss_from_hidden(model, hidden.final, batch, loss_cfg, model.cfg.temperature)
    if not torch.isfinite(total):
        raise LossError("non-finite loss")
    return LossBreakdown(total, per_scenario, hidden.expert_loads)
