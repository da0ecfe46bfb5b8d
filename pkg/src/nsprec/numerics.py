"""Gradients of the training objective and a finite-difference check.

Analytic gradients come from torch autograd over the model's forward pass.
The oracle below perturbs parameters one scalar at a time and re-evaluates
the same loss on the same batch, so it shares no derivative code with autograd.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import DataConfig, LossConfig, ModelConfig
from .data import Vocab, generate_synthetic
from .loss import LossBatch, LossBreakdown, TrainExample, make_loss_batch, total_loss
from .model import SPARSE_TABLES, NSPModel, NumericsError, build_model

TOGGLES = ("tsn", "msp", "moe", "sw_rope")


@dataclass
class GradientSet:
    """Dense blocks keep full arrays; sparse tables keep only touched rows."""

    dense: dict[str, torch.Tensor] = field(default_factory=dict)
    # table -> (sorted row ids, row gradients)
    sparse: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def blocks(self):
        for name, g in self.dense.items():
            yield name, g
        for name, (_, rows) in self.sparse.items():
            yield name, rows

    def global_norm(self) -> float:
        return float(torch.sqrt(sum((g.double() ** 2).sum() for _, g in self.blocks())))

    def scale(self, factor: float) -> None:
        for name in self.dense:
            self.dense[name] = self.dense[name] * factor
        for name, (idx, rows) in self.sparse.items():
            self.sparse[name] = (idx, rows * factor)

    def as_dense(self, model: NSPModel) -> dict[str, torch.Tensor]:
        """Full-shape view with zeros for untouched rows and absent blocks."""
        out = {}
        for name, p in model.named_parameters():
            if name in self.dense:
                out[name] = self.dense[name]
            elif name in self.sparse:
                idx, rows = self.sparse[name]
                full = torch.zeros_like(p)
                full[idx] = rows
                out[name] = full
            else:
                out[name] = torch.zeros_like(p)
        return out


def compute_gradients(model: NSPModel, batch: LossBatch, loss_cfg: LossConfig) -> tuple[LossBreakdown, GradientSet]:
    """Loss breakdown plus exact gradients for every parameter block.

    The loss value is the ``total_loss`` value on the same batch (same code path).
    """
    model.zero_grad(set_to_none=True)
    model.touched = {}
    try:
        breakdown = total_loss(model, batch, loss_cfg)
        breakdown.total.backward()
        touched = model.touched_rows()
    finally:
        model.touched = None
    grads = GradientSet()
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        g = p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in {name}")
        if name in SPARSE_TABLES:
            if name not in touched:
                continue
            idx = touched[name]
            grads.sparse[name] = (idx, g[idx])
        else:
            grads.dense[name] = g
    model.zero_grad(set_to_none=True)
    return breakdown, grads


def _loss_value(model: NSPModel, batch: LossBatch, loss_cfg: LossConfig) -> float:
    with torch.no_grad():
        return total_loss(model, batch, loss_cfg).value


def finite_difference_gradients(model: NSPModel, batch: LossBatch, loss_cfg: LossConfig, eps: float = 1e-5,
                                max_per_block: int = 50, seed: int = 0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Central differences at sampled coordinates of every parameter block.

    Blocks with at most ``max_per_block`` scalars are probed exhaustively;
    larger ones at ``max_per_block`` seeded coordinates. Returns
    ``name -> (flat coordinates, derivative estimates)``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in model.named_parameters():
        n = p.numel()
        coords = np.arange(n) if n <= max_per_block else np.sort(rng.choice(n, max_per_block, replace=False))
        flat = p.data.view(-1)
        est = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c].item()
            flat[c] = orig + eps
            up = _loss_value(model, batch, loss_cfg)
            flat[c] = orig - eps
            down = _loss_value(model, batch, loss_cfg)
            flat[c] = orig
            est[j] = (up - down) / (2 * eps)
        out[name] = (coords, est)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries meaningful."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class BlockCheck:
    block: str
    coords: int
    max_rel_err: float
    median_rel_err: float
    status: str


@dataclass
class GradCheckReport:
    rows: list[BlockCheck]
    fraction_within: float
    max_rel_err: float
    status: str
    tol: float = 1e-4
    hard_tol: float = 1e-3
    min_fraction: float = 0.99
    label: str = ""

    def failing_blocks(self) -> list[str]:
        return [r.block for r in self.rows if r.status != "PASS"]

    def to_text(self) -> str:
        lines = [f"grad check {self.label}".rstrip(),
                 f"{'block':<32} {'coords':>6} {'max_rel_err':>12} {'median_rel_err':>14} status"]
        for r in self.rows:
            lines.append(f"{r.block:<32} {r.coords:>6} {r.max_rel_err:>12.3e} {r.median_rel_err:>14.3e} {r.status}")
        lines.append(f"within {self.tol:g}: {self.fraction_within:.4f} (need >= {self.min_fraction}); "
                     f"max {self.max_rel_err:.3e} (need <= {self.hard_tol:g}) -> {self.status}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "max_rel_err", "median_rel_err", "status"])
        for r in self.rows:
            w.writerow([r.block, f"{r.max_rel_err:.6e}", f"{r.median_rel_err:.6e}", r.status])
        return buf.getvalue()


def compare_gradients(model: NSPModel, grads: GradientSet, fd: dict, tol: float = 1e-4,
                      hard_tol: float = 1e-3, min_fraction: float = 0.99, label: str = "") -> GradCheckReport:
    dense = grads.as_dense(model)
    rows, errs = [], []
    for name, (coords, numeric) in fd.items():
        analytic = dense[name].detach().reshape(-1).double().numpy()[coords]
        err = relative_error(analytic, numeric)
        errs.append(err)
        worst = float(err.max()) if len(err) else 0.0
        rows.append(BlockCheck(name, len(coords), worst, float(np.median(err)) if len(err) else 0.0,
                               "PASS" if worst <= hard_tol else "FAIL"))
    allerr = np.concatenate(errs) if errs else np.zeros(0)
    frac = float(np.mean(allerr <= tol)) if len(allerr) else 1.0
    worst = float(allerr.max()) if len(allerr) else 0.0
    ok = frac >= min_fraction and worst <= hard_tol and all(r.status == "PASS" for r in rows)
    return GradCheckReport(rows, frac, worst, "PASS" if ok else "FAIL", tol, hard_tol, min_fraction, label)


def tiny_setup(toggles: dict | None = None, seed: int = 0, num_users: int = 2, num_sessions: int = 3):
    """Desk-scale grad-check fixture: dim 8, 1 block, users with 3 sessions each."""
    data_cfg = DataConfig(num_users=num_users, num_items=40, num_days=6, num_cat1=4, cat2_per_cat1=2,
                          num_sellers=8, num_price_buckets=3, sessions_per_day=1.0, min_items=2, max_items=4)
    ds = generate_synthetic(data_cfg, seed)
    vocab = Vocab.from_dataset(ds)
    cfg = ModelConfig(dim=8, num_blocks=1, num_heads=2, max_seq_len=64, ffn_mult=2, msp_depth=1,
                      moe_routed=3, moe_shared=1, moe_top_k=2, **(toggles or {}))
    model = build_model(cfg, vocab, seed, dtype=torch.float64)
    # non-trivial TSN / MSP weights so their gradients are generic
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith(("tsn_", "msp_")) or name.endswith(("ln1", "ln2", "final_ln")):
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    examples = []
    for uid, seq in ds.users.items():
        if seq.num_sessions >= num_sessions:
            examples.append(TrainExample.full(uid, seq.sessions[:num_sessions]))
    if not examples:
        raise ValueError("fixture produced no user with enough sessions")
    loss_cfg = LossConfig(num_negatives=8)
    batch = make_loss_batch(examples, vocab, cfg, loss_cfg, np.random.default_rng(seed))
    return model, batch, loss_cfg


def grad_check_report(toggles: dict | None = None, seed: int = 0, eps: float = 1e-5, max_per_block: int = 50,
                      corrupt: str | None = None) -> GradCheckReport:
    """Analytic vs central-difference gradients on the tiny fixture.

    ``corrupt`` names a block whose analytic gradient is perturbed before the
    comparison (fault-injection hook for tests).
    """
    model, batch, loss_cfg = tiny_setup(toggles, seed)
    _, grads = compute_gradients(model, batch, loss_cfg)
    if corrupt is not None:
        if corrupt in grads.dense:
            grads.dense[corrupt] = grads.dense[corrupt] + 1.0
        elif corrupt in grads.sparse:
            idx, rows = grads.sparse[corrupt]
            grads.sparse[corrupt] = (idx, rows + 1.0)
        else:
            raise KeyError(f"no gradient block {corrupt!r}")
    fd = finite_difference_gradients(model, batch, loss_cfg, eps=eps, max_per_block=max_per_block, seed=seed)
    label = ",".join(f"{k}={'on' if v else 'off'}" for k, v in (toggles or {}).items())
    return compare_gradients(model, grads, fd, label=label)


def toggle_grid():
    for values in itertools.product((True, False), repeat=len(TOGGLES)):
        yield dict(zip(TOGGLES, values))
