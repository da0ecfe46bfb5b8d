from types import SimpleNamespace

import numpy as np
import pytest
import torch

from nsprec import numerics
from nsprec.loss import total_loss
from nsprec.model import SPARSE_TABLES
from nsprec.numerics import (GradientSet, compare_gradients, compute_gradients, finite_difference_gradients,
                             grad_check_report, relative_error, tiny_setup)


class _Probe(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.theta = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def test_oracle_quadratic_probe(monkeypatch):
    """f(theta) = theta^2 at theta = 3 has derivative 6."""
    monkeypatch.setattr(numerics, "total_loss",
                        lambda model, batch, cfg: SimpleNamespace(value=float(model.theta[0] ** 2)))
    model = _Probe(3.0)
    fd = finite_difference_gradients(model, None, None, eps=1e-5)
    coords, est = fd["theta"]
    assert coords.tolist() == [0]
    assert abs(est[0] - 6.0) <= 1e-9
    assert model.theta.item() == 3.0


class _LinearProbe(torch.nn.Module):
    """One weight; the "loss" is <w * x, y> so its derivative in w is <x, y>."""

    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([w], dtype=torch.float64))
        self.touched = None

    def touched_rows(self):
        return {}


def test_linear_probe_chain_rule(monkeypatch):
    x = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
    y = torch.tensor([0.2, 0.3, 4.0], dtype=torch.float64)

    def probe_loss(model, batch, cfg):
        total = torch.dot(model.w * x, y)
        return SimpleNamespace(total=total, value=total.item())

    monkeypatch.setattr(numerics, "total_loss", probe_loss)
    model = _LinearProbe(0.7)
    breakdown, grads = compute_gradients(model, None, None)
    assert breakdown.value == pytest.approx(0.7 * float(torch.dot(x, y)), abs=1e-15)
    assert grads.dense["w"].item() == pytest.approx(1.5 * 0.2 - 2.0 * 0.3 + 0.5 * 4.0, abs=1e-15)


def test_oracle_restores_parameters_and_is_deterministic():
    model, batch, loss_cfg = tiny_setup()
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    a = finite_difference_gradients(model, batch, loss_cfg, max_per_block=5, seed=3)
    b = finite_difference_gradients(model, batch, loss_cfg, max_per_block=5, seed=3)
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n])
        assert np.array_equal(a[n][0], b[n][0]) and np.array_equal(a[n][1], b[n][1])


def test_gradient_value_matches_loss():
    model, batch, loss_cfg = tiny_setup()
    breakdown, _ = compute_gradients(model, batch, loss_cfg)
    with torch.no_grad():
        direct = total_loss(model, batch, loss_cfg).value
    assert breakdown.value == direct


def test_sparse_tables_only_touched_rows():
    model, batch, loss_cfg = tiny_setup()
    _, grads = compute_gradients(model, batch, loss_cfg)
    assert set(grads.sparse) <= set(SPARSE_TABLES)
    assert not set(grads.dense) & set(SPARSE_TABLES)
    full = grads.as_dense(model)
    for name, (idx, rows) in grads.sparse.items():
        table = getattr(model, name)
        untouched = torch.ones(table.shape[0], dtype=torch.bool)
        untouched[idx] = False
        assert torch.count_nonzero(full[name][untouched]) == 0
        assert rows.shape == (len(idx), table.shape[1])
    assert len(grads.sparse["item_table"][0]) < model.item_table.shape[0]


def test_item_rows_outside_batch_have_zero_gradient():
    """Items neither in the sequences nor sampled as negatives are absent from the item gradient."""
    model, batch, loss_cfg = tiny_setup()
    _, grads = compute_gradients(model, batch, loss_cfg)
    idx, _ = grads.sparse["item_table"]
    used = set(batch.tokens["item"].reshape(-1).tolist()) | set(batch.pos.reshape(-1).tolist()) \
        | set(batch.neg.reshape(-1).tolist())
    assert set(idx.tolist()) <= used


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_global_norm_and_scale():
    g = GradientSet(dense={"a": torch.tensor([3.0])}, sparse={"t": (torch.tensor([1]), torch.tensor([[4.0]]))})
    assert g.global_norm() == 5.0
    g.scale(0.5)
    assert g.global_norm() == 2.5


@pytest.mark.parametrize("block", ["blocks.0.wq", "item_table"])
def test_corrupted_gradient_fails_naming_block(block):
    report = grad_check_report(corrupt=block, max_per_block=10)
    assert report.status == "FAIL"
    assert block in report.failing_blocks()
    assert block in report.to_text()


def test_report_csv_columns():
    model, batch, loss_cfg = tiny_setup()
    _, grads = compute_gradients(model, batch, loss_cfg)
    fd = finite_difference_gradients(model, batch, loss_cfg, max_per_block=3)
    csv_text = compare_gradients(model, grads, fd).to_csv()
    header, *rows = csv_text.strip().splitlines()
    assert header == "block,max_rel_err,median_rel_err,status"
    assert len(rows) == len(fd)


def test_default_configuration_passes():
    report = grad_check_report()
    assert report.status == "PASS", report.to_text()
    assert report.fraction_within >= 0.99 and report.max_rel_err <= 1e-3


def test_item_relabeling_permutes_gradient_rows():
    """Swapping two items' ids everywhere swaps their gradient rows and leaves the loss unchanged."""
    model, batch, loss_cfg = tiny_setup()
    before, grads = compute_gradients(model, batch, loss_cfg)
    g0 = grads.as_dense(model)["item_table"]
    a, b = sorted(set(batch.pos[batch.pos_mask].tolist()))[:2]

    def swap(t):
        out = t.clone()
        out[t == a] = b
        out[t == b] = a
        return out

    with torch.no_grad():
        model.item_table[[a, b]] = model.item_table[[b, a]].clone()
        model.item_side[[a, b]] = model.item_side[[b, a]].clone()
    batch.tokens.features["item"] = swap(batch.tokens["item"])
    batch.pos, batch.neg = swap(batch.pos), swap(batch.neg)
    after, grads2 = compute_gradients(model, batch, loss_cfg)
    g1 = grads2.as_dense(model)["item_table"]
    assert after.value == pytest.approx(before.value, abs=1e-12)
    assert torch.allclose(g1[a], g0[b], atol=1e-12) and torch.allclose(g1[b], g0[a], atol=1e-12)
