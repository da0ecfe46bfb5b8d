import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from nsprec.config import LossConfig
from nsprec.loss import (LossError, SessionLossInput, TrainExample, cascade_losses, make_loss_batch, msp_targets,
                         nce_loss, sample_logits, sample_negatives, sampling_weights, scenario_mean_sum, total_loss)
from nsprec.model import build_model

from conftest import random_sessions, tiny_model_config


def _input_from_logits(pos_logits, neg_logits, clicked=(), paid=()):
    """Session input whose logits equal the given numbers (context e_1, item rows carry the logit)."""
    pos = torch.zeros(len(pos_logits), 2, dtype=torch.float64)
    pos[:, 0] = torch.tensor(pos_logits, dtype=torch.float64)
    neg = torch.zeros(len(neg_logits), 2, dtype=torch.float64)
    neg[:, 0] = torch.tensor(neg_logits, dtype=torch.float64)
    n = len(pos_logits)
    cmask = torch.tensor([i in clicked for i in range(n)])
    pmask = torch.tensor([i in paid for i in range(n)])
    return SessionLossInput(torch.tensor([1.0, 0.0], dtype=torch.float64), pos, neg, cmask, pmask)


def _direct(pos, targets, contrast):
    """Plain-Python mean over targets of -log(p_i / (p_i + sum_j p_j))."""
    if not targets or not contrast:
        return 0.0
    terms = []
    for i in targets:
        p_i = math.exp(pos[i])
        terms.append(-math.log(p_i / (p_i + sum(math.exp(c) for c in contrast))))
    return sum(terms) / len(terms)


# -- negative sampling ------------------------------------------------------


def test_negatives_forced():
    w = sampling_weights(np.array([0, 5, 5, 5]), 0.0)
    got = sample_negatives(w, 2, {1}, np.random.default_rng(0))
    assert sorted(got.tolist()) == [2, 3]


def test_negatives_too_many():
    w = sampling_weights(np.array([0, 1, 1, 1]), 0.0)
    with pytest.raises(LossError):
        sample_negatives(w, 3, {1}, np.random.default_rng(0))


def test_negatives_uniform_frequencies():
    w = sampling_weights(np.array([0, 3, 1, 7, 2]), 0.0)
    rng = np.random.default_rng(1)
    counts = np.bincount([sample_negatives(w, 1, set(), rng)[0] for _ in range(10_000)], minlength=5)
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - 2500) <= 150), counts


def test_negatives_popularity_weighting():
    w = sampling_weights(np.array([0, 9, 1]), 1.0)
    rng = np.random.default_rng(2)
    draws = [sample_negatives(w, 1, set(), rng)[0] for _ in range(10_000)]
    assert abs(np.mean(np.array(draws) == 1) - 0.9) <= 0.015


@given(st.integers(1, 6), st.sets(st.integers(1, 10), max_size=4), st.integers(0, 1000))
def test_negatives_distinct_and_excluded(count, exclude, seed):
    w = sampling_weights(np.ones(11), 0.0)
    if count > 10 - len(exclude):
        with pytest.raises(LossError):
            sample_negatives(w, count, exclude, np.random.default_rng(seed))
        return
    a = sample_negatives(w, count, exclude, np.random.default_rng(seed))
    b = sample_negatives(w, count, exclude, np.random.default_rng(seed))
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == count and not set(a.tolist()) & exclude and 0 not in a


# -- logits -----------------------------------------------------------------


def test_sample_logits_examples():
    ctx = torch.tensor([1.0, 2.0], dtype=torch.float64)
    items = torch.tensor([[1.0, 1.0], [0.5, -3.0]], dtype=torch.float64)
    assert sample_logits(ctx, items)[0].item() == 3.0
    assert torch.equal(sample_logits(ctx, items, 2.0), sample_logits(ctx, items) / 2)
    assert torch.count_nonzero(sample_logits(torch.zeros(2, dtype=torch.float64), items)) == 0


# -- nce --------------------------------------------------------------------


def test_nce_symmetric_case():
    assert nce_loss(_input_from_logits([0.0], [0.0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_nce_confident_positive():
    assert nce_loss(_input_from_logits([20.0], [0.0])).item() <= 1e-8


def test_nce_empty_positives():
    inp = _input_from_logits([], [0.0])
    with pytest.raises(LossError):
        nce_loss(inp)


@given(st.integers(0, 10 ** 6))
def test_nce_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    pos, neg = rng.normal(size=2) * 3, rng.normal(size=3) * 3
    got = nce_loss(_input_from_logits(pos.tolist(), neg.tolist())).item()
    assert abs(got - _direct(pos.tolist(), [0, 1], neg.tolist())) <= 1e-10


def test_nce_monotone_in_positive_logit():
    base = nce_loss(_input_from_logits([0.3, -0.2], [0.1, 0.4])).item()
    higher = nce_loss(_input_from_logits([0.5, -0.2], [0.1, 0.4])).item()
    assert higher < base


def test_nce_invariant_to_order():
    a = nce_loss(_input_from_logits([0.3, -0.2, 1.0], [0.1, 0.4])).item()
    b = nce_loss(_input_from_logits([1.0, 0.3, -0.2], [0.4, 0.1])).item()
    assert a == pytest.approx(b, abs=1e-15)


# -- cascade ----------------------------------------------------------------


def test_click_all_clicked_is_zero():
    click, _ = cascade_losses(_input_from_logits([0.5, 1.0], [0.0], clicked={0, 1}))
    assert click.item() == 0.0


def test_click_single_pair():
    click, _ = cascade_losses(_input_from_logits([0.0, 0.0], [0.0], clicked={0}))
    assert click.item() == pytest.approx(math.log(2), abs=1e-15)


def test_pay_example():
    _, pay = cascade_losses(_input_from_logits([1.0, 0.0, 0.0], [0.0], clicked={0, 1, 2}, paid={0}))
    assert pay.item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)


@pytest.mark.parametrize("clicked,paid", [((), ()), ({0, 1}, {0, 1}), ({0}, ()), ({0, 1, 2}, {0})])
def test_cascade_degenerate_rules(clicked, paid):
    click, pay = cascade_losses(_input_from_logits([0.4, -1.0, 2.0], [0.0], clicked=clicked, paid=paid))
    if not clicked or len(clicked) == 3:
        assert click.item() == 0.0
    if set(paid) == set(clicked):
        assert pay.item() == 0.0


@given(st.integers(0, 10 ** 6))
def test_cascade_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    pos = (rng.normal(size=n) * 2).tolist()
    clicked = {i for i in range(n) if rng.random() < 0.6}
    paid = {i for i in clicked if rng.random() < 0.5}
    click, pay = cascade_losses(_input_from_logits(pos, [0.0], clicked, paid))
    unclicked = [pos[i] for i in range(n) if i not in clicked]
    unpaid = [pos[i] for i in clicked if i not in paid]
    assert abs(click.item() - _direct(pos, sorted(clicked), unclicked)) <= 1e-10
    assert abs(pay.item() - _direct(pos, sorted(paid), unpaid)) <= 1e-10


# -- MSP targets ------------------------------------------------------------


def test_msp_targets():
    assert [t for t in msp_targets(3, 1) if t[2] > 0] == [(1, 2, 1), (2, 3, 1)]
    assert msp_targets(3, 0) == [(1, 1, 0), (2, 2, 0), (3, 3, 0)]
    assert [t for t in msp_targets(2, 3) if t[2] > 0] == [(1, 2, 1)]


# -- aggregation ------------------------------------------------------------


def test_scenario_mean_two_scenarios():
    v = 1.7
    values = torch.full((4,), v, dtype=torch.float64)
    scenario = torch.tensor([1, 2, 2, 2])
    assert scenario_mean_sum(values, scenario).item() == 2 * v


def test_scenario_mean_duplication_invariance():
    values = torch.tensor([0.5, 2.0, 3.5], dtype=torch.float64)
    scenario = torch.tensor([1, 2, 2])
    dup_values = torch.cat([values, values[1:]])
    dup_scenario = torch.cat([scenario, scenario[1:]])
    assert scenario_mean_sum(values, scenario).item() == scenario_mean_sum(dup_values, dup_scenario).item()


def _batch_for(examples, vocab, cfg, loss_cfg, seed=0):
    return make_loss_batch(examples, vocab, cfg, loss_cfg, np.random.default_rng(seed))


def test_total_loss_single_session(tiny_vocab):
    rng = np.random.default_rng(0)
    sessions = random_sessions(rng, tiny_vocab, 1)
    cfg = tiny_model_config(msp=False)
    model = build_model(cfg, tiny_vocab, 0)
    loss_cfg = LossConfig(num_negatives=8)
    batch = _batch_for([TrainExample.full("u", sessions)], tiny_vocab, cfg, loss_cfg)
    out = total_loss(model, batch, loss_cfg)
    (terms,) = out.per_scenario.values()
    assert out.value == pytest.approx(terms["nce"] + terms["click"] + terms["pay"], abs=1e-12)


def test_total_loss_one_scenario_plain_mean(tiny_vocab):
    rng = np.random.default_rng(1)
    sessions = random_sessions(rng, tiny_vocab, 4)
    sessions = [type(s)(s.session_id, "GUL", s.start_time, s.exposed, s.clicked, s.paid) for s in sessions]
    cfg = tiny_model_config()
    model = build_model(cfg, tiny_vocab, 0)
    loss_cfg = LossConfig(num_negatives=8, msp_weight=0.0)
    batch = _batch_for([TrainExample.full("u", sessions)], tiny_vocab, cfg, loss_cfg)
    out = total_loss(model, batch, loss_cfg)
    t = out.per_scenario["GUL"]
    assert out.value == pytest.approx(t["nce"] + t["click"] + t["pay"], abs=1e-12)


def test_total_loss_duplicated_scenario_sessions(tiny_vocab):
    """Repeating a user's batch entry doubles every scenario's sessions but leaves each mean unchanged."""
    rng = np.random.default_rng(2)
    ex = TrainExample.full("u", random_sessions(rng, tiny_vocab, 3))
    cfg = tiny_model_config()
    model = build_model(cfg, tiny_vocab, 0)
    loss_cfg = LossConfig(num_negatives=8)
    single = _batch_for([ex], tiny_vocab, cfg, loss_cfg, seed=5)
    double = _batch_for([ex, ex], tiny_vocab, cfg, loss_cfg, seed=5)
    # reuse the single-copy negatives for both copies
    half = single.neg.shape[0]
    double.neg = torch.cat([single.neg, single.neg])
    assert double.neg.shape[0] == 2 * half
    a, b = total_loss(model, single, loss_cfg), total_loss(model, double, loss_cfg)
    assert b.value == pytest.approx(a.value, abs=1e-12)


def test_total_loss_nonnegative_terms(tiny_dataset, tiny_vocab):
    cfg = tiny_model_config(msp_depth=2)
    model = build_model(cfg, tiny_vocab, 0)
    loss_cfg = LossConfig(num_negatives=8)
    examples = [TrainExample.full(u, s.sessions) for u, s in tiny_dataset.users.items()]
    out = total_loss(model, _batch_for(examples, tiny_vocab, cfg, loss_cfg), loss_cfg)
    for terms in out.per_scenario.values():
        assert min(terms["nce"], terms["click"], terms["pay"], terms["msp"]) >= 0
    assert np.isfinite(out.value)


def test_negatives_disjoint_from_positives(tiny_dataset, tiny_vocab):
    cfg = tiny_model_config()
    examples = [TrainExample.full(u, s.sessions) for u, s in tiny_dataset.users.items()]
    batch = _batch_for(examples, tiny_vocab, cfg, LossConfig(num_negatives=8))
    for pos, mask, neg in zip(batch.pos, batch.pos_mask, batch.neg):
        assert not set(pos[mask].tolist()) & set(neg.tolist())


def test_targets_only_selected_sessions(tiny_vocab):
    rng = np.random.default_rng(3)
    sessions = tuple(random_sessions(rng, tiny_vocab, 4))
    cfg = tiny_model_config(msp=False)
    batch = _batch_for([TrainExample("u", sessions, frozenset({2, 3}))], tiny_vocab, cfg, LossConfig(num_negatives=4))
    assert sorted(i for _, i, _ in batch.keys) == [2, 3]


def test_empty_batch_rejected(tiny_vocab):
    with pytest.raises(LossError):
        make_loss_batch([], tiny_vocab, tiny_model_config(), LossConfig(), np.random.default_rng(0))
