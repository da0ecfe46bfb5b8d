import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from nsprec.config import DataConfig, ModelConfig
from nsprec.data import SessionRecord, Vocab, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_DATA = DataConfig(num_users=12, num_items=60, num_days=8, num_cat1=4, cat2_per_cat1=2, num_sellers=8,
                       num_price_buckets=3, sessions_per_day=1.0, min_items=2, max_items=5)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(dim=8, num_blocks=1, num_heads=2, max_seq_len=64, moe_routed=3, moe_shared=1, moe_top_k=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(TINY_DATA, 7)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset):
    return Vocab.from_dataset(tiny_dataset)


def make_session(sid, items, clicked=(), paid=(), scenario="GUL", start=0):
    return SessionRecord(sid, scenario, start, tuple(items), frozenset(clicked), frozenset(paid))


def random_sessions(rng: np.random.Generator, vocab: Vocab, num_sessions: int, max_items: int = 4):
    """Random consistent sessions drawn from the vocab's items and scenarios."""
    out = []
    for k in range(num_sessions):
        n = int(rng.integers(1, max_items + 1))
        items = tuple(rng.choice(vocab.item_ids, size=n, replace=False))
        clicked = {i for i in items if rng.random() < 0.5}
        paid = {i for i in clicked if rng.random() < 0.5}
        scenario = vocab.scenarios[int(rng.integers(len(vocab.scenarios)))]
        out.append(make_session(f"s{k}", items, clicked, paid, scenario, start=1000 * k + int(rng.integers(500))))
    return out


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criterion lines after the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
