"""Experiment pipelines shared by the command line, scripts and acceptance tests."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .data import BucketAssignment, Dataset, HeldOutQuery, Vocab, generate_synthetic, ingest_events, \
    split_holdout
from .loss import TrainExample
from .model import NSPModel, build_model, component_delta, count_parameters, parameter_count
from .retrieval import EvalReport, evaluate
from .training import PhaseMetrics, StepMetrics, Trainer, build_pit_schedule, full_examples, make_checkpoint, \
    restore, run_pit

log = logging.getLogger(__name__)

COMPONENTS = ("tsn", "msp", "moe", "sw_rope")


def child_seed(seed: int, label: str) -> int:
    """Stable per-purpose seed derived from the run seed and a fixed label."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


@dataclass
class Prepared:
    cfg: RunConfig
    dataset: Dataset
    train: Dataset
    queries: list[HeldOutQuery]
    vocab: Vocab


def load_dataset(cfg: RunConfig) -> Dataset:
    """The configured event log if one is set, else the synthetic log for ``cfg.seed``."""
    if cfg.data.events_path:
        ds, report = ingest_events(cfg.data.events_path, cfg.data, cfg.data.items_path or None)
        return ds
    return generate_synthetic(cfg.data, cfg.seed)


def prepare(cfg: RunConfig, dataset: Dataset | None = None) -> Prepared:
    ds = dataset if dataset is not None else load_dataset(cfg)
    train, queries = split_holdout(ds, cfg.data.holdout_days)
    return Prepared(cfg, ds, train, queries, Vocab.from_dataset(train))


def new_trainer(cfg: RunConfig, vocab: Vocab, seed: int | None = None) -> Trainer:
    seed = cfg.seed if seed is None else seed
    model = build_model(cfg.model, vocab, child_seed(seed, "init"), dtype=getattr(torch, cfg.train.dtype))
    return Trainer(model, cfg, np.random.default_rng(child_seed(seed, "train")))


@dataclass
class TrainRun:
    trainer: Trainer
    metrics: list[StepMetrics]
    report: EvalReport | None

    @property
    def model(self) -> NSPModel:
        return self.trainer.model


def train_and_evaluate(prep: Prepared, cfg: RunConfig | None = None, seed: int | None = None,
                       steps: int | None = None, do_eval: bool = True) -> TrainRun:
    cfg = cfg or prep.cfg
    trainer = new_trainer(cfg, prep.vocab, seed)
    metrics = trainer.train_steps(full_examples(prep.train), cfg.train.steps if steps is None else steps)
    report = evaluate(trainer.model, prep.queries, cfg.retrieval) if do_eval else None
    return TrainRun(trainer, metrics, report)


# ---------------------------------------------------------------------------
# partial incremental training vs full retraining


@dataclass
class PitComparison:
    pretrain: EvalReport
    full: EvalReport
    pit: EvalReport
    full_phases: list[PhaseMetrics]
    pit_phases: list[PhaseMetrics]
    k: int = 100

    @property
    def ratio(self) -> float:
        return self.pit.hr(self.k) / self.full.hr(self.k)

    @property
    def sample_ratio(self) -> float:
        """Largest per-phase PIT/full sample-count ratio."""
        full = {p.day: p.samples for p in self.full_phases}
        return max(p.samples / full[p.day] for p in self.pit_phases)

    @property
    def total_sample_ratio(self) -> float:
        return sum(p.samples for p in self.pit_phases) / sum(p.samples for p in self.full_phases)


def pit_comparison(prep: Prepared, cfg: RunConfig | None = None, k: int = 100) -> PitComparison:
    """Pretrain on the first days, then continue phase by phase two ways.

    Full retraining trains on every user's window each phase; PIT trains one
    bucket's window with ``1 / num_buckets`` of the optimizer steps.
    """
    cfg = cfg or prep.cfg
    pit = cfg.pit
    first, last = prep.train.days()
    pre_end = first + pit.pretrain_days - 1
    if pre_end >= last:
        raise ValueError("pit.pretrain_days leaves no days for incremental phases")
    pre_examples = []
    for uid, seq in prep.train.users.items():
        sessions = tuple(s for s in seq.sessions if s.day <= pre_end)
        if sessions:
            pre_examples.append(TrainExample.full(uid, sessions))
    trainer = new_trainer(cfg, prep.vocab)
    trainer.train_steps(pre_examples, pit.pretrain_steps)
    trainer.cursor = pre_end
    pretrain_report = evaluate(trainer.model, prep.queries, cfg.retrieval)
    snapshot = make_checkpoint(trainer)

    schedule = build_pit_schedule(pre_end + 1, last, pit.num_buckets, pit.window_days)
    full_tr = restore(snapshot, cfg)
    full_phases = run_pit(full_tr, prep.train, schedule, None, pit.steps_per_phase * pit.num_buckets)
    assignment = BucketAssignment.for_users(prep.train.users, pit.num_buckets)
    pit_tr = restore(snapshot, cfg)
    pit_phases = run_pit(pit_tr, prep.train, schedule, assignment, pit.steps_per_phase)
    return PitComparison(
        pretrain=pretrain_report,
        full=evaluate(full_tr.model, prep.queries, cfg.retrieval),
        pit=evaluate(pit_tr.model, prep.queries, cfg.retrieval),
        full_phases=full_phases, pit_phases=pit_phases, k=k,
    )


# ---------------------------------------------------------------------------
# ablation and scaling


@dataclass
class AblationRun:
    name: str
    params: int
    expected_delta: int
    actual_delta: int
    final_loss: float
    metrics: list[StepMetrics]
    report: EvalReport | None

    @property
    def delta_ok(self) -> bool:
        return self.expected_delta == self.actual_delta


def variant_config(cfg: RunConfig, component: str) -> RunConfig:
    out = copy.deepcopy(cfg)
    setattr(out.model, component, False)
    return out


def ablation(prep: Prepared, cfg: RunConfig | None = None, do_eval: bool = True) -> list[AblationRun]:
    """The base run plus one run per component switched off; same seed throughout."""
    cfg = cfg or prep.cfg
    base_params = parameter_count(cfg.model, prep.vocab)
    out = []
    for name in ("base", *COMPONENTS):
        run_cfg = cfg if name == "base" else variant_config(cfg, name)
        run = train_and_evaluate(prep, run_cfg, do_eval=do_eval)
        params = count_parameters(run.model)
        expected = 0 if name == "base" else component_delta(cfg.model, name)
        out.append(AblationRun(name, params, expected, base_params - params,
                               run.metrics[-1].total if run.metrics else float("nan"), run.metrics, run.report))
    return out


@dataclass
class ScalePoint:
    dim: int
    seed: int
    params: int
    hr: dict

    @property
    def log_params(self) -> float:
        return math.log(self.params)


@dataclass
class ScaleSweep:
    points: list[ScalePoint] = field(default_factory=list)

    def mean_hr(self, dim: int, k: int = 100) -> float:
        return float(np.mean([p.hr[k] for p in self.points if p.dim == dim]))

    def dims(self) -> list[int]:
        return sorted({p.dim for p in self.points})

    def slope(self, k: int = 100) -> float:
        """Least-squares slope of mean HR@k against log parameter count."""
        dims = self.dims()
        if len(dims) < 2:
            return float("nan")
        x = [next(p.log_params for p in self.points if p.dim == d) for d in dims]
        y = [self.mean_hr(d, k) for d in dims]
        return float(np.polyfit(x, y, 1)[0])


def scale_sweep(prep: Prepared, dims: list[int], seeds: list[int], cfg: RunConfig | None = None) -> ScaleSweep:
    cfg = cfg or prep.cfg
    sweep = ScaleSweep()
    for dim in dims:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.model = dataclasses.replace(cfg.model, dim=dim)
        for seed in seeds:
            run = train_and_evaluate(prep, run_cfg, seed=seed)
            sweep.points.append(ScalePoint(dim, seed, count_parameters(run.model), dict(run.report.overall)))
            log.info("scale dim %d seed %d HR@100 %.4f", dim, seed, run.report.overall.get(100, float("nan")))
    return sweep
