"""Optimizers, the training loop, partial incremental training and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import ModelConfig, RunConfig, TrainConfig
from .data import BucketAssignment, Dataset, Vocab
from .loss import TrainExample, make_loss_batch
from .model import NSPModel, NumericsError
from .numerics import GradientSet, compute_gradients

log = logging.getLogger(__name__)

MAGIC = b"NSPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    sparse_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adagrad_eps: float = 1e-10
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_steps: dict = field(default_factory=dict)
    # dense accumulator per table plus a mask of rows ever touched
    acc: dict = field(default_factory=dict)
    touched: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(lr=cfg.lr, sparse_lr=cfg.sparse_lr or cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps, adagrad_eps=cfg.adagrad_eps)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "sparse_lr", "beta1", "beta2", "eps", "adagrad_eps")}


@torch.no_grad()
def optimizer_step(model: NSPModel, grads: GradientSet, state: OptimizerState) -> OptimizerState:
    """Adam on dense blocks, row-wise Adagrad on embedding tables, in place.

    Absent dense blocks are skipped; untouched embedding rows and their
    accumulators are left alone.
    """
    params = dict(model.named_parameters())
    for name, g in grads.dense.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        if name not in state.adam_m:
            state.adam_m[name] = torch.zeros_like(p, dtype=torch.float64)
            state.adam_v[name] = torch.zeros_like(p, dtype=torch.float64)
            state.adam_steps[name] = 0
        g = g.double()
        m, v = state.adam_m[name], state.adam_v[name]
        state.adam_steps[name] += 1
        t = state.adam_steps[name]
        m.mul_(state.beta1).add_((1 - state.beta1) * g)
        v.mul_(state.beta2).add_((1 - state.beta2) * g * g)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.sub_((state.lr * m_hat / (v_hat.sqrt() + state.eps)).to(p.dtype))
    for name, (idx, rows) in grads.sparse.items():
        p = params[name]
        if rows.shape[1:] != p.shape[1:]:
            raise ValueError(f"row gradient shape mismatch for {name}")
        if name not in state.acc:
            state.acc[name] = torch.zeros_like(p, dtype=torch.float64)
            state.touched[name] = torch.zeros(p.shape[0], dtype=torch.bool)
        g = rows.double()
        acc = state.acc[name]
        acc[idx] += g * g
        state.touched[name][idx] = True
        p[idx] -= (state.sparse_lr * g / torch.sqrt(acc[idx] + state.adagrad_eps)).to(p.dtype)
    return state


def clip_gradients(grads: GradientSet, max_norm: float) -> float:
    """Scale to global norm ``max_norm`` if above it; returns the pre-clip norm."""
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        grads.scale(max_norm / norm)
    return norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    total: float
    per_scenario: dict
    grad_norm: float
    samples: int

    def csv_rows(self, label: str = "step") -> list[dict]:
        rows = []
        for sc, terms in self.per_scenario.items():
            rows.append({label: self.step, "scenario": sc, "loss_nce": terms["nce"], "loss_click": terms["click"],
                         "loss_pay": terms["pay"], "loss_msp": terms["msp"], "loss_total": self.total})
        return rows


class Trainer:
    """Owns the model, optimizer state and RNG of one training run."""

    def __init__(self, model: NSPModel, cfg: RunConfig, rng: np.random.Generator | None = None,
                 state: OptimizerState | None = None):
        self.model = model
        self.cfg = cfg
        self.vocab = model.vocab
        self.state = state or OptimizerState.from_config(cfg.train)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.step = 0
        self.cursor = 0

    def train_step(self, examples: list[TrainExample]) -> StepMetrics:
        n = min(self.cfg.train.batch_size, len(examples))
        chosen = self.rng.choice(len(examples), size=n, replace=False)
        batch = make_loss_batch([examples[i] for i in chosen], self.vocab, self.model.cfg, self.cfg.loss, self.rng)
        breakdown, grads = compute_gradients(self.model, batch, self.cfg.loss)
        if not np.isfinite(breakdown.value):
            raise NumericsError(f"non-finite loss at step {self.step}: {breakdown.per_scenario}")
        norm = clip_gradients(grads, self.cfg.train.clip_norm)
        optimizer_step(self.model, grads, self.state)
        self.model.update_balance(breakdown.expert_loads)
        self.step += 1
        return StepMetrics(self.step, breakdown.value, breakdown.per_scenario, norm, n)

    def train_steps(self, examples: list[TrainExample], steps: int,
                    callback: Callable[[StepMetrics], None] | None = None) -> list[StepMetrics]:
        if not examples:
            raise ValueError("no training examples")
        out = []
        for _ in range(steps):
            m = self.train_step(examples)
            out.append(m)
            if callback is not None:
                callback(m)
            every = self.cfg.train.log_every
            if every and m.step % every == 0:
                log.info("step %d loss %.4f", m.step, m.total)
        return out


def full_examples(ds: Dataset) -> list[TrainExample]:
    return [TrainExample.full(uid, seq.sessions) for uid, seq in ds.users.items() if seq.sessions]


def train_steps(examples, model: NSPModel, state: OptimizerState, cfg: RunConfig, steps: int,
                rng: np.random.Generator) -> list[StepMetrics]:
    trainer = Trainer(model, cfg, rng, state)
    return trainer.train_steps(examples, steps)


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# partial incremental training


@dataclass(frozen=True)
class Phase:
    day: int
    bucket: int
    window_start: int
    window_end: int

    def selects(self, bucket: int, day: int) -> bool:
        return bucket == self.bucket and self.window_start <= day <= self.window_end


@dataclass
class PitSchedule:
    num_buckets: int
    window_days: int
    phases: list[Phase]

    def coverage(self, assignment: dict[str, int], day_index: dict) -> Counter:
        """How many phases select each ``(user, day)`` datum."""
        counts = Counter()
        for uid, days in day_index.items():
            b = assignment[uid]
            for d in days:
                counts[(uid, d)] += sum(p.selects(b, d) for p in self.phases)
        return counts

    def interior_days(self) -> range:
        """Days whose every covering phase lies inside the schedule."""
        if not self.phases:
            return range(0)
        return range(self.phases[0].day, self.phases[-1].day - self.window_days + 2)


def build_pit_schedule(start_day: int, end_day: int, num_buckets: int = 10, window_days: int = 10) -> PitSchedule:
    """One phase per day ``t``: bucket ``t mod num_buckets``, window ``[t - w + 1, t]``."""
    if end_day < start_day:
        raise ValueError("end_day must be >= start_day")
    if num_buckets < 1 or window_days < 1:
        raise ValueError("num_buckets and window_days must be >= 1")
    phases = [Phase(t, t % num_buckets, t - window_days + 1, t) for t in range(start_day, end_day + 1)]
    return PitSchedule(num_buckets, window_days, phases)


def phase_examples(ds: Dataset, phase: Phase, assignment: dict[str, int] | None) -> list[TrainExample]:
    """Users of the phase bucket (all users if ``assignment`` is None) with window sessions.

    History up to the window end stays in the input; only window sessions are targets.
    """
    out = []
    for uid, seq in ds.users.items():
        if assignment is not None and assignment[uid] != phase.bucket:
            continue
        sessions = tuple(s for s in seq.sessions if s.day <= phase.window_end)
        targets = frozenset(i for i, s in enumerate(sessions) if s.day >= phase.window_start)
        if targets:
            out.append(TrainExample(uid, sessions, targets))
    return out


@dataclass
class PhaseMetrics:
    day: int
    bucket: int
    users: int
    target_sessions: int
    samples: int
    steps: int
    mean_loss: float
    data: frozenset
    eval: Optional[dict] = None


def run_pit(trainer: Trainer, ds: Dataset, schedule: PitSchedule, assignment: BucketAssignment | None,
            steps_per_phase: int, eval_hook: Callable[[Phase], dict] | None = None) -> list[PhaseMetrics]:
    """Train phase by phase.

    With an ``assignment`` each phase sees one bucket (partial incremental
    training); with ``None`` every phase sees all users (full retraining).
    """
    mapping = assignment.assignment if assignment is not None else None
    out = []
    for phase in schedule.phases:
        examples = phase_examples(ds, phase, mapping)
        if not examples:
            log.warning("phase day %d bucket %d: no data, skipped", phase.day, phase.bucket)
            continue
        metrics = trainer.train_steps(examples, steps_per_phase)
        data = frozenset((ex.user_id, ex.sessions[i].day) for ex in examples for i in ex.targets)
        out.append(PhaseMetrics(
            day=phase.day, bucket=phase.bucket, users=len(examples),
            target_sessions=sum(len(ex.targets) for ex in examples),
            samples=sum(m.samples for m in metrics), steps=len(metrics),
            mean_loss=float(np.mean([m.total for m in metrics])) if metrics else float("nan"),
            data=data, eval=eval_hook(phase) if eval_hook else None,
        ))
        trainer.cursor = phase.day
    return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    vocab: Vocab
    tensors: dict[str, np.ndarray]
    meta: dict
    version: int = VERSION


def make_checkpoint(trainer: Trainer) -> Checkpoint:
    model, state = trainer.model, trainer.state
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param.{name}"] = p.detach().double().numpy().copy()
    for name, b in model.named_buffers():
        if name != "item_side":
            tensors[f"buffer.{name}"] = b.detach().double().numpy().copy()
    for name in state.adam_m:
        tensors[f"adam.m.{name}"] = state.adam_m[name].numpy().copy()
        tensors[f"adam.v.{name}"] = state.adam_v[name].numpy().copy()
    for name in state.acc:
        tensors[f"adagrad.acc.{name}"] = state.acc[name].numpy().copy()
        tensors[f"adagrad.touched.{name}"] = state.touched[name].double().numpy()
    meta = {
        "optimizer": state.hyper(),
        "adam_steps": state.adam_steps,
        "rng_state": trainer.rng.bit_generator.state,
        "step": trainer.step,
        "cursor": trainer.cursor,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "run_config": {"seed": trainer.cfg.seed},
    }
    return Checkpoint(model.cfg, model.vocab, tensors, meta)


def checkpoint_save(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"model": asdict(ckpt.model_cfg), "vocab": ckpt.vocab.to_dict(), "meta": ckpt.meta}).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", ckpt.version))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(struct.pack("<I", len(ckpt.tensors)))
            for name, arr in ckpt.tensors.items():
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_load(path: str | Path) -> Checkpoint:
    """Parse and validate a checkpoint; nothing is returned unless all of it is sound."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (hlen,) = r.unpack("<Q", "config length")
    try:
        header = json.loads(r.take(hlen, "config block").decode())
        model_cfg = ModelConfig(**header["model"])
        vocab = Vocab.from_dict(header["vocab"])
        meta = header["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "tensor name length")
        name = r.take(nlen, "tensor name").decode(errors="replace")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8").reshape(dims).copy()
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor table")
    ckpt = Checkpoint(model_cfg, vocab, tensors, meta, version)
    _validate_shapes(ckpt)
    return ckpt


def _validate_shapes(ckpt: Checkpoint) -> None:
    model = NSPModel(ckpt.model_cfg, ckpt.vocab)
    expected = {f"param.{n}": tuple(p.shape) for n, p in model.named_parameters()}
    expected.update({f"buffer.{n}": tuple(b.shape) for n, b in model.named_buffers() if n != "item_side"})
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tuple(ckpt.tensors[name].shape) != shape:
            raise CheckpointError(f"shape mismatch for {name}: {ckpt.tensors[name].shape} != {shape}")
    for name, arr in ckpt.tensors.items():
        kind, _, pname = name.partition(".")
        if kind in ("adam", "adagrad"):
            pname = pname.split(".", 1)[1]
            ref = f"param.{pname}"
            if ref not in expected:
                raise CheckpointError(f"optimizer tensor {name} has no parameter")
            want = expected[ref] if not name.startswith("adagrad.touched") else expected[ref][:1]
            if tuple(arr.shape) != want:
                raise CheckpointError(f"shape mismatch for {name}")
        elif name not in expected:
            raise CheckpointError(f"unexpected tensor {name}")


def restore(ckpt: Checkpoint, cfg: RunConfig) -> Trainer:
    """Rebuild model, optimizer state and RNG so training resumes exactly."""
    dtype = getattr(torch, ckpt.meta.get("dtype", "float64"))
    model = NSPModel(ckpt.model_cfg, ckpt.vocab).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.tensors[f"param.{name}"]))
        for name, b in model.named_buffers():
            if name != "item_side":
                b.copy_(torch.from_numpy(ckpt.tensors[f"buffer.{name}"]))
    hyper = ckpt.meta["optimizer"]
    state = OptimizerState(**hyper)
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam.m."):
            pname = name[len("adam.m."):]
            state.adam_m[pname] = torch.from_numpy(arr.copy())
            state.adam_v[pname] = torch.from_numpy(ckpt.tensors[f"adam.v.{pname}"].copy())
        elif name.startswith("adagrad.acc."):
            pname = name[len("adagrad.acc."):]
            state.acc[pname] = torch.from_numpy(arr.copy())
            state.touched[pname] = torch.from_numpy(ckpt.tensors[f"adagrad.touched.{pname}"] != 0)
    state.adam_steps = {k: int(v) for k, v in ckpt.meta["adam_steps"].items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_state"]
    trainer = Trainer(model, cfg, rng, state)
    trainer.step = int(ckpt.meta["step"])
    trainer.cursor = int(ckpt.meta["cursor"])
    return trainer
