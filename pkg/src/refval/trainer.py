"""Deterministic mini-batch SGD with an ordered hook interface.

The loop itself is deliberately plain: sample a batch, take the mean-gradient
step, record what happened, tell the hooks. All randomness flows through two
derived RNG streams (init, batch order), so the same config reproduces the
same trajectory bit for bit, with or without hooks attached.

Hooks may implement any of `on_run_start(params0)`, `on_step(record,
params_after)` and `on_run_end(store)`; a bare callable is treated as
`on_step`. Hooks run synchronously on the training thread in the order
given and must not mutate what they are handed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .dataio import Dataset
from .errors import ConfigError, HookError, ParameterError, StoreError
from .numkit import RngState

WITH_REPLACEMENT = "with-replacement"
EPOCH_PERMUTATION = "epoch-permutation"

STREAM_INIT = 101
STREAM_BATCH = 102


@dataclass(frozen=True)
class LrSchedule:
    """Constant learning rate, or step decay lr * factor^((t-1) // every)."""

    lr: float
    factor: float = 1.0
    every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.every < 0:
            raise ConfigError("decay interval must be >= 0")
        if self.every > 0 and not (0 < self.factor <= 1.0):
            raise ConfigError("decay factor must be in (0, 1] to keep lr non-increasing")

    def at(self, t: int) -> float:
        if self.every == 0:
            return self.lr
        return self.lr * self.factor ** ((t - 1) // self.every)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int
    schedule: LrSchedule
    rng: RngState
    shuffle: str = EPOCH_PERMUTATION
    # Optional stream overrides; the volatility probe uses these to vary the
    # init draw while keeping the batch order pinned (or vice versa).
    init_rng: RngState | None = None
    batch_rng: RngState | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.shuffle not in (WITH_REPLACEMENT, EPOCH_PERMUTATION):
            raise ConfigError(f"unknown shuffle mode {self.shuffle!r}")

    def effective_init_rng(self) -> RngState:
        return self.init_rng if self.init_rng is not None else self.rng.derive(STREAM_INIT)

    def effective_batch_rng(self) -> RngState:
        return self.batch_rng if self.batch_rng is not None else self.rng.derive(STREAM_BATCH)


@dataclass
class StepRecord:
    """Everything one SGD step needs to be revalued later."""

    step: int
    params_before: M.ParamVector | None
    lr: float
    batch: np.ndarray  # sample ids, in draw order
    batch_loss: float  # loss of this batch at the post-update parameters


@dataclass
class TrajectoryStore:
    records: dict = field(default_factory=dict)
    final_params: M.ParamVector | None = None

    def add(self, record: StepRecord) -> None:
        self.records[record.step] = record

    def record(self, t: int) -> StepRecord:
        if t not in self.records:
            raise StoreError(f"no record for step {t}")
        return self.records[t]

    @property
    def total_steps(self) -> int:
        return len(self.records)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def sample_batch(rng: RngState, n: int, batch_size: int, t: int,
                 mode: str = EPOCH_PERMUTATION) -> np.ndarray:
    """Row indices for step t (1-based), deterministic in (rng, t).

    Epoch-permutation mode draws one permutation per epoch and hands out
    consecutive slices, so every row appears exactly once per epoch (the last
    batch of an epoch may be short). With-replacement mode draws batch_size
    i.i.d. rows.
    """
    if batch_size > n:
        raise ParameterError(f"batch_size {batch_size} > dataset size {n}")
    if t < 1:
        raise ParameterError("steps are 1-based")
    if mode == WITH_REPLACEMENT:
        g = rng.derive(t).generator()
        return g.integers(0, n, size=batch_size, dtype=np.int64)
    if mode != EPOCH_PERMUTATION:
        raise ParameterError(f"unknown shuffle mode {mode!r}")
    per_epoch = steps_per_epoch(n, batch_size)
    epoch, pos = divmod(t - 1, per_epoch)
    perm = rng.derive(epoch).generator().permutation(n)
    return perm[pos * batch_size:min((pos + 1) * batch_size, n)].astype(np.int64)


def sgd_step(params: M.ParamVector, x: np.ndarray, y: np.ndarray,
             lr: float) -> M.ParamVector:
    """theta - lr * mean per-sample gradient; the input params are untouched."""
    if np.atleast_2d(x).shape[0] == 0:
        raise ParameterError("sgd_step on an empty batch")
    grad = M.batch_grad(params, x, y)
    return M.ParamVector(params.flat - lr * grad, params.spec)


STORE_FULL = "full"
STORE_LIGHT = "light"  # records lr/batch/loss but not the parameter snapshots


def run_training(dataset: Dataset, spec: M.ModelSpec, config: TrainConfig,
                 hooks=(), store: str = STORE_FULL,
                 batch_schedule=None) -> TrajectoryStore:
    """Run T steps of SGD and return the trajectory store.

    `batch_schedule`, when given, is a list of T id-arrays that overrides the
    sampler (the leave-one-out baseline uses this to replay a run with one
    sample removed). Hook exceptions abort the run with the failing step.
    """
    if store not in (STORE_FULL, STORE_LIGHT):
        raise ConfigError(f"unknown store mode {store!r}")
    if batch_schedule is not None and len(batch_schedule) != config.total_steps:
        raise ConfigError(
            f"batch schedule has {len(batch_schedule)} entries for {config.total_steps} steps")
    if dataset.n == 0:
        raise ParameterError("cannot train on an empty dataset")

    on_start, on_step, on_end = [], [], []
    for h in hooks:
        if callable(h) and not hasattr(h, "on_step"):
            on_step.append(h)
            continue
        if hasattr(h, "on_run_start"):
            on_start.append(h.on_run_start)
        if hasattr(h, "on_step"):
            on_step.append(h.on_step)
        if hasattr(h, "on_run_end"):
            on_end.append(h.on_run_end)

    params = M.init_params(spec, config.effective_init_rng())
    batch_rng = config.effective_batch_rng()
    result = TrajectoryStore()

    for fn in on_start:
        try:
            fn(params)
        except Exception as e:
            raise HookError(0, str(e)) from e

    for t in range(1, config.total_steps + 1):
        if batch_schedule is not None:
            ids = np.asarray(batch_schedule[t - 1], dtype=np.int64)
            rows = dataset.rows_of(ids)
        else:
            rows = sample_batch(batch_rng, dataset.n, config.batch_size, t, config.shuffle)
            ids = dataset.ids[rows]
        if len(rows) == 0:
            raise ParameterError(f"empty batch at step {t}")
        x, y = dataset.features[rows], dataset.labels[rows]
        lr = config.schedule.at(t)
        new_params = sgd_step(params, x, y, lr)
        loss = M.batch_loss(new_params, x, y)
        record = StepRecord(step=t,
                            params_before=params if store == STORE_FULL else None,
                            lr=lr, batch=ids.copy(), batch_loss=loss)
        result.add(record)
        for fn in on_step:
            try:
                fn(record, new_params)
            except Exception as e:
                raise HookError(t, str(e)) from e
        params = new_params

    result.final_params = params
    for fn in on_end:
        try:
            fn(result)
        except Exception as e:
            raise HookError(config.total_steps, str(e)) from e
    return result


def save_trajectory(store: TrajectoryStore, directory) -> None:
    """Checkpoint layout: steps/<t>.bin + steps/<t>.json, final.bin, meta.json."""
    if store.final_params is None:
        raise StoreError("cannot save an incomplete trajectory")
    steps_dir = os.path.join(directory, "steps")
    os.makedirs(steps_dir, exist_ok=True)
    for t, rec in sorted(store.records.items()):
        if rec.params_before is None:
            raise StoreError(f"step {t} has no stored parameters (light store)")
        M.save_params(rec.params_before, os.path.join(steps_dir, f"{t}.bin"))
        with open(os.path.join(steps_dir, f"{t}.json"), "w", encoding="utf-8") as f:
            json.dump({"lr": rec.lr, "batch": [int(i) for i in rec.batch],
                       "loss": rec.batch_loss}, f, sort_keys=True)
            f.write("\n")
    M.save_params(store.final_params, os.path.join(directory, "final.bin"))
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump({"spec": store.final_params.spec.to_dict(),
                   "total_steps": store.total_steps}, f, indent=2, sort_keys=True)
        f.write("\n")


def load_trajectory(directory) -> TrajectoryStore:
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    spec = M.ModelSpec.from_dict(meta["spec"])
    store = TrajectoryStore()
    for t in range(1, meta["total_steps"] + 1):
        params = M.load_params(os.path.join(directory, "steps", f"{t}.bin"), spec)
        with open(os.path.join(directory, "steps", f"{t}.json"), encoding="utf-8") as f:
            side = json.load(f)
        store.add(StepRecord(step=t, params_before=params, lr=side["lr"],
                             batch=np.asarray(side["batch"], dtype=np.int64),
                             batch_loss=side["loss"]))
    store.final_params = M.load_params(os.path.join(directory, "final.bin"), spec)
    return store
