"""Reference valuation methods: leave-one-out retraining, influence
functions, and per-sample gradient norms over early checkpoints.

These exist to be compared against, so each call reports its own wall time
and peak memory alongside the values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .dataio import Dataset
from .errors import ConfigError, ParameterError, SolverError
from .meters import ResourceMeter
from .trainer import (EPOCH_PERMUTATION, TrainConfig, TrajectoryStore,
                      run_training, steps_per_epoch)

METHOD_LOO = "loo"
METHOD_IF = "if"
METHOD_GRADND = "gradnd"


@dataclass
class BaselineResult:
    method: str
    values: dict           # sample id -> value
    wall_time_s: float
    peak_memory_bytes: int
    extras: dict | None = None  # solver stats, checkpoint steps, test-batch ids


def _check_pool(dataset: Dataset, pool) -> list:
    pool = [int(i) for i in pool]
    known = set(int(i) for i in dataset.ids)
    for sid in pool:
        if sid not in known:
            raise ParameterError(f"pool sample {sid} not in dataset")
    return pool


def _full_batch_schedule(dataset: Dataset, config: TrainConfig,
                         drop_id: int | None = None):
    """The epoch-permutation batch schedule as id lists, optionally with one
    sample removed (later ids backfill, chunk boundaries shift)."""
    if config.shuffle != EPOCH_PERMUTATION:
        raise ConfigError("leave-one-out replay is defined for epoch-permutation sampling")
    rng = config.effective_batch_rng()
    n_kept = dataset.n - (1 if drop_id is not None else 0)
    per_epoch = steps_per_epoch(n_kept, config.batch_size)
    schedule = []
    epoch = 0
    while len(schedule) < config.total_steps:
        perm = rng.derive(epoch).generator().permutation(dataset.n)
        ordered = [int(dataset.ids[r]) for r in perm]
        if drop_id is not None:
            ordered = [i for i in ordered if i != drop_id]
        for pos in range(per_epoch):
            if len(schedule) >= config.total_steps:
                break
            chunk = ordered[pos * config.batch_size:(pos + 1) * config.batch_size]
            if chunk:
                schedule.append(chunk)
        epoch += 1
    return schedule


def _subset_without(dataset: Dataset, drop_id: int) -> Dataset:
    keep = dataset.ids != drop_id
    return Dataset(dataset.features[keep], dataset.labels[keep],
                   dataset.ids[keep], dataset.corruption_mask[keep],
                   dataset.n_classes)


def loo_values(dataset: Dataset, spec: M.ModelSpec, config: TrainConfig,
               pool) -> BaselineResult:
    """Marginal loss contribution by retraining without each pool sample.

    Both the full model and each retrained model use the same init and the
    same epoch permutations; removing a sample only deletes it from the
    permutation stream before batching, so the two runs differ exactly by
    that sample. Values are loss(without i) - loss(full), both evaluated on
    the complete dataset at the final parameters.
    """
    pool = _check_pool(dataset, pool)
    with ResourceMeter() as meter:
        full_schedule = _full_batch_schedule(dataset, config)
        full_store = run_training(dataset, spec, config, store="light",
                                  batch_schedule=full_schedule)
        base_loss = M.batch_loss(full_store.final_params, dataset.features, dataset.labels)
        values = {}
        for sid in pool:
            schedule = _full_batch_schedule(dataset, config, drop_id=sid)
            subset = _subset_without(dataset, sid)
            store = run_training(subset, spec, config, store="light",
                                 batch_schedule=schedule)
            loss = M.batch_loss(store.final_params, dataset.features, dataset.labels)
            values[sid] = float(loss - base_loss)
    return BaselineResult(METHOD_LOO, values, meter.wall_time_s, meter.peak_rss_bytes,
                          extras={"base_loss": base_loss})


def conjugate_gradient(matvec, b: np.ndarray, tol: float = 1e-6,
                       max_iter: int = 200):
    """Solve A x = b for symmetric positive-definite A given only matvec.

    Returns (x, {"iterations", "residual"}). Raises SolverError when the
    relative residual is still above tol after max_iter iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.sqrt(np.dot(b, b)))
    if b_norm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "residual": 0.0}
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.dot(r, r))
    for it in range(1, max_iter + 1):
        ap = matvec(p)
        denom = float(np.dot(p, ap))
        if denom <= 0 or not math.isfinite(denom):
            raise SolverError(
                f"CG breakdown at iteration {it}: p.Ap = {denom} "
                f"(operator not positive definite; try a larger damping)")
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.dot(r, r))
        if math.sqrt(rs_new) <= tol * b_norm:
            return x, {"iterations": it, "residual": math.sqrt(rs_new) / b_norm}
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverError(
        f"CG did not converge in {max_iter} iterations "
        f"(relative residual {math.sqrt(rs) / b_norm:.3e} > tol {tol:g})")


def influence_values(dataset: Dataset, spec: M.ModelSpec, config: TrainConfig,
                     pool, test_rows=None, test_grad=None, damping: float = 0.01,
                     cg_tol: float = 1e-6, cg_max_iter: int = 200,
                     store: TrajectoryStore | None = None,
                     test_batch_size: int = 64) -> BaselineResult:
    """Influence-function values: -<s, grad_i> with (H + damping*I) s = grad_test.

    H is the full-dataset mean Hessian at the final parameters, applied via
    Hessian-vector products inside conjugate gradient. The test gradient
    defaults to the mean gradient over a held-out batch of clean (unmasked)
    samples drawn from a dedicated stream; `test_rows` picks that batch
    explicitly and `test_grad` overrides the gradient itself.
    """
    if damping <= 0:
        raise ParameterError("damping must be > 0")
    pool = _check_pool(dataset, pool)
    with ResourceMeter() as meter:
        if store is None or store.final_params is None:
            store = run_training(dataset, spec, config, store="light")
        theta = store.final_params

        if test_grad is None:
            if test_rows is None:
                clean = np.flatnonzero(~dataset.corruption_mask)
                if len(clean) == 0:
                    raise ParameterError("no clean samples to build a test batch from")
                g = config.rng.derive(777).generator()
                take = min(test_batch_size, len(clean))
                test_rows = np.sort(g.choice(clean, size=take, replace=False))
            test_rows = np.asarray(test_rows, dtype=np.int64)
            test_grad = M.batch_grad(theta, dataset.features[test_rows],
                                     dataset.labels[test_rows])
        else:
            test_grad = np.asarray(test_grad, dtype=np.float64)
            test_rows = np.asarray([], dtype=np.int64)

        def matvec(v):
            hv = M.hessian_vector_product(theta, dataset.features, dataset.labels, v)
            return hv + damping * v

        s, stats = conjugate_gradient(matvec, test_grad, tol=cg_tol,
                                      max_iter=cg_max_iter)
        rows = dataset.rows_of(pool)
        grads = M.per_sample_grads(theta, dataset.features[rows], dataset.labels[rows])
        raw = -(grads @ s)
        values = {sid: float(v) for sid, v in zip(pool, raw)}
    return BaselineResult(METHOD_IF, values, meter.wall_time_s, meter.peak_rss_bytes,
                          extras={"cg": stats, "damping": damping,
                                  "test_rows": [int(r) for r in test_rows]})


def gradnorm_values(dataset: Dataset, spec: M.ModelSpec, config: TrainConfig,
                    pool, checkpoint_steps=None,
                    store: TrajectoryStore | None = None) -> BaselineResult:
    """Mean per-sample gradient norm over checkpoint parameters.

    Checkpoints default to every step of the first epoch. theta_t is read
    from the stored trajectory (params_before of step t+1, or the final
    parameters for t = T); a full store is trained on demand.
    """
    pool = _check_pool(dataset, pool)
    with ResourceMeter() as meter:
        if store is None:
            store = run_training(dataset, spec, config, store="full")
        if checkpoint_steps is None:
            checkpoint_steps = list(range(1, min(steps_per_epoch(dataset.n, config.batch_size),
                                                 store.total_steps) + 1))
        checkpoint_steps = sorted(int(t) for t in checkpoint_steps)
        rows = dataset.rows_of(pool)
        x, y = dataset.features[rows], dataset.labels[rows]
        totals = np.zeros(len(pool))
        for t in checkpoint_steps:
            if t == store.total_steps:
                params = store.final_params
            else:
                params = store.record(t + 1).params_before
            grads = M.per_sample_grads(params, x, y)
            totals += np.sqrt((grads * grads).sum(axis=1))
        totals /= len(checkpoint_steps)
        values = {sid: float(v) for sid, v in zip(pool, totals)}
    return BaselineResult(METHOD_GRADND, values, meter.wall_time_s,
                          meter.peak_rss_bytes,
                          extras={"checkpoint_steps": checkpoint_steps})
