"""Parameter-space data valuation.

A sample's step value compares two distances to a reference parameter state:
the distance from where the step started, and the distance that would remain
if only that sample's gradient had been applied. The normalized ratio

    v = (||d_ref|| - ||u||) / (||d_ref|| + ||u||)

is positive when the sample pulled the model toward the reference, negative
when it pushed away, and always inside [-1, 1].

Two engines produce these values:

* `basic_valuate` replays a fully stored trajectory against the final
  parameters as a static reference.
* `AdaptiveValuator` runs as a training hook. Each step t picks a near-future
  reference step t_ref = min(t-1+delta, T); the pending (t, t_ref) pair sits
  in a reference queue until training reaches t_ref, at which point the
  sample gradients of batch t are recomputed from a bounded model queue and
  the values land in the ledger. The look-ahead window delta widens while the
  loss is moving fast and shrinks near convergence.

`volatility_probe` re-runs training across seeds and checks the empirical
spread of each step value against the 2*lr*G/||d_ref|| stability bound.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from .dataio import Dataset
from .errors import ParameterError, StoreError
from .numkit import RngState
from .trainer import (STORE_LIGHT, StepRecord, TrainConfig, TrajectoryStore,
                      run_training)

DENOM_SYMMETRIC = "symmetric"
DENOM_DELTA_ONLY = "delta-only"

LOSS_RATE_ONLINE = "online"
LOSS_RATE_DEFERRED = "deferred"


def step_value(delta_theta_norm: float, u_norm: float,
               denominator: str = DENOM_SYMMETRIC) -> float:
    """Normalized improvement toward the reference point.

    Both norms must be non-negative. When both are zero (reference equals the
    pre-step parameters and the gradient vanished) the value is defined as 0.
    The delta-only denominator variant divides by ||d_ref|| alone; it is kept
    for comparison and is not bounded below.
    """
    if not (delta_theta_norm >= 0.0) or not (u_norm >= 0.0):
        raise ParameterError(
            f"norms must be >= 0, got ({delta_theta_norm}, {u_norm})")
    if delta_theta_norm == 0.0 and u_norm == 0.0:
        return 0.0
    if denominator == DENOM_SYMMETRIC:
        return (delta_theta_norm - u_norm) / (delta_theta_norm + u_norm)
    if denominator == DENOM_DELTA_ONLY:
        if delta_theta_norm == 0.0:
            return 0.0  # the ratio is undefined here; keep exports finite
        return (delta_theta_norm - u_norm) / delta_theta_norm
    raise ParameterError(f"unknown denominator {denominator!r}")


def hypothetical_state(theta_ref: np.ndarray, theta_prev: np.ndarray,
                       lr: float, grad_i: np.ndarray) -> np.ndarray:
    """Residual to the reference after applying only this sample's gradient:
    theta_ref - (theta_prev - lr * grad_i)."""
    theta_ref = np.asarray(theta_ref, dtype=np.float64)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    grad_i = np.asarray(grad_i, dtype=np.float64)
    if not (theta_ref.shape == theta_prev.shape == grad_i.shape):
        raise ParameterError("hypothetical_state shape mismatch")
    return theta_ref - (theta_prev - lr * grad_i)


@dataclass(frozen=True)
class StepValue:
    sample_id: int
    step: int
    value: float


@dataclass(frozen=True)
class StepStats:
    """Per-evaluated-step diagnostics used by the volatility probe."""

    delta_norm: float
    max_grad_norm: float
    lr: float
    window: int | None = None


class ValuationLedger:
    """Append-only step values plus running cumulative totals per sample.

    Every known sample id starts at cumulative 0.0 (a sample that never
    appears in a batch keeps it), and the cumulative map is updated on each
    append, so sum(step values) == sum(cumulative) holds at all times.
    """

    def __init__(self, sample_ids):
        self.step_values: list[StepValue] = []
        self.cumulative: dict[int, float] = {int(i): 0.0 for i in sample_ids}
        self.step_stats: dict[int, StepStats] = {}

    def append(self, sample_id: int, step: int, value: float) -> None:
        sample_id = int(sample_id)
        if sample_id not in self.cumulative:
            raise ParameterError(f"unknown sample id {sample_id}")
        self.step_values.append(StepValue(sample_id, step, float(value)))
        self.cumulative[sample_id] += float(value)

    def snapshot_cumulative(self) -> dict:
        return dict(self.cumulative)

    def values_of(self, sample_id: int) -> list:
        return [sv for sv in self.step_values if sv.sample_id == int(sample_id)]

    def write_step_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "step", "value"])
            for sv in self.step_values:
                w.writerow([sv.sample_id, sv.step, repr(sv.value)])

    def write_cumulative_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "cumulative"])
            for sid in sorted(self.cumulative):
                w.writerow([sid, repr(self.cumulative[sid])])


@dataclass(frozen=True)
class WindowState:
    """Look-ahead window size with its adaptation bounds and thresholds."""

    delta: int
    delta_min: int = 1
    delta_max: int = 50
    delta_step: int = 1
    eps_min: float = 0.005
    eps_max: float = 0.05
    loss_rate: float = math.nan

    def __post_init__(self):
        if self.delta_min < 1:
            raise ParameterError("delta_min must be >= 1")
        if not (self.delta_min <= self.delta <= self.delta_max):
            raise ParameterError(
                f"delta={self.delta} outside [{self.delta_min}, {self.delta_max}]")
        if self.delta_step < 1:
            raise ParameterError("delta_step must be >= 1")
        if not (0 <= self.eps_min <= self.eps_max):
            raise ParameterError("need 0 <= eps_min <= eps_max")


def window_update(state: WindowState, loss_rate: float) -> WindowState:
    """Grow the window while the loss moves fast, shrink it when it stalls."""
    magnitude = abs(loss_rate)
    if magnitude > state.eps_max:
        delta = min(state.delta + state.delta_step, state.delta_max)
    elif magnitude < state.eps_min:
        delta = max(state.delta - state.delta_step, state.delta_min)
    else:
        delta = state.delta
    return replace(state, delta=delta, loss_rate=float(loss_rate))


def reference_step(t: int, delta_prev: int, total_steps: int) -> int:
    """Reference step for evaluation step t: min(t-1+delta, T)."""
    return min(t - 1 + delta_prev, total_steps)


def basic_valuate(store: TrajectoryStore, dataset: Dataset,
                  denominator: str = DENOM_SYMMETRIC) -> ValuationLedger:
    """Value every batched sample of a stored run against the final parameters.

    Needs a full store (parameter snapshots at every step); per-sample
    gradients are recomputed at theta_{t-1}, the hypothetical state is formed
    against theta_T, and values accumulate per the running-sum definition.
    """
    if store.final_params is None:
        raise StoreError("trajectory store has no final parameters")
    theta_star = store.final_params.flat
    spec = store.final_params.spec
    ledger = ValuationLedger(dataset.ids)
    for t in sorted(store.records):
        rec = store.record(t)
        if rec.params_before is None:
            raise StoreError(f"step {t} has no stored parameters (light store)")
        theta_prev = rec.params_before.flat
        rows = dataset.rows_of(rec.batch)
        grads = M.per_sample_grads(rec.params_before,
                                   dataset.features[rows], dataset.labels[rows])
        delta_theta = theta_star - theta_prev
        delta_norm = float(np.sqrt(np.dot(delta_theta, delta_theta)))
        u = delta_theta[None, :] + rec.lr * grads
        u_norms = np.sqrt((u * u).sum(axis=1))
        grad_norms = np.sqrt((grads * grads).sum(axis=1))
        for sid, un in zip(rec.batch, u_norms):
            ledger.append(int(sid), t, step_value(delta_norm, float(un), denominator))
        ledger.step_stats[t] = StepStats(delta_norm=delta_norm,
                                         max_grad_norm=float(grad_norms.max()),
                                         lr=rec.lr, window=None)
    return ledger


@dataclass(frozen=True)
class ValuationParams:
    """Adaptive-engine settings; defaults sized for desk-scale loss curves."""

    delta0: int = 10
    delta_min: int = 1
    delta_max: int = 50
    delta_step: int = 1
    eps_min: float = 0.005
    eps_max: float = 0.05
    denominator: str = DENOM_SYMMETRIC
    loss_rate_mode: str = LOSS_RATE_ONLINE

    def __post_init__(self):
        if self.denominator not in (DENOM_SYMMETRIC, DENOM_DELTA_ONLY):
            raise ParameterError(f"unknown denominator {self.denominator!r}")
        if self.loss_rate_mode not in (LOSS_RATE_ONLINE, LOSS_RATE_DEFERRED):
            raise ParameterError(f"unknown loss_rate mode {self.loss_rate_mode!r}")
        WindowState(delta=self.delta0, delta_min=self.delta_min,
                    delta_max=self.delta_max, delta_step=self.delta_step,
                    eps_min=self.eps_min, eps_max=self.eps_max)

    def initial_window(self) -> WindowState:
        return WindowState(delta=self.delta0, delta_min=self.delta_min,
                           delta_max=self.delta_max, delta_step=self.delta_step,
                           eps_min=self.eps_min, eps_max=self.eps_max)

    def to_dict(self) -> dict:
        return {"delta0": self.delta0, "delta_min": self.delta_min,
                "delta_max": self.delta_max, "delta_step": self.delta_step,
                "eps_min": self.eps_min, "eps_max": self.eps_max,
                "denominator": self.denominator,
                "loss_rate_mode": self.loss_rate_mode}


@dataclass
class _QueueEntry:
    theta: np.ndarray
    batch: np.ndarray | None
    lr: float
    loss: float


@dataclass(frozen=True)
class _PendingPair:
    t_eval: int
    t_ref: int
    window: int  # delta in force when the pair was created


class AdaptiveValuator:
    """Training hook implementing the adaptive-reference dual-queue engine.

    The model queue maps step -> (theta_t, batch, lr, loss) for the sliding
    window [t - delta_max, t] (plus the initial parameters at step 0 until
    they age out); the reference queue holds (t_eval, t_ref) pairs waiting for
    training to reach t_ref. Per step, in order: store the new state, enqueue
    this step's pair, adapt the window from the loss rate, resolve every pair
    whose reference is the current step (ascending t_eval for deterministic
    ledgers), then evict anything older than the window.
    """

    def __init__(self, dataset: Dataset, total_steps: int,
                 params: ValuationParams | None = None):
        self.dataset = dataset
        self.total_steps = int(total_steps)
        self.params = params or ValuationParams()
        self.window = self.params.initial_window()
        self.window_history: list[int] = [self.window.delta]  # index t -> delta_t
        self.ledger = ValuationLedger(dataset.ids)
        self.model_queue: "OrderedDict[int, _QueueEntry]" = OrderedDict()
        self.ref_queue: list[_PendingPair] = []
        self.queue_sizes: list[tuple] = []  # (|model_queue|, |ref_queue|) per step
        self.last_step = 0
        self._started = False

    # -- hook protocol ----------------------------------------------------

    def on_run_start(self, params0: M.ParamVector) -> None:
        # theta_0 must be reachable for pairs with t_eval = 1
        self.model_queue[0] = _QueueEntry(theta=params0.flat, batch=None,
                                          lr=0.0, loss=math.nan)
        self._spec = params0.spec
        self._started = True

    def on_step(self, record: StepRecord, params_after: M.ParamVector) -> None:
        if not self._started:
            raise ParameterError("on_run_start was never called (missing theta_0)")
        t = record.step
        if t != self.last_step + 1:
            raise ParameterError(f"steps must arrive in order, got {t} after {self.last_step}")
        self.last_step = t

        self.model_queue[t] = _QueueEntry(theta=params_after.flat, batch=record.batch,
                                          lr=record.lr, loss=record.batch_loss)

        t_ref = reference_step(t, self.window.delta, self.total_steps)
        self.ref_queue.append(_PendingPair(t_eval=t, t_ref=t_ref, window=self.window.delta))

        if self.params.loss_rate_mode == LOSS_RATE_ONLINE:
            # (L_t - L_{t-1}) / delta_{t-1}; step 1 has no previous loss
            prev = self.model_queue.get(t - 1)
            if prev is not None and not math.isnan(prev.loss):
                rate = (record.batch_loss - prev.loss) / self.window.delta
                self.window = window_update(self.window, rate)
        self.window_history.append(self.window.delta)

        self._resolve_pairs_at(t)
        self._evict(t)
        self.queue_sizes.append((len(self.model_queue), len(self.ref_queue)))

    def on_run_end(self, store: TrajectoryStore) -> None:
        if self.ref_queue:  # happens when total_steps exceeds the trained steps
            raise ParameterError(
                f"{len(self.ref_queue)} reference pairs still pending after the "
                f"run; was total_steps={self.total_steps} larger than the "
                f"trainer's step count?")

    # -- internals ---------------------------------------------------------

    def _resolve_pairs_at(self, t: int) -> None:
        due = sorted((p for p in self.ref_queue if p.t_ref == t),
                     key=lambda p: p.t_eval)
        if not due:
            return
        theta_ref = self.model_queue[t].theta
        for pair in due:
            entry = self.model_queue.get(pair.t_eval)
            prev = self.model_queue.get(pair.t_eval - 1)
            assert entry is not None and prev is not None, \
                f"model queue evicted state needed for pair {pair}"
            self._score(pair.t_eval, theta_ref, prev.theta, entry, pair.window)
            if self.params.loss_rate_mode == LOSS_RATE_DEFERRED \
                    and not math.isnan(prev.loss):
                # future-referencing rate: (L_ref - L_{t_eval-1}) / window
                rate = (self.model_queue[t].loss - prev.loss) / pair.window
                self.window = window_update(self.window, rate)
        resolved = {p.t_eval for p in due}
        self.ref_queue = [p for p in self.ref_queue if p.t_eval not in resolved]

    def _score(self, t_eval: int, theta_ref, theta_prev, entry: _QueueEntry,
               window: int) -> None:
        rows = self.dataset.rows_of(entry.batch)
        grads = M.per_sample_grads(M.ParamVector(theta_prev, self._spec),
                                   self.dataset.features[rows],
                                   self.dataset.labels[rows])
        delta_theta = theta_ref - theta_prev
        delta_norm = float(np.sqrt(np.dot(delta_theta, delta_theta)))
        u = delta_theta[None, :] + entry.lr * grads
        u_norms = np.sqrt((u * u).sum(axis=1))
        grad_norms = np.sqrt((grads * grads).sum(axis=1))
        for sid, un in zip(entry.batch, u_norms):
            self.ledger.append(int(sid), t_eval,
                               step_value(delta_norm, float(un), self.params.denominator))
        self.ledger.step_stats[t_eval] = StepStats(
            delta_norm=delta_norm, max_grad_norm=float(grad_norms.max()),
            lr=entry.lr, window=window)

    def _evict(self, t: int) -> None:
        cutoff = t - self.window.delta_max
        for step in [s for s in self.model_queue if s < cutoff]:
            del self.model_queue[step]
        self.ref_queue = [p for p in self.ref_queue if p.t_ref >= t]

    # -- live reporting ----------------------------------------------------

    @property
    def pending_pairs(self) -> int:
        return len(self.ref_queue)

    def provisional_cumulative(self) -> dict:
        """Cumulative values as of now, with pending pairs scored against the
        latest parameters (provisional; the pairs stay queued)."""
        totals = self.ledger.snapshot_cumulative()
        if not self.ref_queue or self.last_step == 0:
            return totals
        theta_now = self.model_queue[self.last_step].theta
        for pair in sorted(self.ref_queue, key=lambda p: p.t_eval):
            entry = self.model_queue[pair.t_eval]
            prev = self.model_queue[pair.t_eval - 1]
            rows = self.dataset.rows_of(entry.batch)
            grads = M.per_sample_grads(M.ParamVector(prev.theta, self._spec),
                                       self.dataset.features[rows],
                                       self.dataset.labels[rows])
            delta_theta = theta_now - prev.theta
            delta_norm = float(np.sqrt(np.dot(delta_theta, delta_theta)))
            u = delta_theta[None, :] + entry.lr * grads
            u_norms = np.sqrt((u * u).sum(axis=1))
            for sid, un in zip(entry.batch, u_norms):
                totals[int(sid)] += step_value(delta_norm, float(un),
                                               self.params.denominator)
        return totals


# -- volatility probe -------------------------------------------------------


@dataclass(frozen=True)
class PairVolatility:
    sample_id: int
    step: int
    sigma: float
    bound: float        # stated bound 2 * lr * G_hat / min ||d_ref||
    bound_tight: float  # the tighter lr * G_hat / min ||d_ref|| variant
    n_observations: int


@dataclass
class VolatilityReport:
    pairs: list
    n_skipped: int
    violations: list
    per_step_max_sigma: dict  # step -> max sigma over samples
    max_grad_norm: float

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def volatility_probe(dataset: Dataset, spec: M.ModelSpec, config: TrainConfig,
                     seeds, valuation: ValuationParams | None = None,
                     engine: str = "adaptive", vary: str = "init") -> VolatilityReport:
    """Measure the seed-to-seed spread of step values against the stability bound.

    Each seed re-runs training; `vary` picks which stream the seed replaces
    ("init", "batches", or "both"; the rest stays pinned to the base config).
    For every (sample, step) observed in at least two runs, the empirical std
    is compared to 2 * lr_t * G_hat / min_r ||d_ref_t||, with G_hat the largest
    per-sample gradient norm seen anywhere and the minimum taken across runs
    at that step. Pairs seen fewer than twice are skipped and counted.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ParameterError("volatility probe needs at least 2 seeds")
    if vary not in ("init", "batches", "both"):
        raise ParameterError(f"unknown vary mode {vary!r}")
    if engine not in ("adaptive", "basic"):
        raise ParameterError(f"unknown engine {engine!r}")

    ledgers = []
    for seed in seeds:
        seed_rng = RngState(seed)
        init_rng = config.effective_init_rng() if vary == "batches" else seed_rng.derive(1)
        batch_rng = config.effective_batch_rng() if vary == "init" else seed_rng.derive(2)
        run_config = replace(config, init_rng=init_rng, batch_rng=batch_rng)
        if engine == "adaptive":
            valuator = AdaptiveValuator(dataset, run_config.total_steps, valuation)
            run_training(dataset, spec, run_config, hooks=[valuator], store=STORE_LIGHT)
            ledgers.append(valuator.ledger)
        else:
            store = run_training(dataset, spec, run_config)
            denom = (valuation or ValuationParams()).denominator
            ledgers.append(basic_valuate(store, dataset, denominator=denom))

    g_hat = max(st.max_grad_norm for led in ledgers for st in led.step_stats.values())
    min_delta = {}
    for led in ledgers:
        for t, st in led.step_stats.items():
            min_delta[t] = min(min_delta.get(t, math.inf), st.delta_norm)

    observed = {}
    for led in ledgers:
        for sv in led.step_values:
            observed.setdefault((sv.sample_id, sv.step), []).append(sv.value)

    pairs, violations = [], []
    n_skipped = 0
    per_step_max = {}
    for (sid, t), values in sorted(observed.items()):
        if len(values) < 2:
            n_skipped += 1
            continue
        # identical observations have exactly zero spread; np.std would
        # report summation noise (~1e-17) instead
        sigma = 0.0 if min(values) == max(values) else float(np.std(values, ddof=1))
        lr_t = config.schedule.at(t)
        dmin = min_delta[t]
        bound = math.inf if dmin == 0 else 2.0 * lr_t * g_hat / dmin
        pair = PairVolatility(sid, t, sigma, bound, bound / 2.0, len(values))
        pairs.append(pair)
        if sigma > bound:
            violations.append(pair)
        per_step_max[t] = max(per_step_max.get(t, 0.0), sigma)

    return VolatilityReport(pairs=pairs, n_skipped=n_skipped, violations=violations,
                            per_step_max_sigma=per_step_max, max_grad_norm=g_hat)
