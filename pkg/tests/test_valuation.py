import numpy as np
import pytest

from refval import (AdaptiveValuator, LrSchedule, ModelSpec, ParamVector,
                    RngState, TrainConfig, ValuationParams, WindowState,
                    basic_valuate, hypothetical_state, reference_step,
                    run_training, step_value, synth_gaussian_blobs,
                    volatility_probe, window_update)
from refval.dataio import Dataset
from refval.errors import ParameterError, StoreError
from refval.trainer import StepRecord, TrajectoryStore
from refval.valuation import (DENOM_DELTA_ONLY, LOSS_RATE_DEFERRED,
                              ValuationLedger)


def scalar_dataset(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)[:, None]
    ys = np.asarray(ys, dtype=np.int64)
    return Dataset(xs, ys, np.arange(len(ys), dtype=np.int64),
                   np.zeros(len(ys), dtype=bool), max(int(ys.max()) + 1, 1))


SCALAR_SPEC = ModelSpec((1, 1), loss="mse", bias=False)


# -- step_value -----------------------------------------------------------------


def test_step_value_direct():
    assert step_value(5.0, 3.0) == pytest.approx(0.25)  # (5-3)/(5+3)
    assert step_value(1.0, 1.0) == 0.0
    assert step_value(2.5, 0.0) == 1.0
    assert step_value(0.0, 2.5) == -1.0
    assert step_value(0.0, 0.0) == 0.0


def test_step_value_rejects_negative_and_nan():
    with pytest.raises(ParameterError):
        step_value(-1.0, 0.5)
    with pytest.raises(ParameterError):
        step_value(0.5, -1.0)
    with pytest.raises(ParameterError):
        step_value(float("nan"), 0.5)


def test_step_value_antisymmetric():
    g = np.random.default_rng(0)
    for _ in range(2000):
        a, b = g.random(2) * 10.0 ** int(g.integers(-6, 7))
        assert step_value(a, b) == -step_value(b, a)


def test_step_value_bounded_fuzz():
    g = np.random.default_rng(1)
    for _ in range(10_000):
        a = g.random() * 10.0 ** int(g.integers(-12, 13))
        b = g.random() * 10.0 ** int(g.integers(-12, 13))
        v = step_value(a, b)
        assert -1.0 <= v <= 1.0


def test_step_value_delta_only_variant():
    assert step_value(5.0, 3.0, DENOM_DELTA_ONLY) == pytest.approx(0.4)
    assert step_value(1.0, 3.0, DENOM_DELTA_ONLY) == pytest.approx(-2.0)  # unbounded below
    assert step_value(0.0, 0.0, DENOM_DELTA_ONLY) == 0.0
    assert step_value(0.0, 2.0, DENOM_DELTA_ONLY) == 0.0  # degenerate rule


# -- hypothetical_state -----------------------------------------------------------


def test_hypothetical_state_zero_grad_is_delta_theta():
    ref, prev = np.array([4.0, 3.0]), np.array([0.0, 0.0])
    u = hypothetical_state(ref, prev, 0.5, np.zeros(2))
    assert np.array_equal(u, ref - prev)


def test_hypothetical_state_worked_example():
    # d_ref = (4,3), lr*grad = (4,0)  ->  u = (0,3)... wait: u = d_ref + lr*grad
    ref = np.array([4.0, 3.0])
    prev = np.zeros(2)
    u = hypothetical_state(ref, prev, 1.0, np.array([-4.0, 0.0]))
    assert np.array_equal(u, np.array([0.0, 3.0]))
    assert step_value(np.linalg.norm(ref - prev), np.linalg.norm(u)) == \
        pytest.approx(0.25)  # (5-3)/(5+3), same oracle arithmetic as above


def test_hypothetical_state_reverse_triangle_fuzz():
    g = np.random.default_rng(2)
    for _ in range(2000):
        n = int(g.integers(1, 20))
        ref, prev, grad = g.standard_normal((3, n))
        lr = float(g.random())
        u = hypothetical_state(ref, prev, lr, grad)
        gap = abs(np.linalg.norm(u) - np.linalg.norm(ref - prev))
        assert gap <= lr * np.linalg.norm(grad) + 1e-12


def test_hypothetical_state_shape_mismatch():
    with pytest.raises(ParameterError):
        hypothetical_state(np.zeros(3), np.zeros(2), 0.1, np.zeros(3))


# -- window adaptation --------------------------------------------------------------


def test_window_update_branches():
    w = WindowState(delta=5, delta_min=1, delta_max=10, delta_step=1,
                    eps_min=0.005, eps_max=0.05)
    assert window_update(w, 0.06).delta == 6       # fast loss change: grow
    assert window_update(w, -0.06).delta == 6      # magnitude matters, not sign
    assert window_update(w, 0.001).delta == 4      # stalled: shrink
    assert window_update(w, 0.02).delta == 5       # steady: hold


def test_window_update_respects_bounds():
    top = WindowState(delta=10, delta_max=10, eps_max=0.05)
    assert window_update(top, 1.0).delta == 10
    bottom = WindowState(delta=1, delta_min=1, eps_min=0.005)
    assert window_update(bottom, 0.0).delta == 1


def test_window_state_validation():
    with pytest.raises(ParameterError):
        WindowState(delta=0)
    with pytest.raises(ParameterError):
        WindowState(delta=5, delta_min=6, delta_max=10)
    with pytest.raises(ParameterError):
        WindowState(delta=5, eps_min=0.1, eps_max=0.05)


def test_reference_step():
    assert reference_step(1, 5, 100) == 5
    assert reference_step(98, 5, 100) == 100
    assert reference_step(100, 3, 100) == 100
    assert reference_step(7, 1, 100) == 7


# -- ledger ---------------------------------------------------------------------------


def test_ledger_tracks_cumulative():
    led = ValuationLedger([0, 1, 2])
    led.append(0, 1, 0.5)
    led.append(0, 2, -0.25)
    led.append(1, 2, 1.0)
    assert led.cumulative == {0: 0.25, 1: 1.0, 2: 0.0}
    assert sum(sv.value for sv in led.step_values) == \
        pytest.approx(sum(led.cumulative.values()))
    with pytest.raises(ParameterError):
        led.append(9, 1, 0.1)


def test_ledger_csv_export(tmp_path):
    led = ValuationLedger([3, 4])
    led.append(3, 1, 0.125)
    led.write_step_csv(tmp_path / "steps.csv")
    led.write_cumulative_csv(tmp_path / "cum.csv")
    assert (tmp_path / "steps.csv").read_text() == \
        "sample_id,step,value\n3,1,0.125\n"
    assert (tmp_path / "cum.csv").read_text() == \
        "sample_id,cumulative\n3,0.125\n4,0.0\n"


# -- basic (static-reference) engine ---------------------------------------------------


def test_basic_single_step_lands_on_reference():
    # one sample, one step: the hypothetical state IS the final state -> value 1
    ds = scalar_dataset([2.0], [1])
    cfg = TrainConfig(total_steps=1, batch_size=1, schedule=LrSchedule(0.1),
                      rng=RngState(1))
    store = run_training(ds, SCALAR_SPEC, cfg)
    led = basic_valuate(store, ds)
    assert led.cumulative[0] == pytest.approx(1.0)


def test_basic_never_batched_sample_is_zero(small_blobs, logistic_spec):
    target = int(small_blobs.ids[-1])
    schedule = [[i for i in small_blobs.ids[:10]] for _ in range(5)]
    cfg = TrainConfig(total_steps=5, batch_size=10, schedule=LrSchedule(0.3),
                      rng=RngState(2))
    store = run_training(small_blobs, logistic_spec, cfg, batch_schedule=schedule)
    led = basic_valuate(store, small_blobs)
    assert led.cumulative[target] == 0.0
    assert not led.values_of(target)


def test_basic_hand_unrolled_scalar_oracle():
    # independent oracle: unroll the stored trajectory with plain python floats
    ds = scalar_dataset([1.0, 2.0, -1.0], [1, 0, 1])
    cfg = TrainConfig(total_steps=3, batch_size=1, schedule=LrSchedule(0.2),
                      rng=RngState(3))
    store = run_training(ds, SCALAR_SPEC, cfg)
    led = basic_valuate(store, ds)

    theta_star = float(store.final_params.flat[0])
    expected = {}
    for t in range(1, 4):
        rec = store.record(t)
        w = float(rec.params_before.flat[0])
        for sid in rec.batch:
            x, y = float(ds.features[ds.row_of(sid), 0]), float(ds.labels[ds.row_of(sid)])
            grad = x * (w * x - y)
            delta = abs(theta_star - w)
            u = abs(theta_star - (w - rec.lr * grad))
            expected[(int(sid), t)] = 0.0 if delta == u == 0 \
                else (delta - u) / (delta + u)
    got = {(sv.sample_id, sv.step): sv.value for sv in led.step_values}
    assert set(got) == set(expected)
    for key, v in expected.items():
        assert got[key] == pytest.approx(v, abs=1e-12)


def test_basic_zero_gradient_sample_valued_zero():
    # x = 0 makes the sample's mse gradient identically zero
    ds = scalar_dataset([0.0, 1.0], [1, 1])
    cfg = TrainConfig(total_steps=4, batch_size=2, schedule=LrSchedule(0.2),
                      rng=RngState(4))
    store = run_training(ds, SCALAR_SPEC, cfg)
    led = basic_valuate(store, ds)
    values = led.values_of(0)
    assert len(values) == 4
    assert all(sv.value == 0.0 for sv in values)


def test_basic_requires_full_store(small_blobs, small_config, logistic_spec):
    store = run_training(small_blobs, logistic_spec, small_config, store="light")
    with pytest.raises(StoreError):
        basic_valuate(store, small_blobs)


def test_basic_requires_final_params():
    with pytest.raises(StoreError):
        basic_valuate(TrajectoryStore(), scalar_dataset([1.0], [0]))


# -- adaptive dual-queue engine ----------------------------------------------------------


def adaptive_oracle(xs, ys, schedule, w0, lr, delta, total_steps):
    """Unroll the adaptive algorithm with plain python floats and a constant
    window: per step, take the batch-mean step, queue (t, min(t-1+delta, T)),
    resolve pairs whose reference step is now, score with the normalized
    ratio of distances."""
    thetas = {0: w0}
    w = w0
    pending = []
    values = {}
    for t in range(1, total_steps + 1):
        batch = schedule[t - 1]
        grads = [xs[i] * (w * xs[i] - ys[i]) for i in batch]
        w = w - lr * (sum(grads) / len(grads))
        thetas[t] = w
        pending.append((t, min(t - 1 + delta, total_steps)))
        for (tp, tr) in sorted(p for p in pending if p[1] == t):
            prev = thetas[tp - 1]
            ref = thetas[t]
            for i in schedule[tp - 1]:
                gi = xs[i] * (prev * xs[i] - ys[i])
                d = abs(ref - prev)
                u = abs(ref - (prev - lr * gi))
                values[(i, tp)] = 0.0 if d == u == 0 else (d - u) / (d + u)
        pending = [p for p in pending if p[1] != t]
    return values


@pytest.mark.parametrize("delta", [1, 2, 5])
def test_adaptive_matches_scalar_oracle(delta):
    xs, ys = [1.0, 2.0, -1.0], [1.0, 0.0, 1.0]
    ds = scalar_dataset(xs, [int(v) for v in ys])
    schedule = [[0], [1], [2], [0], [1]]
    cfg = TrainConfig(total_steps=5, batch_size=1, schedule=LrSchedule(0.2),
                      rng=RngState(5))
    params = ValuationParams(delta0=delta, delta_min=delta, delta_max=delta)
    valuator = AdaptiveValuator(ds, 5, params)
    store = run_training(ds, SCALAR_SPEC, cfg, hooks=[valuator],
                         batch_schedule=schedule)
    w0 = float(store.record(1).params_before.flat[0])
    expected = adaptive_oracle(xs, ys, schedule, w0, 0.2, delta, 5)
    got = {(sv.sample_id, sv.step): sv.value for sv in valuator.ledger.step_values}
    assert set(got) == set(expected)
    for key, v in expected.items():
        assert got[key] == pytest.approx(v, abs=1e-12)


def test_adaptive_static_equivalence(small_blobs, small_config, logistic_spec):
    params = ValuationParams(delta0=40, delta_min=40, delta_max=40)
    valuator = AdaptiveValuator(small_blobs, small_config.total_steps, params)
    store = run_training(small_blobs, logistic_spec, small_config,
                         hooks=[valuator])
    led = basic_valuate(store, small_blobs)
    a = [(sv.sample_id, sv.step, sv.value) for sv in valuator.ledger.step_values]
    b = [(sv.sample_id, sv.step, sv.value) for sv in led.step_values]
    assert a == b  # identical arithmetic, identical resolution order


def test_adaptive_queue_bounds_and_drain(small_blobs, logistic_spec):
    cfg = TrainConfig(total_steps=60, batch_size=10, schedule=LrSchedule(0.5),
                      rng=RngState(6))
    params = ValuationParams(delta0=4, delta_min=1, delta_max=8)
    valuator = AdaptiveValuator(small_blobs, 60, params)
    run_training(small_blobs, logistic_spec, cfg, hooks=[valuator])
    assert all(mq <= 8 + 1 and rq <= 8 for mq, rq in valuator.queue_sizes)
    assert valuator.pending_pairs == 0
    # every resolved step reports the window that chose its reference
    assert all(1 <= st.window <= 8 for st in valuator.ledger.step_stats.values())
    # every batched appearance valued exactly once
    counts = {}
    for sv in valuator.ledger.step_values:
        key = (sv.sample_id, sv.step)
        counts[key] = counts.get(key, 0) + 1
    assert all(c == 1 for c in counts.values())
    assert len(valuator.ledger.step_values) == 60 * 10


def test_adaptive_window_moves_on_loss_curve(small_blobs, logistic_spec):
    cfg = TrainConfig(total_steps=80, batch_size=10, schedule=LrSchedule(0.5),
                      rng=RngState(7))
    valuator = AdaptiveValuator(small_blobs, 80, ValuationParams())
    run_training(small_blobs, logistic_spec, cfg, hooks=[valuator])
    history = valuator.window_history
    assert len(history) == 81  # delta_0 plus one entry per step
    assert len(set(history)) > 1  # the window actually adapted
    assert all(1 <= d <= 50 for d in history)


def test_adaptive_ledger_conservation(small_blobs, small_config, logistic_spec):
    valuator = AdaptiveValuator(small_blobs, small_config.total_steps,
                                ValuationParams())
    run_training(small_blobs, logistic_spec, small_config, hooks=[valuator])
    led = valuator.ledger
    assert sum(sv.value for sv in led.step_values) == \
        pytest.approx(sum(led.cumulative.values()), rel=1e-12, abs=1e-12)
    assert all(-1.0 <= sv.value <= 1.0 for sv in led.step_values)


def test_adaptive_zero_gradient_sample():
    ds = scalar_dataset([0.0, 1.0], [1, 1])
    cfg = TrainConfig(total_steps=6, batch_size=2, schedule=LrSchedule(0.2),
                      rng=RngState(8))
    valuator = AdaptiveValuator(ds, 6, ValuationParams(delta0=2, delta_min=2,
                                                       delta_max=2))
    run_training(ds, SCALAR_SPEC, cfg, hooks=[valuator])
    assert valuator.ledger.cumulative[0] == 0.0
    assert all(sv.value == 0.0 for sv in valuator.ledger.values_of(0))


def test_adaptive_deferred_loss_rate_mode(small_blobs, small_config, logistic_spec):
    params = ValuationParams(loss_rate_mode=LOSS_RATE_DEFERRED)
    valuator = AdaptiveValuator(small_blobs, small_config.total_steps, params)
    run_training(small_blobs, logistic_spec, small_config, hooks=[valuator])
    assert valuator.pending_pairs == 0
    assert len(valuator.ledger.step_values) == small_config.total_steps * 10
    assert all(1 <= d <= 50 for d in valuator.window_history)


def test_adaptive_provisional_cumulative(small_blobs, logistic_spec):
    cfg = TrainConfig(total_steps=20, batch_size=10, schedule=LrSchedule(0.5),
                      rng=RngState(9))
    params = ValuationParams(delta0=30, delta_min=30, delta_max=30)
    snapshots = {}

    class Probe:
        def on_step(self, record, params_after):
            if record.step == 10:
                snapshots["mid"] = valuator.provisional_cumulative()
                snapshots["pending"] = valuator.pending_pairs

    valuator = AdaptiveValuator(small_blobs, 20, params)
    run_training(small_blobs, logistic_spec, cfg, hooks=[valuator, Probe()])
    # with delta=30 > T no pair resolves before the final step
    assert snapshots["pending"] == 10
    assert any(v != 0.0 for v in snapshots["mid"].values())
    # provisional scoring leaves the real ledger untouched until resolution
    assert len(valuator.ledger.step_values) == 20 * 10


def test_adaptive_requires_ordered_steps(small_blobs):
    valuator = AdaptiveValuator(small_blobs, 5, ValuationParams())
    valuator.on_run_start(ParamVector(np.zeros(12),
                                      ModelSpec((small_blobs.n_features, 2))))
    rec = StepRecord(step=3, params_before=None, lr=0.1,
                     batch=small_blobs.ids[:2], batch_loss=0.5)
    with pytest.raises(ParameterError):
        valuator.on_step(rec, ParamVector(np.zeros(12),
                                          ModelSpec((small_blobs.n_features, 2))))


# -- volatility probe ----------------------------------------------------------------


def probe_config(total_steps=40, lr=LrSchedule(0.4)):
    return TrainConfig(total_steps=total_steps, batch_size=10, schedule=lr,
                       rng=RngState(11))


def test_volatility_deterministic_setup_zero_sigma(small_blobs, logistic_spec):
    report = volatility_probe(small_blobs, logistic_spec, probe_config(),
                              seeds=[5, 5, 5])
    assert report.n_pairs > 0
    assert all(p.sigma == 0.0 for p in report.pairs)
    assert all(p.bound >= 0.0 for p in report.pairs)
    assert not report.violations


def test_volatility_init_variation_within_bound(small_blobs, logistic_spec):
    report = volatility_probe(small_blobs, logistic_spec, probe_config(),
                              seeds=list(range(8)), vary="init")
    assert report.n_pairs > 0
    assert report.n_skipped == 0  # same batch schedule -> same (i, t) pairs
    assert not report.violations
    assert any(p.sigma > 0 for p in report.pairs)


def test_volatility_basic_engine(small_blobs, logistic_spec):
    report = volatility_probe(small_blobs, logistic_spec, probe_config(20),
                              seeds=[1, 2, 3], engine="basic")
    assert report.n_pairs > 0
    assert not report.violations


def test_volatility_needs_two_seeds(small_blobs, logistic_spec):
    with pytest.raises(ParameterError):
        volatility_probe(small_blobs, logistic_spec, probe_config(), seeds=[1])
