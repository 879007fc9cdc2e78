"""Corruption-detection experiment harness.

The protocol: corrupt k samples, train with the adaptive valuation hook
attached, score a 100-sample pool (the k corrupted plus pool_size-k clean
samples), and count how many corrupted samples land among the k lowest
values. Baselines run on the same corrupted data for comparison, each with
wall-time and peak-RSS measured. Everything is driven by one config object
so a run can be reproduced byte-for-byte from its manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import baselines as B
from . import dataio as D
from . import model as M
from .errors import ConfigError, ParameterError
from .meters import ResourceMeter
from .numkit import RngState
from .trainer import (EPOCH_PERMUTATION, LrSchedule, TrainConfig,
                      run_training, steps_per_epoch)
from .valuation import AdaptiveValuator, ValuationParams

STREAM_CORRUPT = 11
STREAM_POOL = 12
STREAM_TRAIN = 13

ADAPTIVE_METHOD = "adaptive"


# -- detection metric ---------------------------------------------------------


@dataclass
class DetectionReport:
    method: str
    k: int
    pool_size: int
    detected: int
    detection_rate: float
    per_epoch_detected: list | None = None
    degenerate: bool = False  # k == 0: rate undefined, reported as 0


def _corrupted_set(mask) -> set:
    if isinstance(mask, dict):
        return {int(i) for i, flag in mask.items() if flag}
    return {int(i) for i in mask}


def detection_metric(values: dict, mask, k: int, pool,
                     method: str = ADAPTIVE_METHOD) -> DetectionReport:
    """Count corrupted samples among the k lowest-valued pool members.

    The pool must contain exactly k corrupted ids. Ties are broken by
    ascending sample id, which makes the count independent of pool order.
    """
    pool = [int(i) for i in pool]
    corrupted = _corrupted_set(mask)
    in_pool = [i for i in pool if i in corrupted]
    if len(in_pool) != k:
        raise ParameterError(f"pool holds {len(in_pool)} corrupted ids, expected k={k}")
    if len(pool) < k:
        raise ParameterError("pool smaller than k")
    missing = [i for i in pool if i not in values]
    if missing:
        raise ParameterError(f"no value for pool ids {missing[:5]}")
    if k == 0:
        return DetectionReport(method, 0, len(pool), 0, 0.0, degenerate=True)
    ranked = sorted(pool, key=lambda i: (values[i], i))
    detected = sum(1 for i in ranked[:k] if i in corrupted)
    return DetectionReport(method, k, len(pool), detected, detected / k)


def build_pool(corrupted_ids, clean_ids, pool_size: int, rng: RngState) -> list:
    """k corrupted ids plus (pool_size - k) clean ids drawn without replacement."""
    corrupted_ids = sorted(int(i) for i in corrupted_ids)
    clean_ids = sorted(int(i) for i in clean_ids)
    need = pool_size - len(corrupted_ids)
    if need < 0:
        raise ParameterError(f"pool_size {pool_size} < {len(corrupted_ids)} corrupted samples")
    if need > len(clean_ids):
        raise ParameterError(f"not enough clean samples: need {need}, have {len(clean_ids)}")
    g = rng.generator()
    chosen = sorted(int(c) for c in g.choice(np.asarray(clean_ids), size=need,
                                             replace=False))
    return corrupted_ids + chosen


def early_detection_curve(snapshots, mask, k: int, pool) -> list:
    """Detection count from each cumulative-value snapshot, in order."""
    if not snapshots:
        raise ParameterError("need at least one snapshot")
    return [detection_metric(snap, mask, k, pool).detected for snap in snapshots]


class EpochSnapshotter:
    """Hook that captures provisional cumulative values at epoch boundaries.

    Runs after the valuator in the hook list; pending reference-queue pairs
    are scored against the newest parameters, and the snapshot is flagged
    provisional when any were pending.
    """

    def __init__(self, valuator: AdaptiveValuator, steps_per_epoch: int):
        self.valuator = valuator
        self.steps_per_epoch = int(steps_per_epoch)
        self.snapshots: list[dict] = []
        self.provisional: list[bool] = []
        self.steps: list[int] = []

    def on_step(self, record, params_after):
        t = record.step
        if t % self.steps_per_epoch == 0 or t == self.valuator.total_steps:
            if self.steps and self.steps[-1] == t:
                return
            self.snapshots.append(self.valuator.provisional_cumulative())
            self.provisional.append(self.valuator.pending_pairs > 0)
            self.steps.append(t)


# -- configuration ------------------------------------------------------------


def _require(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"              # blobs | csv | idx
    n_per_class: int = 250
    n_classes: int = 2
    dim: int = 10
    separation: float = 3.0
    data_seed: int = 0
    path: str | None = None          # csv
    label_column: str = "label"
    images_path: str | None = None   # idx
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("blobs", "csv", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "blobs" and (self.n_per_class < 1 or self.n_classes < 1
                                     or self.dim < 1 or self.separation <= 0):
            raise ConfigError("blob parameters must be positive")

    @staticmethod
    def from_dict(d: dict) -> "DataConfig":
        _require(d, set(DataConfig.__dataclass_fields__), "data")
        return DataConfig(**d)


@dataclass(frozen=True)
class CorruptionConfig:
    kind: str = D.LABEL_FLIP
    k: int = 40
    source_class: int = 0
    target_class: int = 1
    sigma: float = 0.0

    def __post_init__(self):
        try:  # surface bad combinations at load time, not mid-run
            D.CorruptionSpec(kind=self.kind, k=self.k, rng=RngState(0),
                             source_class=self.source_class,
                             target_class=self.target_class, sigma=self.sigma)
        except ParameterError as e:
            raise ConfigError(str(e)) from e

    @staticmethod
    def from_dict(d: dict) -> "CorruptionConfig":
        _require(d, set(CorruptionConfig.__dataclass_fields__), "corruption")
        return CorruptionConfig(**d)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = ()
    loss: str = M.CROSS_ENTROPY
    bias: bool = True

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        _require(d, set(ModelConfig.__dataclass_fields__), "model")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return ModelConfig(**d)

    def spec_for(self, n_features: int, n_classes: int) -> M.ModelSpec:
        return M.ModelSpec((n_features, *self.hidden, n_classes),
                           loss=self.loss, bias=self.bias)


@dataclass(frozen=True)
class TrainingConfig:
    total_steps: int = 100
    batch_size: int = 25
    lr: float = 0.5
    lr_factor: float = 1.0
    lr_every: int = 0
    shuffle: str = EPOCH_PERMUTATION

    def __post_init__(self):
        self.train_config(RngState(0))  # validate eagerly

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        _require(d, set(TrainingConfig.__dataclass_fields__), "training")
        return TrainingConfig(**d)

    def train_config(self, rng: RngState) -> TrainConfig:
        return TrainConfig(total_steps=self.total_steps, batch_size=self.batch_size,
                           schedule=LrSchedule(self.lr, self.lr_factor, self.lr_every),
                           rng=rng, shuffle=self.shuffle)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    valuation: ValuationParams = field(default_factory=ValuationParams)
    seeds: tuple = (1, 2, 3, 4, 5)
    pool_size: int = 100
    baselines: tuple = ()            # any of: loo, if, gradnd
    loo_pool_size: int | None = None
    if_damping: float = 0.01
    if_cg_tol: float = 1e-6
    if_cg_max_iter: int = 200
    epoch_snapshots: bool = False

    def __post_init__(self):
        for b in self.baselines:
            if b not in (B.METHOD_LOO, B.METHOD_IF, B.METHOD_GRADND):
                raise ConfigError(f"unknown baseline {b!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.if_damping <= 0 or self.if_cg_tol <= 0 or self.if_cg_max_iter < 1:
            raise ConfigError("influence-function settings must be positive")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        _require(d, set(ExperimentConfig.__dataclass_fields__), "config")
        d = dict(d)
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        if "corruption" in d:
            d["corruption"] = CorruptionConfig.from_dict(d["corruption"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "training" in d:
            d["training"] = TrainingConfig.from_dict(d["training"])
        if "valuation" in d:
            _require(d["valuation"], set(ValuationParams.__dataclass_fields__), "valuation")
            d["valuation"] = ValuationParams(**d["valuation"])
        for key in ("seeds", "baselines"):
            if key in d:
                d[key] = tuple(d[key])
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["baselines"] = list(self.baselines)
        out["model"]["hidden"] = list(self.model.hidden)
        return out


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a JSON (or TOML, python >= 3.11) file."""
    text_path = str(path)
    if text_path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as e:
            raise ConfigError("TOML configs need python >= 3.11") from e
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    else:
        with open(path, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return ExperimentConfig.from_dict(raw)


# -- experiment ---------------------------------------------------------------


@dataclass
class SeedOutcome:
    seed: int
    reports: dict             # method -> DetectionReport
    resources: dict           # method -> (wall_s, peak_rss_bytes)
    values: dict              # method -> {sample_id: value}
    extras: dict = field(default_factory=dict)  # method -> solver stats etc.
    curve: list | None = None
    curve_provisional: list | None = None
    corruption_digest: str = ""


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    manifest: dict
    outcomes: list
    summary: dict             # method -> {"mean":, "std":, "per_seed": [...]}
    failure_stage: str | None = None
    failure_message: str | None = None


def build_dataset(data: DataConfig) -> D.Dataset:
    if data.kind == "blobs":
        return D.synth_gaussian_blobs(RngState(data.data_seed).derive(0),
                                      data.n_per_class, data.n_classes,
                                      data.dim, data.separation)
    if data.kind == "csv":
        if not data.path:
            raise ConfigError("csv data needs 'path'")
        return D.load_csv(data.path, D.CsvSchema(label_column=data.label_column))
    if data.kind == "idx":
        if not (data.images_path and data.labels_path):
            raise ConfigError("idx data needs 'images_path' and 'labels_path'")
        return D.load_idx(data.images_path, data.labels_path)
    raise ConfigError(f"unknown data kind {data.kind!r}")


def _corruption_spec(cfg: CorruptionConfig, rng: RngState) -> D.CorruptionSpec:
    return D.CorruptionSpec(kind=cfg.kind, k=cfg.k, rng=rng,
                            source_class=cfg.source_class,
                            target_class=cfg.target_class, sigma=cfg.sigma)


def _digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def build_manifest(config: ExperimentConfig, dataset: D.Dataset,
                   corruption_digests: dict) -> dict:
    spec = config.model.spec_for(dataset.n_features, dataset.n_classes)
    return {
        "artifact_version": __version__,
        "config": config.to_dict(),
        "dataset_digest": dataset.digest(),
        "model_spec": spec.to_dict(),
        "corruption_digests": {str(s): d for s, d in sorted(corruption_digests.items())},
        "seeds": list(config.seeds),
    }


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the detection protocol over all seeds; partial results on failure."""
    outcomes = []
    stage = "load-data"
    try:
        base = build_dataset(config.data)
        spec = config.model.spec_for(base.n_features, base.n_classes)
        corruption_digests = {}

        for seed in config.seeds:
            srng = RngState(seed)

            stage = f"corrupt(seed={seed})"
            corrupted = D.corrupt(base, _corruption_spec(config.corruption,
                                                         srng.derive(STREAM_CORRUPT)))
            manifest_entries = D.corruption_manifest(base, corrupted)
            corruption_digests[seed] = _digest_json(manifest_entries)
            corrupted_ids = [e["id"] for e in manifest_entries]
            clean_ids = corrupted.ids[~corrupted.corruption_mask]

            stage = f"pool(seed={seed})"
            pool = build_pool(corrupted_ids, clean_ids, config.pool_size,
                              srng.derive(STREAM_POOL))

            stage = f"train-value(seed={seed})"
            tc = config.training.train_config(srng.derive(STREAM_TRAIN))
            valuator = AdaptiveValuator(corrupted, tc.total_steps, config.valuation)
            hooks = [valuator]
            snapshotter = None
            if config.epoch_snapshots:
                snapshotter = EpochSnapshotter(
                    valuator, steps_per_epoch(corrupted.n, tc.batch_size))
                hooks.append(snapshotter)
            need_full = B.METHOD_GRADND in config.baselines
            with ResourceMeter() as meter:
                store = run_training(corrupted, spec, tc, hooks=hooks,
                                     store="full" if need_full else "light")
            values = {ADAPTIVE_METHOD: valuator.ledger.snapshot_cumulative()}
            resources = {ADAPTIVE_METHOD: (meter.wall_time_s, meter.peak_rss_bytes)}
            extras = {ADAPTIVE_METHOD: {"valuation": config.valuation.to_dict()}}

            stage = f"baselines(seed={seed})"
            k = config.corruption.k
            baseline_runs = []
            if B.METHOD_GRADND in config.baselines:
                baseline_runs.append(B.gradnorm_values(corrupted, spec, tc, pool,
                                                       store=store))
            if B.METHOD_IF in config.baselines:
                baseline_runs.append(B.influence_values(
                    corrupted, spec, tc, pool, damping=config.if_damping,
                    cg_tol=config.if_cg_tol, cg_max_iter=config.if_cg_max_iter,
                    store=store))
            if B.METHOD_LOO in config.baselines:
                loo_pool = pool if config.loo_pool_size is None \
                    else pool[:config.loo_pool_size]
                baseline_runs.append(B.loo_values(corrupted, spec, tc, loo_pool))
            for res in baseline_runs:
                values[res.method] = res.values
                resources[res.method] = (res.wall_time_s, res.peak_memory_bytes)
                extras[res.method] = res.extras or {}

            stage = f"detect(seed={seed})"
            reports = {}
            for method, vals in values.items():
                if any(i not in vals for i in pool):
                    continue  # baseline valued a sub-pool only; no detection score
                reports[method] = detection_metric(vals, set(corrupted_ids), k, pool,
                                                   method=method)
            outcome = SeedOutcome(seed=seed, reports=reports, resources=resources,
                                  values=values, extras=extras,
                                  corruption_digest=corruption_digests[seed])
            if snapshotter is not None:
                outcome.curve = early_detection_curve(snapshotter.snapshots,
                                                      set(corrupted_ids), k, pool)
                outcome.curve_provisional = list(snapshotter.provisional)
                if ADAPTIVE_METHOD in reports:
                    reports[ADAPTIVE_METHOD].per_epoch_detected = outcome.curve
            outcomes.append(outcome)

        stage = "aggregate"
        summary = summarize(outcomes)
        manifest = build_manifest(config, base, corruption_digests)
        return ExperimentResult(config, manifest, outcomes, summary)
    except Exception as e:  # report partial results with the failing stage
        manifest = {"artifact_version": __version__, "config": config.to_dict()}
        return ExperimentResult(config, manifest, outcomes, summarize(outcomes),
                                failure_stage=stage, failure_message=str(e))


def summarize(outcomes) -> dict:
    per_method = {}
    for out in outcomes:
        for method, report in out.reports.items():
            per_method.setdefault(method, []).append(report.detected)
    summary = {}
    for method, detected in sorted(per_method.items()):
        arr = np.asarray(detected, dtype=np.float64)
        summary[method] = {"mean": float(arr.mean()),
                           "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                           "per_seed": [int(v) for v in detected]}
    return summary


# -- export -------------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_results(result: ExperimentResult, out_dir) -> dict:
    """Write detection.csv, resources.csv, values_<method>.csv, results.json,
    manifest.json. Returns {name: path}. Field order and float formatting are
    fixed, so identical results produce identical bytes."""
    if not result.outcomes and result.failure_stage is None:
        raise ParameterError("nothing to export: no outcomes")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    detection_rows = []
    for out in result.outcomes:
        for method in sorted(out.reports):
            r = out.reports[method]
            detection_rows.append([method, r.k, out.seed, r.detected])
    detection_rows.sort(key=lambda row: (row[0], row[2]))
    paths["detection"] = os.path.join(out_dir, "detection.csv")
    _write_csv(paths["detection"], ["method", "k", "seed", "detected"], detection_rows)

    by_method = {}
    for out in result.outcomes:
        for method, (wall, rss) in out.resources.items():
            by_method.setdefault(method, []).append((wall, rss))
    resource_rows = [[m, repr(1000.0 * float(np.mean([w for w, _ in rows]))),
                      int(max(r for _, r in rows))]
                     for m, rows in sorted(by_method.items())]
    paths["resources"] = os.path.join(out_dir, "resources.csv")
    _write_csv(paths["resources"], ["method", "wall_ms", "peak_rss_bytes"],
               resource_rows)

    methods = sorted({m for out in result.outcomes for m in out.values})
    for method in methods:
        rows = []
        for out in result.outcomes:
            vals = out.values.get(method, {})
            rows.extend([out.seed, sid, repr(float(vals[sid]))] for sid in sorted(vals))
        p = os.path.join(out_dir, f"values_{method}.csv")
        _write_csv(p, ["seed", "sample_id", "value"], rows)
        paths[f"values_{method}"] = p

    bundle = {
        "schema_version": 1,
        "manifest": result.manifest,
        "summary": result.summary,
        "detection": [{"method": m, "k": int(k), "seed": int(s), "detected": int(d)}
                      for m, k, s, d in detection_rows],
        "curves": {str(out.seed): out.curve for out in result.outcomes
                   if out.curve is not None},
        "method_extras": {str(out.seed): out.extras for out in result.outcomes},
        "failure_stage": result.failure_stage,
        "failure_message": result.failure_message,
    }
    paths["results"] = os.path.join(out_dir, "results.json")
    with open(paths["results"], "w", encoding="utf-8") as f:
        json.dump(bundle, f, indent=2, sort_keys=True)
        f.write("\n")

    paths["manifest"] = os.path.join(out_dir, "manifest.json")
    with open(paths["manifest"], "w", encoding="utf-8") as f:
        json.dump(result.manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return paths
