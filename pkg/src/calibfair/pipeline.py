"""Training procedures for every method, evaluation and multi-seed sweeps.

Random streams are derived from ``(seed, role, ...)`` tuples so that the
single-stage methods and the second stage of the two-stage methods share
initial weights and batch order for a given seed.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses
from .clustering import ClusterAssignment, compute_gaps, kmeans_1d
from .data import Dataset, Split
from .metrics import EvalReport, evaluate, qece
from .model import (AdamState, LossSpec, MlpModel, adam_step, forward, init_mlp,
                    loss_and_grad, predict, softmax)

log = logging.getLogger(__name__)

METHODS = ("ERM", "Focal", "ClusterFocal", "ClusterERM", "ClusterGroupDRO", "JTT",
           "OracleFocal", "OracleGroupDRO")
CLUSTER_METHODS = ("ClusterFocal", "ClusterERM", "ClusterGroupDRO")
ORACLE_METHODS = ("OracleFocal", "OracleGroupDRO")
GAP_MODES = ("out_of_fold", "in_sample")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# seed-stream roles
_STAGE1, _STAGE2, _FOLDS = 1, 2, 3


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or could not run."""


class ConfigError(ValueError):
    pass


def method_from_name(name: str) -> str:
    """Accept ``ClusterFocal``, ``cluster-focal`` or ``cluster_focal``."""
    key = name.replace("-", "").replace("_", "").lower()
    for m in METHODS:
        if m.lower() == key:
            return m
    raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


def cli_name(method: str) -> str:
    return {"ERM": "erm", "Focal": "focal", "ClusterFocal": "cluster-focal",
            "ClusterERM": "cluster-erm", "ClusterGroupDRO": "cluster-groupdro", "JTT": "jtt",
            "OracleFocal": "oracle-focal", "OracleGroupDRO": "oracle-groupdro"}[method]


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ClusterFocal"
    gamma: float = 3.0
    num_clusters: int = 4
    stage1_epochs: int = 10
    stage2_epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    jtt_lambda: float = 5.0
    groupdro_eta: float = 0.1
    groupdro_loss: str = "cross_entropy"
    oracle_attribute: Optional[str] = None
    seed: int = 0
    gap_mode: str = "out_of_fold"
    num_folds: int = 5
    hidden_dims: Tuple[int, ...] = (32, 32)
    num_bins: int = 10

    def validate(self, dataset: Optional[Dataset] = None) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be at least 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.jtt_lambda < 1:
            raise ConfigError("jtt_lambda must be at least 1")
        if not self.groupdro_eta > 0:
            raise ConfigError("groupdro_eta must be positive")
        if self.groupdro_loss not in ("cross_entropy", "focal"):
            raise ConfigError("groupdro_loss must be 'cross_entropy' or 'focal'")
        if self.gap_mode not in GAP_MODES:
            raise ConfigError(f"gap_mode must be one of {GAP_MODES}")
        if self.num_folds < 2:
            raise ConfigError("num_folds must be at least 2")
        if self.method in ORACLE_METHODS and not self.oracle_attribute:
            raise ConfigError(f"{self.method} requires an oracle attribute")
        if dataset is not None and self.oracle_attribute and self.oracle_attribute not in dataset.attributes:
            raise ConfigError(f"oracle attribute {self.oracle_attribute!r} not in dataset "
                              f"(have: {', '.join(dataset.attributes) or 'none'})")

    def layer_dims(self, dataset: Dataset) -> Tuple[int, ...]:
        return (dataset.n_features, *self.hidden_dims, dataset.num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class TrainedArtifacts:
    method: str
    f_pred: MlpModel
    train_indices: np.ndarray
    f_id: Optional[MlpModel] = None
    clusters: Optional[ClusterAssignment] = None
    gaps: Optional[np.ndarray] = None
    epoch_losses: List[float] = field(default_factory=list)
    batch_losses: List[float] = field(default_factory=list)
    group_weights: List[np.ndarray] = field(default_factory=list)
    jtt_marked: Optional[np.ndarray] = None
    selected_epoch: Optional[int] = None

    def cluster_report(self) -> Optional[dict]:
        if self.clusters is None:
            return None
        return self.clusters.report(self.gaps)


def stratified_batches(groups: np.ndarray, batch_size: int, n_batches: int, rng) -> List[np.ndarray]:
    """One epoch of batches drawing ``ceil(batch_size / K)`` positions per nonempty group.

    Groups at least as large as the quota are consumed from a stream of fresh
    permutations; smaller groups are sampled with replacement. With a single
    group this is ordinary shuffled mini-batching.
    """
    groups = np.asarray(groups, dtype=np.int64)
    present = [g for g in np.unique(groups)]
    quota = math.ceil(batch_size / len(present))
    chunks = []
    for g in present:
        members = np.flatnonzero(groups == g)
        need = quota * n_batches
        if members.size >= quota:
            stream = [members[rng.permutation(members.size)] for _ in range(math.ceil(need / members.size))]
            picks = np.concatenate(stream)[:need]
        else:
            picks = members[rng.integers(members.size, size=need)]
        chunks.append(picks.reshape(n_batches, quota))
    return [np.concatenate([c[b] for c in chunks]) for b in range(n_batches)]


LossFn = Callable[[MlpModel, np.ndarray], Tuple[float, list]]


def _fit(model: MlpModel, config: TrainConfig, x: np.ndarray, y: np.ndarray, epochs: int,
         groups: Optional[np.ndarray], loss_fn: LossFn, rng,
         on_epoch: Optional[Callable[[int, MlpModel], None]] = None):
    """Mini-batch Adam; returns ``(model, epoch_losses, batch_losses)``."""
    n = y.size
    bs = min(config.batch_size, n)
    n_batches = math.ceil(n / bs)
    if groups is None:
        groups = np.zeros(n, dtype=np.int64)
    state = AdamState.for_model(model, config.lr, config.beta1, config.beta2, config.eps)
    epoch_losses, batch_losses = [], []
    for epoch in range(epochs):
        total = 0.0
        for batch in stratified_batches(groups, bs, n_batches, rng):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads = loss_fn(model, batch)
            except ValueError as exc:
                # softmax rejects non-finite logits once the weights blow up
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}: {exc}") from exc
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}")
            model, state = adam_step(model, grads, state)
            batch_losses.append(value)
            total += value
        epoch_losses.append(total / n_batches)
        if not model.is_finite():
            raise TrainingError(f"non-finite parameters after epoch {epoch + 1}")
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, epoch_losses, batch_losses


def _simple_loss(x, y, make_spec: Callable[[np.ndarray], LossSpec]) -> LossFn:
    def fn(model, batch):
        return loss_and_grad(model, x[batch], y[batch], make_spec(batch))
    return fn


def _init(config: TrainConfig, dataset: Dataset, *tags) -> MlpModel:
    return init_mlp(config.layer_dims(dataset), [config.seed, *tags, 0])


def _batch_rng(config: TrainConfig, *tags):
    return np.random.default_rng([config.seed, *tags, 1])


def _train_ce(config, dataset, idx, epochs, tags):
    x, y = dataset.features[idx], dataset.labels[idx]
    spec = LossSpec("cross_entropy")
    return _fit(_init(config, dataset, *tags), config, x, y, epochs, None,
                _simple_loss(x, y, lambda b: spec), _batch_rng(config, *tags))


def train_erm(config: TrainConfig, dataset: Dataset, train_indices, epochs: Optional[int] = None) -> TrainedArtifacts:
    """Plain cross-entropy training for ``epochs`` (default: the stage-2 budget)."""
    config.validate()
    idx = np.asarray(train_indices, dtype=np.int64)
    epochs = config.stage2_epochs if epochs is None else epochs
    model, ep, bl = _train_ce(config, dataset, idx, epochs, (_STAGE2,))
    return TrainedArtifacts("ERM", model, idx, epoch_losses=ep, batch_losses=bl)


def stage1_identify(config: TrainConfig, dataset: Dataset, train_indices):
    """Train the identification model, compute per-sample gaps and cluster them.

    Returns ``(f_id, gaps, ClusterAssignment)`` with gaps aligned to ``train_indices``.
    """
    idx = np.asarray(train_indices, dtype=np.int64)
    f_id, _, _ = _train_ce(config, dataset, idx, config.stage1_epochs, (_STAGE1, 0))
    if config.gap_mode == "in_sample":
        gaps = compute_gaps(predict(f_id, dataset, idx))
    else:
        folds = config.num_folds
        if idx.size < folds * config.num_clusters:
            raise ConfigError(f"training split has {idx.size} samples, fewer than "
                              f"{folds}*{config.num_clusters}; use in_sample gaps")
        order = np.random.default_rng([config.seed, _FOLDS]).permutation(idx.size)
        gaps = np.empty(idx.size)
        for j, held in enumerate(np.array_split(order, folds)):
            mask = np.ones(idx.size, dtype=bool)
            mask[held] = False
            model, _, _ = _train_ce(config, dataset, idx[mask], config.stage1_epochs, (_STAGE1, j + 1))
            gaps[held] = compute_gaps(predict(model, dataset, idx[held]))
    assignment = kmeans_1d(gaps, config.num_clusters, seed=config.seed)
    log.info("stage 1: centers %s counts %s", np.round(assignment.centers, 4).tolist(),
             assignment.counts().tolist())
    return f_id, gaps, assignment


def _worst_val_qece(model, dataset, val_idx, attribute, num_bins) -> float:
    records = predict(model, dataset, val_idx)
    groups = dataset.attributes[attribute][val_idx]
    return max(qece([records[i] for i in np.flatnonzero(groups == g)], num_bins)
               for g in np.unique(groups))


def train_method(config: TrainConfig, dataset: Dataset, split: Split) -> TrainedArtifacts:
    """Train ``config.method`` on ``split.train``.

    With an oracle attribute configured and a validation split, the stage-2
    epoch with the lowest worst-group validation Q-ECE is kept; otherwise the
    last epoch is returned.
    """
    config.validate(dataset)
    method = config.method
    idx = np.asarray(split.train, dtype=np.int64)
    x, y = dataset.features[idx], dataset.labels[idx]
    art = TrainedArtifacts(method, None, idx)
    groups, n_groups = None, 1

    if method in CLUSTER_METHODS:
        art.f_id, art.gaps, art.clusters = stage1_identify(config, dataset, idx)
        groups, n_groups = art.clusters.ids, art.clusters.k
    elif method in ORACLE_METHODS:
        groups = dataset.attributes[config.oracle_attribute][idx]
        n_groups = dataset.num_groups(config.oracle_attribute)

    if method == "ERM":
        spec = LossSpec("cross_entropy")
        loss_fn = _simple_loss(x, y, lambda b: spec)
    elif method == "Focal":
        spec = LossSpec("focal", gamma=config.gamma)
        loss_fn = _simple_loss(x, y, lambda b: spec)
    elif method in ("ClusterFocal", "OracleFocal", "ClusterERM"):
        gamma = 0.0 if method == "ClusterERM" else config.gamma
        loss_fn = _simple_loss(x, y, lambda b: LossSpec("group_wise_focal", gamma=gamma,
                                                        groups=groups[b], num_groups=n_groups))
    elif method == "JTT":
        art.f_id, _, _ = _train_ce(config, dataset, idx, config.stage1_epochs, (_STAGE1, 0))
        wrong = np.array([not r.correct for r in predict(art.f_id, dataset, idx)])
        art.jtt_marked = idx[wrong]
        w = np.where(wrong, config.jtt_lambda, 1.0)
        loss_fn = _simple_loss(x, y, lambda b: LossSpec("weighted_cross_entropy", weights=w[b]))
    else:
        loss_fn = _groupdro_loss(config, x, y, groups, n_groups, art.group_weights)

    best = {"score": math.inf, "model": None, "epoch": None}
    on_epoch = None
    if config.oracle_attribute and len(split.val) > 0:
        def on_epoch(epoch, model):
            score = _worst_val_qece(model, dataset, split.val, config.oracle_attribute, config.num_bins)
            if score < best["score"]:
                best.update(score=score, model=model, epoch=epoch + 1)

    model = _init(config, dataset, _STAGE2)
    model, art.epoch_losses, art.batch_losses = _fit(
        model, config, x, y, config.stage2_epochs, groups, loss_fn, _batch_rng(config, _STAGE2), on_epoch)
    if best["model"] is not None:
        model, art.selected_epoch = best["model"], best["epoch"]
    art.f_pred = model
    return art


def _groupdro_loss(config, x, y, groups, n_groups, trace) -> LossFn:
    gamma = config.gamma if config.groupdro_loss == "focal" else 0.0
    state = {"q": losses.GroupWeights.uniform(n_groups, config.groupdro_eta)}

    def fn(model, batch):
        g = groups[batch]
        probs = softmax(forward(model, x[batch]))
        p_true = probs[np.arange(batch.size), y[batch]]
        group_loss, _ = losses.per_group_focal(p_true, g, n_groups, gamma)
        q, _ = losses.groupdro_step(group_loss, state["q"])
        state["q"] = losses.GroupWeights(q, config.groupdro_eta)
        trace.append(q)
        spec = LossSpec("groupdro", gamma=gamma, groups=g, num_groups=n_groups, q=q,
                        eta=config.groupdro_eta)
        return loss_and_grad(model, x[batch], y[batch], spec)
    return fn


def evaluate_model(artifacts: TrainedArtifacts, dataset: Dataset, test_indices,
                   attributes: Sequence[str], num_bins: int = 10) -> List[EvalReport]:
    """One report per attribute, all from a single prediction pass."""
    idx = np.asarray(test_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("test set is empty")
    for a in attributes:
        if a not in dataset.attributes:
            raise ConfigError(f"attribute {a!r} not in dataset")
    records = predict(artifacts.f_pred, dataset, idx)
    return [evaluate(records, dataset.attributes[a][idx], a, dataset.num_classes, num_bins,
                     dataset.num_groups(a)) for a in attributes]


@dataclass
class RunResult:
    method: str
    seed: int
    artifacts: TrainedArtifacts
    reports: List[EvalReport]


@dataclass
class TradeoffRow:
    method: str
    attribute: str
    n_runs: int
    worst_perf_mean: float
    worst_perf_std: float
    worst_qece_mean: float
    worst_qece_std: float
    overall_perf_mean: float
    overall_qece_mean: float


TRADEOFF_COLUMNS = ("method", "attribute", "n_runs", "worst_perf_mean", "worst_perf_std",
                    "worst_qece_mean", "worst_qece_std", "overall_perf_mean", "overall_qece_mean")


@dataclass
class TradeoffTable:
    metric: str
    rows: List[TradeoffRow]

    def row(self, method: str, attribute: str) -> TradeoffRow:
        for r in self.rows:
            if r.method == method and r.attribute == attribute:
                return r
        raise KeyError((method, attribute))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in TRADEOFF_COLUMNS)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"metric": self.metric, "rows": [asdict(r) for r in self.rows]}


def _mean_std(values) -> Tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    # sample standard deviation; a single run has no spread
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def tradeoff_table(runs: Sequence[RunResult]) -> TradeoffTable:
    methods = list(dict.fromkeys(r.method for r in runs))
    attributes = [rep.attribute for rep in runs[0].reports]
    rows = []
    for m in methods:
        mine = [r for r in runs if r.method == m]
        for a_i, attr in enumerate(attributes):
            reps = [r.reports[a_i] for r in mine]
            pm, ps = _mean_std([rep.worst_performance[1] for rep in reps])
            qm, qs = _mean_std([rep.worst_qece[1] for rep in reps])
            om, _ = _mean_std([rep.overall.performance for rep in reps])
            oq, _ = _mean_std([rep.overall.qece for rep in reps])
            rows.append(TradeoffRow(m, attr, len(reps), pm, ps, qm, qs, om, oq))
    return TradeoffTable(runs[0].reports[0].metric, rows)


def run_one(config: TrainConfig, dataset: Dataset, split: Split, attributes: Sequence[str]) -> RunResult:
    art = train_method(config, dataset, split)
    return RunResult(config.method, config.seed, art,
                     evaluate_model(art, dataset, split.test, attributes, config.num_bins))


def _run_job(args):
    config, dataset, split, attributes = args
    try:
        return run_one(config, dataset, split, attributes)
    except Exception as exc:
        raise TrainingError(f"run {config.method} seed {config.seed} failed: {exc}") from exc


def sweep_workers() -> int:
    raw = os.environ.get("CALIBFAIR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CALIBFAIR_THREADS must be an integer, got {raw!r}") from None


def sweep(config: TrainConfig, methods: Sequence[str], seeds: Sequence[int], dataset: Dataset,
          split: Split, attributes: Sequence[str], workers: Optional[int] = None):
    """Train every (method, seed) pair; returns ``(TradeoffTable, runs)``.

    Runs are independent and may execute in worker processes; results are
    always collected in (method, seed) order.
    """
    if not methods or not seeds:
        raise ConfigError("methods and seeds must be non-empty")
    jobs = []
    for m in methods:
        cfg = replace(config, method=method_from_name(m))
        cfg.validate(dataset)
        jobs.extend((replace(cfg, seed=int(s)), dataset, split, list(attributes)) for s in seeds)
    workers = sweep_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    return tradeoff_table(runs), runs
