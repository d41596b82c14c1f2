"""Per-task training loop, EWC baseline and end-to-end scenario runs."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import __version__
from .autograd import Tensor, backward, pow2, sum_
from .config import RunConfig, config_to_dict
from .data import LabeledDataset, generate_synthetic, read_cifar100_binary, stratified_holdout
from .distill import AblationFlags, FrozenEncoder, cassle_total_loss, snapshot_frozen, ssl_loss
from .errors import (CassleError, ContractError, DegenerateInputError, DomainError, NumericError,
                     ShapeError)
from .evaluation import compute_metrics, evaluate_probe, knn_evaluate, train_linear_probe
from .formats import params_digest, save_checkpoint
from .nn import (
    EmaState,
    EncoderState,
    Linear,
    PredictorState,
    ema_update,
    encode,
    init_ema,
    init_encoder,
    init_predictor,
    predict_head,
)
from .optim import OptimizerState, cosine_lr, optimizer_step
from .scenarios import TaskStream, augment_pair, split, with_domain_ids

STRATEGY_FLAGS: dict[str, AblationFlags | None] = {
    "finetune": None,
    "ewc": None,
    "cassle": AblationFlags(),
    "cassle_swap": AblationFlags(swap_views=True),
    "cassle_nopred": AblationFlags(use_predictor=False),
}


def _derived_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


@dataclass
class FisherDiagonal:
    importance: dict[str, np.ndarray]
    anchors: dict[str, np.ndarray]


@dataclass
class TrainState:
    method: str
    encoder: EncoderState
    ema: EmaState | None = None
    predictor: PredictorState | None = None
    frozen: FrozenEncoder | None = None
    fishers: list[FisherDiagonal] = field(default_factory=list)
    tasks_done: int = 0


@dataclass
class TaskLog:
    task: int
    records: list[dict] = field(default_factory=list)
    samples_seen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frozen_digest: str | None = None
    frozen_digest_end: str | None = None
    frozen_grad_max: float = 0.0
    steps_run: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "steps_run": self.steps_run,
            "samples_seen": int(len(self.samples_seen)),
            "frozen_digest": self.frozen_digest,
            "frozen_digest_end": self.frozen_digest_end,
            "frozen_grad_max": self.frozen_grad_max,
            "records": self.records,
        }


def init_state(method: str, cfg: RunConfig) -> TrainState:
    enc = init_encoder(cfg.arch, _derived_seed(cfg.seed, 1), with_head=method == "byol",
                       with_prototypes=method == "swav")
    ema = init_ema(enc, cfg.training.ema_momentum) if method == "byol" else None
    return TrainState(method, enc, ema)


def _ssl_inputs(state: TrainState, xa, xb):
    """Projections of both views plus the method-specific extras for :func:`ssl_loss`."""
    _, za = encode(state.encoder, xa)
    _, zb = encode(state.encoder, xb)
    extras = {}
    if state.method == "byol":
        extras["pred_a"] = predict_head(state.encoder, za)
        extras["pred_b"] = predict_head(state.encoder, zb)
        extras["target_a"] = encode(state.ema.shadow, xa)[1].detach()
        extras["target_b"] = encode(state.ema.shadow, xb)[1].detach()
    if state.method == "swav":
        extras["bank"] = state.encoder.prototypes
    return za, zb, extras


def ewc_penalty(params, fisher: FisherDiagonal, lam: float) -> Tensor:
    """``(lam / 2) * sum_i F_i (theta_i - theta*_i)^2`` over the anchored parameters."""
    named = dict(params.named_parameters()) if hasattr(params, "named_parameters") else dict(params)
    total = Tensor(0.0)
    for name, importance in fisher.importance.items():
        if name not in named:
            raise ShapeError(f"ewc_penalty: no parameter named {name}")
        p = named[name]
        anchor = fisher.anchors[name]
        if p.shape != importance.shape or p.shape != anchor.shape:
            raise ShapeError(f"ewc_penalty: {name} has shape {p.shape}, fisher {importance.shape}")
        total = total + sum_(pow2(p - anchor) * importance)
    return total * (0.5 * lam)


def estimate_fisher(state: TrainState, task: LabeledDataset, method: str, n_batches: int,
                    cfg: RunConfig, rng: np.random.Generator) -> FisherDiagonal:
    """Diagonal importance from squared SSL-loss gradients averaged over ``n_batches``."""
    if n_batches < 1:
        raise ContractError("estimate_fisher needs n_batches >= 1")
    named = list(state.encoder.named_parameters())
    sums = {name: np.zeros_like(p.data) for name, p in named}
    batch = min(cfg.training.batch_size, len(task))
    for _ in range(n_batches):
        rows = rng.choice(len(task), size=batch, replace=False)
        xa, xb = augment_pair(task.samples[rows], cfg.augment, rng)
        za, zb, extras = _ssl_inputs(state, xa, xb)
        for _, p in named:
            p.grad = None
        grads = backward(ssl_loss(method, za, zb, cfg.losses, **extras))
        for name, p in named:
            g = grads.get(p)
            if g is not None:
                sums[name] += g * g
    importance = {name: s / n_batches for name, s in sums.items()}
    anchors = {name: p.data.copy() for name, p in named}
    for _, p in named:
        p.grad = None
    return FisherDiagonal(importance, anchors)


def _step_loss(state, xa, xb, method, flags, cfg, g, frozen_bank, distilling, ewc_lambda):
    za, zb, extras = _ssl_inputs(state, xa, xb)
    za_bar = zb_bar = None
    if distilling:
        za_bar = encode(state.frozen.encoder, xa)[1]
        zb_bar = encode(state.frozen.encoder, xb)[1]
    terms = cassle_total_loss(method, za, zb, za_bar, zb_bar, g, flags, cfg.losses,
                              distill_family=cfg.training.distill_family, frozen_bank=frozen_bank,
                              **extras)
    total = terms.total
    if ewc_lambda > 0 and state.fishers:
        for fisher in state.fishers:
            total = total + ewc_penalty(state.encoder, fisher, ewc_lambda)
    return terms, total, total.item()


def train_task(state: TrainState, task: LabeledDataset, method: str,
               flags: AblationFlags | None, cfg: RunConfig, *, task_index: int | None = None,
               ewc_lambda: float = 0.0,
               on_step: Callable[[int, TrainState], None] | None = None) -> tuple[TrainState, TaskLog]:
    """Run the step budget of one task.

    ``flags=None`` disables distillation (fine-tuning and EWC). Otherwise a
    frozen copy of the encoder is taken before the first step of every task
    after the first, and the predictor is (re)built if needed.
    """
    t = state.tasks_done if task_index is None else task_index
    tc = cfg.training
    log = TaskLog(task=t)
    steps = int(tc.steps_per_task)
    if steps == 0:
        return state, log

    distilling = flags is not None and t >= 1
    if distilling:
        state.frozen = snapshot_frozen(state.encoder)
        log.frozen_digest = state.frozen.digest
        if flags.use_predictor and (state.predictor is None or tc.reinit_predictor):
            state.predictor = init_predictor(cfg.arch.proj_dim, cfg.arch.predictor_hidden,
                                             _derived_seed(cfg.seed, 2, t))
    else:
        state.frozen = None

    params = state.encoder.parameters()
    if distilling and flags.use_predictor:
        params = params + state.predictor.parameters()
    frozen_params = state.frozen.encoder.parameters() if distilling else []
    opt = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 3, t])
    batch = min(tc.batch_size, len(task))
    seen = []
    g = state.predictor if distilling and flags.use_predictor else None
    frozen_bank = state.frozen.bank if distilling else None

    for step in range(steps):
        rows = rng.choice(len(task), size=batch, replace=False)
        seen.append(task.ids[rows])
        xa, xb = augment_pair(task.samples[rows], cfg.augment, rng)
        try:
            terms, total, value = _step_loss(state, xa, xb, method, flags, cfg, g, frozen_bank,
                                             distilling, ewc_lambda)
            if not math.isfinite(value):
                raise DomainError(f"loss is {value}")
            for p in params:
                p.grad = None
            backward(total)
        except (DomainError, DegenerateInputError) as exc:
            log.samples_seen = np.unique(np.concatenate(seen))
            err = NumericError(f"training diverged at task {t + 1}, step {step}: {exc}")
            err.partial_log = log
            raise err from exc
        for p in frozen_params:
            if p.grad is not None:
                log.frozen_grad_max = max(log.frozen_grad_max, float(np.abs(p.grad).max()))
        lr = cosine_lr(cfg.optimizer.global_lr, step, steps) \
            if cfg.optimizer.schedule == "cosine" else cfg.optimizer.global_lr
        try:
            optimizer_step(params, cfg.optimizer, opt, lr=lr)
        except NumericError as exc:
            log.samples_seen = np.unique(np.concatenate(seen))
            exc.partial_log = log
            raise
        if state.ema is not None:
            ema_update(state.ema, state.encoder)
        if step % tc.log_every == 0 or step == steps - 1:
            log.records.append({
                "step": step,
                "ssl_loss": terms.ssl.item(),
                "distill_loss": None if terms.distill is None else terms.distill.item(),
                "total": value,
            })
        if on_step is not None:
            on_step(step, state)
    for p in params:
        p.grad = None
    if distilling:
        log.frozen_digest_end = params_digest(state.frozen.encoder.state_dict())
    log.steps_run = steps
    log.samples_seen = np.unique(np.concatenate(seen))
    state.tasks_done = t + 1
    return state, log


def features_of(enc: EncoderState, x: np.ndarray) -> np.ndarray:
    """Backbone features as a plain array (the probe sits below the projector)."""
    frozen = enc.clone(frozen=True)
    return encode(frozen, x)[0].data


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    if cfg.data.source == "cifar100":
        return read_cifar100_binary(cfg.data.path)
    spec = cfg.data.synthetic
    if cfg.data.use_run_seed:
        spec = type(spec)(**{**spec.__dict__, "seed": cfg.seed})
    return generate_synthetic(spec)


@dataclass
class Splits:
    train: TaskStream
    test: TaskStream


def build_splits(ds: LabeledDataset, cfg: RunConfig) -> Splits:
    """Hold out a stratified test split, then split both halves into aligned tasks."""
    if cfg.scenario.regime == "domain_inc":
        ds = with_domain_ids(ds)
    tr_idx, te_idx = stratified_holdout(ds, cfg.eval.test_fraction, _derived_seed(cfg.seed, 4))
    train, test = ds.subset(tr_idx), ds.subset(te_idx)
    split_seed = _derived_seed(cfg.seed, 5)
    train_stream = split(train, cfg.scenario, split_seed)
    if cfg.scenario.regime == "class_inc":
        tasks = [test.subset(np.flatnonzero(np.isin(test.labels, ys))) for ys in train_stream.class_sets]
        test_stream = TaskStream("class_inc", tasks, train_stream.class_sets)
    elif cfg.scenario.regime == "data_inc":
        test_stream = split(test, cfg.scenario, _derived_seed(cfg.seed, 6))
    else:
        order = [int(t.domain_ids[0]) for t in train_stream.tasks]
        tasks = [test.subset(np.flatnonzero(test.domain_ids == d)) for d in order]
        test_stream = TaskStream("domain_inc", tasks, [t.classes for t in tasks])
    return Splits(train_stream, test_stream)


def evaluate_row(enc: EncoderState, splits: Splits, cfg: RunConfig) -> tuple[list[float], list[float] | None]:
    """Probe accuracy on every task's test split; also k-NN if enabled."""
    T = len(splits.train)
    train_feats = [features_of(enc, t.samples) for t in splits.train.tasks]
    test_feats = [features_of(enc, t.samples) for t in splits.test.tasks]
    pcfg = cfg.eval.probe
    if pcfg.task_aware:
        row = []
        for k in range(T):
            probe = train_linear_probe(train_feats[k], splits.train.tasks[k].labels, pcfg)
            row.append(evaluate_probe(probe, test_feats[k], splits.test.tasks[k].labels))
    else:
        all_feats = np.concatenate(train_feats)
        all_labels = np.concatenate([t.labels for t in splits.train.tasks])
        probe = train_linear_probe(all_feats, all_labels, pcfg)
        row = [evaluate_probe(probe, test_feats[k], splits.test.tasks[k].labels) for k in range(T)]
    knn = None
    if cfg.eval.knn:
        all_feats = np.concatenate(train_feats)
        all_labels = np.concatenate([t.labels for t in splits.train.tasks])
        k = min(cfg.eval.knn_k, len(all_feats))
        knn = [knn_evaluate(all_feats, all_labels, test_feats[j], splits.test.tasks[j].labels,
                            k, cfg.eval.knn_tau) for j in range(T)]
    return row, knn


def clone_state(state: TrainState) -> TrainState:
    """Independent copy of everything a later task reads or mutates."""
    ema = None
    if state.ema is not None:
        ema = EmaState(state.ema.shadow.clone(frozen=True), state.ema.momentum)
    predictor = None
    if state.predictor is not None:
        predictor = PredictorState([Linear(Tensor(l.weight.data.copy(), True),
                                           Tensor(l.bias.data.copy(), True))
                                    for l in state.predictor.layers])
    return TrainState(state.method, state.encoder.clone(), ema, predictor, state.frozen,
                      list(state.fishers), state.tasks_done)


def _new_report(cfg: RunConfig) -> dict:
    return {
        "version": __version__,
        "method": cfg.method,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "choices": {
            "lr_schedule": f"{cfg.optimizer.schedule} restarted at every task",
            "predictor_reinit_per_task": cfg.training.reinit_predictor,
            "probe": "task_aware" if cfg.eval.probe.task_aware else "task_agnostic",
        },
        "complete": False,
        "error": None,
        "task_logs": [],
        "accuracy_matrix": [],
        "knn_matrix": [],
        "random_baseline": [],
        "metrics": None,
        "checkpoints": [],
        "wall_clock_seconds": 0.0,
    }


class _Run:
    """Mutable progress of one (config, strategy) run."""

    def __init__(self, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.report = _new_report(cfg)
        self.saved: dict[int, dict] = {}  # task -> encoder parameters
        self.ckpt_dir = None
        if out_dir is not None:
            self.ckpt_dir = Path(out_dir) / "checkpoints"
            self.ckpt_dir.mkdir(parents=True, exist_ok=True)

    def fork(self, cfg: RunConfig, out_dir=None) -> "_Run":
        """Continue this run's history under another strategy."""
        other = _Run(cfg, out_dir)
        for key in ("task_logs", "accuracy_matrix", "knn_matrix", "random_baseline", "checkpoints"):
            other.report[key] = json_copy(self.report[key])
        if other.ckpt_dir is not None:
            for entry in other.report["checkpoints"]:
                path = other.ckpt_dir / f"task_{entry['task']}.csle"
                save_checkpoint(self.saved[entry["task"]], path)
                entry["path"] = path.name
        other.saved = dict(self.saved)
        return other

    def record_task(self, t: int, state: TrainState, log: TaskLog, task: LabeledDataset,
                    splits: Splits) -> None:
        if not np.all(np.isin(log.samples_seen, task.ids)):
            raise ContractError(f"task {t + 1} training read samples outside its task")
        self.report["task_logs"].append(log.to_dict())
        params = {k: v.copy() for k, v in state.encoder.state_dict().items()}
        self.saved[t + 1] = params
        if self.ckpt_dir is not None:
            path = self.ckpt_dir / f"task_{t + 1}.csle"
            entry = {"task": t + 1, "digest": save_checkpoint(params, path), "path": path.name}
        else:
            entry = {"task": t + 1, "digest": params_digest(params), "path": None}
        self.report["checkpoints"].append(entry)
        row, knn = evaluate_row(state.encoder, splits, self.cfg)
        self.report["accuracy_matrix"].append(row)
        if knn is not None:
            self.report["knn_matrix"].append(knn)

    def finish(self, started: float) -> dict:
        self.report["metrics"] = compute_metrics(np.array(self.report["accuracy_matrix"]),
                                                 self.report["random_baseline"])
        self.report["complete"] = True
        self.report["wall_clock_seconds"] = time.perf_counter() - started
        return self.report

    def fail(self, exc: CassleError, started: float) -> None:
        self.report["error"] = {"code": exc.code, "message": str(exc)}
        if hasattr(exc, "partial_log"):
            self.report["task_logs"].append(exc.partial_log.to_dict())
        self.report["wall_clock_seconds"] = time.perf_counter() - started
        exc.partial_report = self.report


def json_copy(value):
    return json.loads(json.dumps(value))


def _train_one(run: _Run, state: TrainState, t: int, splits: Splits) -> TrainState:
    cfg = run.cfg
    task = splits.train.tasks[t]
    lam = cfg.training.ewc_lambda if cfg.strategy == "ewc" else 0.0
    state, log = train_task(state, task, cfg.method, STRATEGY_FLAGS[cfg.strategy], cfg,
                            task_index=t, ewc_lambda=lam)
    run.record_task(t, state, log, task, splits)
    if cfg.strategy == "ewc" and t < len(splits.train) - 1:
        fisher_rng = np.random.default_rng([cfg.seed, 7, t])
        state.fishers.append(estimate_fisher(state, task, cfg.method, cfg.training.fisher_batches,
                                             cfg, fisher_rng))
    return state


def run_scenario(cfg: RunConfig, out_dir=None,
                 on_task_end: Callable[[int, TrainState], None] | None = None) -> dict:
    """Train over the whole task stream and return the run report.

    On a module error the partially filled report is attached to the raised
    exception as ``partial_report`` with ``complete`` set to false.
    """
    started = time.perf_counter()
    run = _Run(cfg, out_dir)
    try:
        splits = build_splits(load_dataset(cfg), cfg)
        state = init_state(cfg.method, cfg)
        run.report["random_baseline"] = evaluate_row(state.encoder, splits, cfg)[0]
        for t in range(len(splits.train)):
            state = _train_one(run, state, t, splits)
            if on_task_end is not None:
                on_task_end(t, state)
    except CassleError as exc:
        run.fail(exc, started)
        raise
    return run.finish(started)


def run_strategies(cfg: RunConfig, strategies, out_dirs: Mapping | None = None) -> dict[str, dict]:
    """Reports for several strategies that share ``cfg`` apart from the strategy.

    No strategy distills or regularizes during the first task, so that task is
    trained once and its final state is forked for every strategy. Each report
    equals what :func:`run_scenario` produces for that strategy alone.
    """
    started = time.perf_counter()
    out_dirs = out_dirs or {}
    base = _Run(cfg.replace(strategy="finetune"))
    splits = build_splits(load_dataset(cfg), cfg)
    state = init_state(cfg.method, cfg)
    base.report["random_baseline"] = evaluate_row(state.encoder, splits, cfg)[0]
    state = _train_one(base, state, 0, splits)
    shared = time.perf_counter() - started
    reports = {}
    for strategy in strategies:
        branch_started = time.perf_counter() - shared
        run = base.fork(cfg.replace(strategy=strategy), out_dirs.get(strategy))
        branch = clone_state(state)
        try:
            if strategy == "ewc" and len(splits.train) > 1:
                fisher_rng = np.random.default_rng([cfg.seed, 7, 0])
                branch.fishers.append(estimate_fisher(branch, splits.train.tasks[0], cfg.method,
                                                      cfg.training.fisher_batches, run.cfg,
                                                      fisher_rng))
            for t in range(1, len(splits.train)):
                branch = _train_one(run, branch, t, splits)
        except CassleError as exc:
            run.fail(exc, branch_started)
            raise
        reports[strategy] = run.finish(branch_started)
    return reports


def recompute_metrics(report: Mapping) -> dict:
    return compute_metrics(np.array(report["accuracy_matrix"], dtype=np.float64),
                           report["random_baseline"])
