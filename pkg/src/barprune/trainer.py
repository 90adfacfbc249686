"""Teacher training, the three-phase BAR procedure and width-scaling baselines.

BAR training runs in three phases:

1. soft pruning: sampled gates, loss = distillation + lambda * BAR term, with
   the upper budget margin sliding from V_F to B over the phase;
2. hard prune, freeze the gates, fine-tune the pruned graph at the base rate;
3. continue fine-tuning at the low rate.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .budget import (
    BudgetState,
    LossConfig,
    bar_loss,
    full_flops,
    full_volume,
    hard_flops,
    hard_volume,
    make_budget,
    update_budget,
)
from .data import Dataset
from .distill import LogitsCache, kd_terms, predict_whole_dataset
from .errors import BudgetViolation, ConfigError
from .netgraph import (
    CostReport,
    Network,
    NetworkSpec,
    PrunedGraph,
    build_network,
    cost_report,
    hard_prune,
    write_back,
)
from .tensor import Adam, Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_train: int = 20
    epochs_finetune_hi: int = 10
    epochs_finetune_lo: int = 5
    teacher_epochs_hi: int = 20
    teacher_epochs_lo: int = 5
    baseline_epochs_hi: int = 10
    baseline_epochs_lo: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    lr_low: float = 1e-4
    gate_lr: float = 0.05
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = LossConfig()
    budget_fraction: float = 0.5
    schedule: str = "sigmoid"
    sigmoid_d: float = 10.0
    barrier_cap: float = 1e3
    violation_coef: float = 3.0
    violation_growth: float = 1.06
    coast_slack: float = 0.005
    settle_epochs: int = 1
    eval_every: int = 1
    teacher_init: bool = False

    def __post_init__(self):
        for f in ("epochs_train", "epochs_finetune_hi", "epochs_finetune_lo", "teacher_epochs_hi", "batch_size", "eval_every"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")
        if self.coast_slack < 0:
            raise ConfigError("coast_slack must be >= 0")
        for f in ("epochs_finetune_lo", "teacher_epochs_lo", "settle_epochs", "baseline_epochs_hi", "baseline_epochs_lo"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be >= 0")


# ---------------------------------------------------------------------------
# run log

STEP_COLUMNS = (
    "step", "phase", "epoch", "progress", "b", "V", "flops",
    "loss_hard", "loss_soft", "loss_data", "l_s", "barrier", "loss_bar", "total",
    "violation", "accuracy",
)
_INT_COLUMNS = {"step", "phase", "epoch", "violation"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def record(self, **row) -> dict:
        row = {c: row.get(c) for c in STEP_COLUMNS}
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("run log steps must increase")
        self.steps.append(row)
        return row

    def event(self, msg: str) -> None:
        log.info(msg)
        self.events.append(msg)

    def column(self, name: str, phase: Optional[int] = None) -> list:
        return [r[name] for r in self.steps if phase is None or r["phase"] == phase]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for r in self.steps:
            w.writerow([_fmt(r[c]) for c in STEP_COLUMNS])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def from_csv(cls, text: str) -> "RunLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != STEP_COLUMNS:
            raise ValueError("run log CSV has an unexpected header")
        out = cls()
        for raw in rows[1:]:
            row = {}
            for c, v in zip(STEP_COLUMNS, raw):
                row[c] = None if v == "" else (int(v) if c in _INT_COLUMNS else float(v))
            out.steps.append(row)
        return out


# ---------------------------------------------------------------------------
# evaluation


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(model, dataset: Dataset, batch_size: int = 250) -> float:
    """Top-1 eval-mode accuracy of a dense network or pruned graph."""
    preds = [np.argmax(model.predict(x), axis=1) for _, x, _ in dataset.batches(batch_size)]
    if not preds:
        return 0.0
    return float(np.mean(np.concatenate(preds) == dataset.y))


def _fit(
    params: list,
    forward: Callable[[np.ndarray, np.ndarray], tuple],
    data: Dataset,
    epochs: int,
    opt: Adam,
    rng: Rng,
    batch_size: int,
    on_step: Optional[Callable] = None,
    on_epoch: Optional[Callable[[int], None]] = None,
):
    """Minibatch loop shared by every training phase."""
    for epoch in range(epochs):
        erng = rng.derive(epoch)
        for idx, x, y in data.batches(batch_size, erng):
            loss, extra = forward(idx, x, y)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if on_step is not None:
                on_step(epoch, loss, extra)
        if on_epoch is not None:
            on_epoch(epoch)


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherResult:
    network: Network
    cache: LogitsCache
    train_accuracy: float
    eval_accuracy: float
    log: RunLog


def train_teacher(spec: NetworkSpec, train: Dataset, evalset: Dataset, cfg: TrainConfig) -> TeacherResult:
    """Train the unpruned network (gates bypassed) and cache its training logits."""
    if train.num_classes != spec.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, network expects {spec.num_classes}")
    root = Rng(cfg.seed)
    net = build_network(spec, root.derive(100))
    net.use_gates = False
    runlog = RunLog()
    opt = Adam(net.weight_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    step = [0]

    def forward(idx, x, y):
        loss = T.cross_entropy_logits(net.forward(x, None, training=True), y)
        return loss, None

    def on_step(epoch, loss, _):
        runlog.record(step=step[0], phase=0, epoch=epoch, loss_hard=loss.item(), loss_data=loss.item(), total=loss.item())
        step[0] += 1

    _fit(net.weight_params(), forward, train, cfg.teacher_epochs_hi, opt, root.derive(101), cfg.batch_size, on_step)
    opt.lr = cfg.lr_low
    _fit(net.weight_params(), forward, train, cfg.teacher_epochs_lo, opt, root.derive(102), cfg.batch_size, on_step)

    cache = predict_whole_dataset(net, train.x)
    train_acc = accuracy_from_logits(cache.logits, train.y)
    eval_acc = evaluate(net, evalset)
    if runlog.steps:
        runlog.steps[-1]["accuracy"] = eval_acc
    runlog.report = {"train_accuracy": train_acc, "eval_accuracy": eval_acc}
    return TeacherResult(net, cache, train_acc, eval_acc, runlog)


# ---------------------------------------------------------------------------
# BAR


@dataclass
class BarResult:
    graph: PrunedGraph
    network: Network
    log: RunLog
    budget: BudgetState
    costs: CostReport
    final_volume: float
    accuracy: float
    phi_frozen: bool


def _budget_for(net: Network, cfg: TrainConfig) -> BudgetState:
    metric = cfg.loss.metric
    total = full_volume(net.layers) if metric == "volume" else full_flops(net.layers)
    return make_budget(total, cfg.budget_fraction, metric=metric, schedule=cfg.schedule, sigmoid_d=cfg.sigmoid_d)


def _phi_snapshot(net: Network) -> list[np.ndarray]:
    return [p.value.copy() for p in net.gate_params()]


def bar_train(
    spec: NetworkSpec,
    train: Dataset,
    evalset: Dataset,
    cache: LogitsCache,
    cfg: TrainConfig,
    teacher: Optional[Network] = None,
) -> BarResult:
    """Run the full BAR procedure and return the fine-tuned pruned graph.

    Raises :class:`BudgetViolation` (with ``.result`` attached) if the hard
    volume after the soft-pruning phase exceeds the budget.
    """
    if cache.n_samples != len(train) or cache.n_classes != spec.num_classes:
        raise ConfigError(f"logits cache {cache.logits.shape} does not match dataset ({len(train)}, {spec.num_classes})")
    lc = cfg.loss
    root = Rng(cfg.seed)
    net = build_network(spec, root.derive(200))
    if cfg.teacher_init and teacher is not None:
        _copy_weights(teacher, net)
    state = _budget_for(net, cfg)
    runlog = RunLog()
    runlog.event(f"budget: metric={state.metric} V_F={state.v_full} B={state.budget} a={state.lower}")

    opt_w = Adam(net.weight_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_phi = Adam(net.gate_params(), lr=cfg.gate_lr)
    gate_rng = root.derive(201)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs_train * steps_per_epoch
    step = 0
    pressure = 1.0
    measure = hard_volume if state.metric == "volume" else hard_flops

    def soft_step(epoch, progress, idx, x, y):
        nonlocal state, pressure, step
        state = update_budget(state, progress)
        masks = net.effective_masks()
        z = net.sample(gate_rng)
        logits = net.forward(x, z, training=True)
        kd = kd_terms(logits, y, cache.rows(idx), lc.kd_alpha, lc.temperature)
        current = measure(net.layers, masks)
        if current >= state.upper:
            lag = (current - state.lower) / (state.upper - state.lower)
            cap = min(cfg.barrier_cap, cfg.violation_coef * lag**2 * pressure)
            pressure *= cfg.violation_growth
        else:
            cap = cfg.barrier_cap
            pressure = max(1.0, pressure / cfg.violation_growth)
            if current < state.upper - cfg.coast_slack * state.v_full:
                # gates die in waves; momentum may carry them only a little past the bound
                opt_phi.reset_momentum()
        bar = bar_loss(net.layers, net.gates, masks, state, cap=cap)
        total = kd.total + bar.loss * lc.lam
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if bar.violated:
            runlog.event(f"step {step}: budget violation V={bar.current} >= b={state.upper}")
        opt_w.zero_grad()
        opt_phi.zero_grad()
        T.backward(total)
        opt_w.step()
        opt_phi.step()
        net.clamp_protected()
        runlog.record(
            step=step, phase=1, epoch=epoch, progress=progress, b=state.upper, V=bar.current,
            flops=hard_flops(net.layers, masks) if state.metric == "volume" else bar.current,
            loss_hard=kd.hard.item(), loss_soft=kd.soft.item(), loss_data=kd.total.item(),
            l_s=bar.expected.item(), barrier=bar.coefficient, loss_bar=bar.loss.item(),
            total=total.item(), violation=bar.violated,
        )
        step += 1

    # phase 1: soft pruning under the moving budget
    shuffle = root.derive(202)
    for epoch in range(cfg.epochs_train):
        for idx, x, y in train.batches(cfg.batch_size, shuffle.derive(epoch)):
            soft_step(epoch, step / (total_steps - 1) if total_steps > 1 else 1.0, idx, x, y)
        if (epoch + 1) % cfg.eval_every == 0:
            runlog.steps[-1]["accuracy"] = evaluate(net, evalset)

    # the bound reaches the budget only on the last scheduled step, so the gates may trail it by one
    for epoch in range(cfg.epochs_train, cfg.epochs_train + cfg.settle_epochs):
        settled = False
        for idx, x, y in train.batches(cfg.batch_size, shuffle.derive(epoch)):
            settled = measure(net.layers, net.effective_masks()) <= state.budget
            if settled:
                break
            soft_step(epoch, 1.0, idx, x, y)
        if settled:
            break
    if step > total_steps:
        runlog.event(f"settled at budget after {step - total_steps} extra steps")

    # hard prune
    masks = net.effective_masks()
    final_metric = measure(net.layers, masks)
    graph = hard_prune(net, masks=None)
    phi_before = _phi_snapshot(net)
    runlog.event(f"hard prune: {state.metric}={final_metric} budget={state.budget} dropped={list(graph.dropped)}")

    # phases 2 and 3: fine-tune the pruned graph with the data loss only
    opt = Adam(graph.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    frozen = [True]
    final_v = hard_volume(net.layers, masks)
    final_f = hard_flops(net.layers, masks)

    def forward(idx, x, y):
        kd = kd_terms(graph.forward(x, training=True), y, cache.rows(idx), lc.kd_alpha, lc.temperature)
        return kd.total, kd

    def make_logger(phase):
        def on_step(epoch, loss, kd):
            nonlocal step
            frozen[0] &= all(np.array_equal(a, p.value) for a, p in zip(phi_before, net.gate_params()))
            runlog.record(
                step=step, phase=phase, epoch=epoch, progress=1.0, b=state.budget, V=final_v, flops=final_f,
                loss_hard=kd.hard.item(), loss_soft=kd.soft.item(), loss_data=kd.total.item(),
                l_s=0.0, barrier=0.0, loss_bar=0.0, total=loss.item(), violation=False,
            )
            step += 1

        def on_epoch(epoch):
            if (epoch + 1) % cfg.eval_every == 0:
                runlog.steps[-1]["accuracy"] = evaluate(graph, evalset)

        return on_step, on_epoch

    _fit(graph.params(), forward, train, cfg.epochs_finetune_hi, opt, root.derive(203), cfg.batch_size, *make_logger(2))
    opt.lr = cfg.lr_low
    _fit(graph.params(), forward, train, cfg.epochs_finetune_lo, opt, root.derive(204), cfg.batch_size, *make_logger(3))

    acc = evaluate(graph, evalset)
    costs = cost_report(graph)
    runlog.report = {
        "V_F": state.v_full if state.metric == "volume" else full_volume(net.layers),
        "V": final_v,
        "B": state.budget,
        "metric": state.metric,
        "accuracy": acc,
        **costs.as_dict(),
    }
    result = BarResult(graph, net, runlog, state, costs, final_metric, acc, frozen[0])
    if final_metric > state.budget:
        err = BudgetViolation(f"final {state.metric} {final_metric} exceeds budget {state.budget}")
        err.result = result
        raise err
    return result


def _copy_weights(src: Network, dst: Network) -> None:
    for n, u in src.units.items():
        d = dst.units[n]
        d.weight.value[...] = u.weight.value
        d.gamma.value[...] = u.gamma.value
        d.beta.value[...] = u.beta.value
        d.bn.mean[...] = u.bn.mean
        d.bn.var[...] = u.bn.var
    dst.head_w.value[...] = src.head_w.value
    dst.head_b.value[...] = src.head_b.value


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineStep:
    factor: int
    graph: PrunedGraph
    accuracy: float
    costs: CostReport
    log: RunLog


def filter_magnitudes(weight: np.ndarray) -> np.ndarray:
    """Sum of absolute weights of each output filter."""
    return np.abs(weight).reshape(weight.shape[0], -1).sum(axis=1)


def select_filters(kind: str, weight: np.ndarray, current: np.ndarray, keep: int, rng: Rng) -> np.ndarray:
    """Keep-mask with ``keep`` of the currently kept filters.

    ``weight_magnitude`` keeps the largest absolute-sum filters (ties to the
    lower index); ``random`` keeps a uniform random subset.
    """
    candidates = np.flatnonzero(current)
    keep = min(max(keep, 1), len(candidates))
    if kind == "weight_magnitude":
        mags = filter_magnitudes(weight)[candidates]
        order = np.lexsort((candidates, -mags))
        chosen = candidates[order[:keep]]
    elif kind == "random":
        chosen = candidates[rng.choice(len(candidates), keep)]
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    mask = np.zeros_like(current)
    mask[chosen] = True
    return mask


def baseline_prune(
    kind: str,
    teacher: Network,
    train: Dataset,
    evalset: Dataset,
    cfg: TrainConfig,
    factors: Sequence[int] = (2, 4, 8, 16),
) -> list[BaselineStep]:
    """Iterative width-scaling baseline starting from the trained unpruned network.

    Each round scales every layer to ``max(1, floor(width / factor))`` kept
    maps (chosen among the maps kept by the previous round), then retrains the
    pruned graph at the base and low learning rates.
    """
    net = teacher.copy()
    net.use_gates = False
    rng = Rng(cfg.seed).derive(300)
    masks = {n: np.ones(u.layout.out_channels, dtype=bool) for n, u in net.units.items()}
    out = []
    for r, factor in enumerate(factors):
        masks = {
            n: select_filters(kind, u.weight.value, masks[n], u.layout.out_channels // factor, rng.derive(r, i))
            for i, (n, u) in enumerate(net.units.items())
        }
        graph = hard_prune(net, masks)
        runlog = RunLog()
        opt = Adam(graph.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        step = [0]

        def forward(idx, x, y, graph=graph):
            loss = T.cross_entropy_logits(graph.forward(x, training=True), y)
            return loss, None

        def on_step(epoch, loss, _, runlog=runlog):
            runlog.record(step=step[0], phase=2, epoch=epoch, loss_hard=loss.item(), loss_data=loss.item(), total=loss.item())
            step[0] += 1

        _fit(graph.params(), forward, train, cfg.baseline_epochs_hi, opt, rng.derive(r, 1000), cfg.batch_size, on_step)
        opt.lr = cfg.lr_low
        _fit(graph.params(), forward, train, cfg.baseline_epochs_lo, opt, rng.derive(r, 1001), cfg.batch_size, on_step)
        write_back(graph, net)
        acc = evaluate(graph, evalset)
        costs = cost_report(graph)
        runlog.report = {"factor": factor, "accuracy": acc, **costs.as_dict()}
        out.append(BaselineStep(factor, graph, acc, costs, runlog))
    return out
