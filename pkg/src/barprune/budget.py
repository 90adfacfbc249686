"""Budget accounting, the barrier penalty, budget schedules and the BAR term.

Cost functions work on a flat list of :class:`LayerCost` records, one per
gated convolution.  Each record names the gated producers whose alive sets
form its input; several producers mean the input is a residual sum whose
alive set is the union of theirs.  An empty ``inputs`` tuple means the
network input, whose channels are always alive.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import GraphError
from .gates import GateParams, gate_open_probability
from .tensor import Node

log = logging.getLogger(__name__)

BARRIER_CAP = 1e30
LOWER_MARGIN = 1e-4
EXP_RATE = 5.0
METRICS = ("volume", "flop")
SCHEDULES = ("linear", "exp", "sigmoid")


@dataclass(frozen=True)
class LayerCost:
    name: str
    area: int
    out_channels: int
    in_channels: int
    kernel: int
    stride: int = 1
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.area < 1 or self.out_channels < 1 or self.in_channels < 1:
            raise ValueError(f"{self.name}: area and channel counts must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-5
    kd_alpha: float = 0.9
    temperature: float = 4.0
    metric: str = "volume"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.kd_alpha <= 1.0:
            raise ValueError("kd_alpha must lie in [0, 1]")
        if self.temperature < 1:
            raise ValueError("temperature must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


# ---------------------------------------------------------------------------
# cost metrics


def _input_alive(layer: LayerCost, masks: Mapping[str, np.ndarray]) -> int:
    if not layer.inputs:
        return layer.in_channels
    try:
        union = np.zeros(layer.in_channels, dtype=bool)
        for src in layer.inputs:
            union |= masks[src]
    except KeyError as exc:
        raise GraphError(f"{layer.name}: unresolved predecessor {exc.args[0]!r}") from None
    return int(union.sum())


def hard_volume(layers: Sequence[LayerCost], masks: Mapping[str, np.ndarray]) -> float:
    """Activation volume of the hard-pruned network: alive maps times output area."""
    return float(sum(int(np.count_nonzero(masks[l.name])) * l.area for l in layers))


def hard_flops(layers: Sequence[LayerCost], masks: Mapping[str, np.ndarray]) -> float:
    """Convolution multiply-accumulates of the hard-pruned network."""
    total = 0
    for l in layers:
        out = int(np.count_nonzero(masks[l.name]))
        if out:
            total += out * _input_alive(l, masks) * l.kernel * l.kernel * l.area
    return float(total)


def full_volume(layers: Sequence[LayerCost]) -> float:
    return float(sum(l.out_channels * l.area for l in layers))


def full_flops(layers: Sequence[LayerCost]) -> float:
    return float(sum(l.out_channels * l.in_channels * l.kernel**2 * l.area for l in layers))


def expected_volume_loss(layers: Sequence[LayerCost], gates: Mapping[str, GateParams]) -> Node:
    """Differentiable expectation of the activation volume."""
    terms = [_expected_alive(gates, l.name) * float(l.area) for l in layers]
    return _sum_nodes(terms)


def expected_flop_loss(layers: Sequence[LayerCost], gates: Mapping[str, GateParams]) -> Node:
    """Differentiable FLOP surrogate: E[alive out] * E[alive in] * k^2 * area.

    Producer and consumer gates are treated as independent.  For a union input
    the expected alive count of channel j is ``1 - prod_p (1 - P_p(z_j > 0))``.
    """
    terms = []
    for l in layers:
        e_out = _expected_alive(gates, l.name)
        e_in = _expected_input(l, gates)
        terms.append(e_out * e_in * float(l.kernel * l.kernel * l.area))
    return _sum_nodes(terms)


def _expected_alive(gates: Mapping[str, GateParams], name: str) -> Node:
    try:
        return T.sum_all(gate_open_probability(gates[name]))
    except KeyError:
        raise GraphError(f"no gate registered for layer {name!r}") from None


def _expected_input(layer: LayerCost, gates: Mapping[str, GateParams]):
    if not layer.inputs:
        return float(layer.in_channels)
    if len(layer.inputs) == 1:
        return _expected_alive(gates, layer.inputs[0])
    closed = None
    for src in layer.inputs:
        if src not in gates:
            raise GraphError(f"{layer.name}: unresolved predecessor {src!r}")
        q = 1.0 - gate_open_probability(gates[src])
        closed = q if closed is None else closed * q
    return T.sum_all(1.0 - closed)


def _sum_nodes(terms: list) -> Node:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------------------
# barrier and schedules


def barrier(cost: float, lower: float, upper: float) -> float:
    """Zero at or below ``lower``; ``(cost-lower)^2 / ((upper-cost)(upper-lower))`` between; sentinel at ``upper``."""
    cost, lower, upper = float(cost), float(lower), float(upper)
    if not lower < upper:
        raise ValueError(f"barrier requires lower < upper, got lower={lower}, upper={upper}")
    if cost <= lower:
        return 0.0
    if cost >= upper:
        return BARRIER_CAP
    return min((cost - lower) ** 2 / ((upper - cost) * (upper - lower)), BARRIER_CAP)


def transition(progress: float, kind: str = "sigmoid", steepness: float = 10.0) -> float:
    """Schedule rising from 0 at progress 0 to 1 at progress 1."""
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}")
    if not 0.0 <= progress <= 1.0:
        log.warning("progress %r outside [0, 1]; clamped", progress)
        progress = min(max(progress, 0.0), 1.0)
    if progress == 0.0:
        return 0.0
    if progress == 1.0:
        return 1.0
    if kind == "linear":
        return progress
    if kind == "exp":
        return -math.expm1(-EXP_RATE * progress) / -math.expm1(-EXP_RATE)
    edge = _sigmoid(-0.5 * steepness)
    return (_sigmoid(steepness * (progress - 0.5)) - edge) / (1.0 - 2.0 * edge)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class BudgetState:
    v_full: float
    budget: float
    metric: str = "volume"
    schedule: str = "sigmoid"
    sigmoid_d: float = 10.0
    progress: float = 0.0
    upper: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.budget < self.v_full:
            raise ValueError(f"budget must lie in (0, V_F), got B={self.budget}, V_F={self.v_full}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.upper is None:
            object.__setattr__(self, "upper", float(self.v_full))

    @property
    def lower(self) -> float:
        return self.budget - LOWER_MARGIN * self.v_full


def make_budget(v_full: float, fraction: float, **kwargs) -> BudgetState:
    if not 0 < fraction < 1:
        raise ValueError(f"budget fraction must lie in (0, 1), got {fraction}")
    return BudgetState(float(v_full), float(v_full) * fraction, **kwargs)


def update_budget(state: BudgetState, progress: float) -> BudgetState:
    shrink = transition(progress, state.schedule, state.sigmoid_d)
    if shrink == 1.0:
        bound = state.budget
    else:
        # written as a decrement from the full cost so the bound is monotone under rounding
        bound = state.v_full - shrink * (state.v_full - state.budget)
    return replace(state, progress=float(progress), upper=bound)


# ---------------------------------------------------------------------------
# BAR objective


@dataclass
class BarTerm:
    loss: Node
    expected: Node
    coefficient: float
    current: float
    violated: bool


def bar_loss(
    layers: Sequence[LayerCost],
    gates: Mapping[str, GateParams],
    masks: Mapping[str, np.ndarray],
    state: BudgetState,
    cap: float = BARRIER_CAP,
) -> BarTerm:
    """Sparsity expectation scaled by the barrier at the current hard cost.

    The barrier value enters as a constant coefficient; only the expectation
    carries gradient.  ``cap`` bounds that coefficient.
    """
    if state.metric == "volume":
        current = hard_volume(layers, masks)
        expected = expected_volume_loss(layers, gates)
    else:
        current = hard_flops(layers, masks)
        expected = expected_flop_loss(layers, gates)
    violated = current >= state.upper
    coef = min(barrier(current, state.lower, state.upper), cap)
    return BarTerm(expected * coef, expected, coef, current, violated)
