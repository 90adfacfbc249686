"""Hard Concrete feature-map gates.

A gate vector holds one location parameter ``log_alpha`` per feature map.
Training draws ``z`` through the inverse CDF of the stretched-and-clamped
Binary Concrete distribution; inference replaces the uniform noise by its
mean, which makes ``z`` deterministic and exactly zero for pruned maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Node, Rng

EPS_CLAMP = 1e-7


@dataclass(frozen=True)
class HCConfig:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.gamma < 0 < 1 < self.zeta):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")

    @property
    def death_threshold(self) -> float:
        """log_alpha below (or at) which the deterministic gate is exactly 0."""
        s = -self.gamma / (self.zeta - self.gamma)
        return self.beta * math.log(s / (1.0 - s))

    @property
    def l0_shift(self) -> float:
        return self.beta * math.log(-self.gamma / self.zeta)


DEFAULT_HC = HCConfig()


@dataclass
class GateParams:
    log_alpha: Node
    hc: HCConfig = DEFAULT_HC
    clamp_protect: bool = False

    def __post_init__(self):
        if self.log_alpha.value.ndim != 1:
            raise DimensionError(f"log_alpha must be a vector, got shape {self.log_alpha.shape}")

    @property
    def channels(self) -> int:
        return self.log_alpha.shape[0]


@dataclass
class GateSample:
    z: Node
    mode: str  # "stochastic" | "deterministic" | "fixed"

    @property
    def values(self) -> np.ndarray:
        return self.z.value


def init_gate_params(
    channels: int,
    rng: Rng,
    hc: HCConfig = DEFAULT_HC,
    clamp_protect: bool = False,
    dtype=T.DEFAULT_DTYPE,
    name: Optional[str] = None,
) -> GateParams:
    if channels < 1:
        raise ValueError(f"gate vector needs at least one channel, got {channels}")
    la = rng.uniform(0.0, 0.01, size=channels, dtype=dtype)
    return GateParams(T.parameter(la, name=name), hc, clamp_protect)


def _stretch(pre: Node, hc: HCConfig) -> Node:
    s = T.sigmoid(pre * (1.0 / hc.beta))
    return T.clip(s * (hc.zeta - hc.gamma) + hc.gamma, 0.0, 1.0)


def sample_gates(phi: GateParams, rng: Rng, eps: Optional[np.ndarray] = None) -> GateSample:
    """Draw one gate value per feature map by inverse-CDF sampling.

    ``eps`` overrides the uniform draw (tests use it to hold the noise fixed).
    """
    if eps is None:
        eps = rng.uniform(0.0, 1.0, size=phi.channels)
    eps = np.clip(np.asarray(eps, dtype=np.float64), EPS_CLAMP, 1.0 - EPS_CLAMP)
    noise = (np.log(eps) - np.log1p(-eps)).astype(phi.log_alpha.dtype)
    z = _stretch(phi.log_alpha + noise, phi.hc)
    return GateSample(z, "stochastic")


def deterministic_gates(phi: GateParams) -> GateSample:
    return GateSample(_stretch(phi.log_alpha, phi.hc), "deterministic")


def alive_mask(phi: GateParams) -> np.ndarray:
    alive = deterministic_gates(phi).values > 0
    if phi.clamp_protect and not alive.any():
        alive[int(np.argmax(phi.log_alpha.value))] = True
    return alive


def hc_sparsity_loss(phi: GateParams) -> Node:
    """Expected number of non-zero gates, ``sum_i P(z_i > 0)``."""
    return T.sum_all(gate_open_probability(phi))


def gate_open_probability(phi: GateParams) -> Node:
    """Per-map ``P(z_i > 0) = sigmoid(log_alpha - beta*log(-gamma/zeta))``."""
    return T.sigmoid(phi.log_alpha - phi.hc.l0_shift)


def apply_gates(h: Node, z: GateSample | Node) -> Node:
    zn = z.z if isinstance(z, GateSample) else z
    if h.value.ndim != 4 or zn.value.ndim != 1 or zn.shape[0] != h.shape[1]:
        raise DimensionError(f"apply_gates: {zn.shape} gate values for input of shape {h.shape}")
    return T.mul(h, T.reshape(zn, (1, h.shape[1], 1, 1)))
