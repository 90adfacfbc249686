"""Residual network description, gated dense forward, and the pruned graph.

Layout: a stem convolution, then stages of two-convolution residual blocks.
The first block of every stage is a pooling block whose residual path is a
strided 1x1 convolution; the remaining blocks have identity residuals.
Every convolution unit is conv -> batch norm -> ReLU -> gate.

Channels of a stage's main signal are numbered canonically from 0 to the
stage width.  After hard pruning the carried signal only stores the alive
canonical channels (sorted), and each block scatters its delta into the slots
it owns, growing the carried set when it creates a channel the residual does
not have.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .budget import LayerCost, full_flops, full_volume
from .errors import GraphError, SpecError
from .gates import (
    DEFAULT_HC,
    GateParams,
    HCConfig,
    alive_mask,
    apply_gates,
    deterministic_gates,
    init_gate_params,
    sample_gates,
)
from .tensor import BatchNormState, Node, Rng


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...] = (StageSpec(2, 16, 1), StageSpec(2, 32, 2), StageSpec(2, 64, 2))
    stem_width: int = 16
    in_channels: int = 3
    input_size: int = 16
    num_classes: int = 4
    kernel: int = 3

    def __post_init__(self):
        if not self.stages:
            raise SpecError("network needs at least one stage")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"kernel must be odd, got {self.kernel}")
        for name, v in (("stem_width", self.stem_width), ("in_channels", self.in_channels),
                        ("input_size", self.input_size), ("num_classes", self.num_classes)):
            if v < 1:
                raise SpecError(f"{name} must be >= 1, got {v}")
        size = self.input_size
        for i, st in enumerate(self.stages):
            if st.blocks < 1 or st.width < 1:
                raise SpecError(f"stage {i}: blocks and width must be >= 1")
            if st.stride not in (1, 2):
                raise SpecError(f"stage {i}: stride must be 1 or 2, got {st.stride}")
            size = (size - 1) // st.stride + 1
        if size < 1:
            raise SpecError("input too small for the stage strides")

    def to_array(self) -> np.ndarray:
        head = [self.in_channels, self.input_size, self.stem_width, self.num_classes, self.kernel, len(self.stages)]
        for st in self.stages:
            head += [st.blocks, st.width, st.stride]
        return np.array(head, dtype=np.uint32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "NetworkSpec":
        a = [int(v) for v in arr]
        n = a[5]
        stages = tuple(StageSpec(a[6 + 3 * i], a[7 + 3 * i], a[8 + 3 * i]) for i in range(n))
        return cls(stages=stages, stem_width=a[2], in_channels=a[0], input_size=a[1], num_classes=a[3], kernel=a[4])


@dataclass(frozen=True)
class UnitLayout:
    name: str
    stage: int  # -1 for the stem
    block: int
    role: str  # "stem" | "c1" | "c2" | "res"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    in_size: int
    out_size: int
    inputs: tuple[str, ...]

    @property
    def area(self) -> int:
        return self.out_size * self.out_size

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def cost(self) -> LayerCost:
        return LayerCost(self.name, self.area, self.out_channels, self.in_channels, self.kernel, self.stride, self.inputs)


def block_name(stage: int, block: int) -> str:
    return f"s{stage}.b{block}"


def layout(spec: NetworkSpec) -> list[UnitLayout]:
    """Every gated convolution in forward order, with its cost wiring."""
    k = spec.kernel
    units = [UnitLayout("stem", -1, 0, "stem", spec.in_channels, spec.stem_width, k, 1,
                        spec.input_size, spec.input_size, ())]
    signal: tuple[str, ...] = ("stem",)
    width, size = spec.stem_width, spec.input_size
    for s, st in enumerate(spec.stages):
        out_size = (size - 1) // st.stride + 1
        for b in range(st.blocks):
            pre = block_name(s, b)
            if b == 0:
                units.append(UnitLayout(f"{pre}.res", s, b, "res", width, st.width, 1, st.stride, size, out_size, signal))
                units.append(UnitLayout(f"{pre}.c1", s, b, "c1", width, st.width, k, st.stride, size, out_size, signal))
                units.append(UnitLayout(f"{pre}.c2", s, b, "c2", st.width, st.width, k, 1, out_size, out_size, (f"{pre}.c1",)))
                signal = (f"{pre}.res", f"{pre}.c2")
            else:
                units.append(UnitLayout(f"{pre}.c1", s, b, "c1", st.width, st.width, k, 1, out_size, out_size, signal))
                units.append(UnitLayout(f"{pre}.c2", s, b, "c2", st.width, st.width, k, 1, out_size, out_size, (f"{pre}.c1",)))
                signal = signal + (f"{pre}.c2",)
        width, size = st.width, out_size
    return units


def layer_costs(spec: NetworkSpec) -> list[LayerCost]:
    return [u.cost() for u in layout(spec)]


# ---------------------------------------------------------------------------
# dense gated network


@dataclass
class ConvUnit:
    layout: UnitLayout
    weight: Node
    gamma: Node
    beta: Node
    bn: BatchNormState
    gate: GateParams

    @property
    def name(self) -> str:
        return self.layout.name

    def __call__(self, x: Node, z: Optional[Node], training: bool) -> Node:
        h = T.conv2d(x, self.weight, self.layout.stride, self.layout.padding)
        h = T.relu(T.batchnorm2d(h, self.gamma, self.beta, self.bn, training))
        return h if z is None else apply_gates(h, z)


class Network:
    """Dense residual network carrying one gate vector per convolution.

    With ``use_gates`` off every gate is bypassed (the unpruned teacher).
    """

    def __init__(self, spec: NetworkSpec, units: dict[str, ConvUnit], head_w: Node, head_b: Node, use_gates: bool = True):
        self.spec = spec
        self.units = units
        self.head_w = head_w
        self.head_b = head_b
        self.use_gates = use_gates
        self.layers = layer_costs(spec)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def gates(self) -> dict[str, GateParams]:
        return {name: u.gate for name, u in self.units.items()}

    def weight_params(self) -> list[Node]:
        out = []
        for u in self.units.values():
            out += [u.weight, u.gamma, u.beta]
        return out + [self.head_w, self.head_b]

    def gate_params(self) -> list[Node]:
        return [u.gate.log_alpha for u in self.units.values()]

    def sample(self, rng: Rng) -> dict[str, Node]:
        return {name: sample_gates(u.gate, rng).z for name, u in self.units.items()}

    def deterministic(self) -> dict[str, Node]:
        return {name: deterministic_gates(u.gate).z for name, u in self.units.items()}

    def forward(self, x, gate_values: Optional[Mapping[str, Node]] = None, training: bool = False) -> Node:
        """Dense forward; ``gate_values`` maps unit name to z (missing -> ungated)."""
        x = T.as_node(x, self.head_w.dtype) if not isinstance(x, Node) else x
        gv = gate_values or {}

        def run(name: str, inp: Node) -> Node:
            return self.units[name](inp, _as_gate_node(gv.get(name), inp.dtype), training)

        h = run("stem", x)
        for s, st in enumerate(self.spec.stages):
            for b in range(st.blocks):
                pre = block_name(s, b)
                delta = run(f"{pre}.c2", run(f"{pre}.c1", h))
                h = (run(f"{pre}.res", h) if b == 0 else h) + delta
        return T.linear(T.global_avg_pool(h), self.head_w, self.head_b)

    def predict(self, x: np.ndarray) -> np.ndarray:
        gv = self.deterministic() if self.use_gates else None
        return self.forward(np.asarray(x, dtype=self.head_w.dtype), gv, training=False).value

    def clamp_protected(self, margin: float = 0.25) -> None:
        """Keep at least one open gate in every protected vector by raising its largest log_alpha."""
        for u in self.units.values():
            g = u.gate
            if not g.clamp_protect:
                continue
            floor = g.hc.death_threshold + margin
            la = g.log_alpha.value
            i = int(np.argmax(la))
            if la[i] <= g.hc.death_threshold:
                la[i] = floor

    def effective_masks(self) -> dict[str, np.ndarray]:
        """Alive masks after removing computation that cannot reach the output.

        A block whose last convolution has no alive map contributes nothing, so
        its inner convolution is dead as well.
        """
        if not self.use_gates:
            return {n: np.ones(u.layout.out_channels, dtype=bool) for n, u in self.units.items()}
        masks = {n: alive_mask(u.gate) for n, u in self.units.items()}
        for s, st in enumerate(self.spec.stages):
            for b in range(st.blocks):
                pre = block_name(s, b)
                if not masks[f"{pre}.c2"].any():
                    masks[f"{pre}.c1"][:] = False
        return masks

    def gate_values(self) -> dict[str, np.ndarray]:
        if not self.use_gates:
            return {n: np.ones(u.layout.out_channels, dtype=self.head_w.dtype) for n, u in self.units.items()}
        return {n: deterministic_gates(u.gate).values for n, u in self.units.items()}

    def astype(self, dtype) -> "Network":
        """Deep copy with every array cast to ``dtype``."""
        units = {}
        for n, u in self.units.items():
            bn = BatchNormState(u.bn.mean.astype(dtype), u.bn.var.astype(dtype), u.bn.momentum, u.bn.eps)
            gate = GateParams(T.parameter(u.gate.log_alpha.value.astype(dtype), n), u.gate.hc, u.gate.clamp_protect)
            units[n] = ConvUnit(u.layout, T.parameter(u.weight.value.astype(dtype)), T.parameter(u.gamma.value.astype(dtype)),
                                T.parameter(u.beta.value.astype(dtype)), bn, gate)
        return Network(self.spec, units, T.parameter(self.head_w.value.astype(dtype)),
                       T.parameter(self.head_b.value.astype(dtype)), self.use_gates)

    def copy(self) -> "Network":
        return self.astype(self.head_w.dtype)

    # persistence
    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "meta.kind": np.array([0], np.uint32),
            "meta.spec": self.spec.to_array(),
            "meta.use_gates": np.array([int(self.use_gates)], np.uint32),
        }
        for n, u in self.units.items():
            arrays[f"u.{n}.weight"] = u.weight.value
            arrays[f"u.{n}.gamma"] = u.gamma.value
            arrays[f"u.{n}.beta"] = u.beta.value
            arrays[f"u.{n}.run_mean"] = u.bn.mean
            arrays[f"u.{n}.run_var"] = u.bn.var
            arrays[f"u.{n}.log_alpha"] = u.gate.log_alpha.value
        arrays["head.weight"] = self.head_w.value
        arrays["head.bias"] = self.head_b.value
        return {k: np.ascontiguousarray(v, dtype=np.float32 if v.dtype.kind == "f" else v.dtype) for k, v in arrays.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], hc: HCConfig = DEFAULT_HC) -> "Network":
        if int(arrays["meta.kind"][0]) != 0:
            raise GraphError("checkpoint does not hold a dense network")
        spec = NetworkSpec.from_array(arrays["meta.spec"])
        units = {}
        for lay in layout(spec):
            n = lay.name
            bn = BatchNormState(arrays[f"u.{n}.run_mean"].copy(), arrays[f"u.{n}.run_var"].copy())
            gate = GateParams(T.parameter(arrays[f"u.{n}.log_alpha"].copy(), n), hc, _protected(lay))
            units[n] = ConvUnit(lay, T.parameter(arrays[f"u.{n}.weight"].copy()), T.parameter(arrays[f"u.{n}.gamma"].copy()),
                                T.parameter(arrays[f"u.{n}.beta"].copy()), bn, gate)
        return cls(spec, units, T.parameter(arrays["head.weight"].copy()), T.parameter(arrays["head.bias"].copy()),
                   bool(arrays["meta.use_gates"][0]))


def _as_gate_node(z, dtype) -> Optional[Node]:
    if z is None or isinstance(z, Node):
        return z
    return Node(np.asarray(z, dtype=dtype))


def _protected(lay: UnitLayout) -> bool:
    # the stem and pooling-block residual convs are the only paths a signal can take
    return lay.role in ("res", "stem")


def build_network(spec: NetworkSpec, rng: Rng, dtype=T.DEFAULT_DTYPE, hc: HCConfig = DEFAULT_HC) -> Network:
    """Initialise weights (Kaiming-uniform) and gates (log_alpha ~ U(0, 0.01))."""
    units = {}
    for idx, lay in enumerate(layout(spec)):
        wrng = rng.derive(1, idx)
        fan_in = lay.in_channels * lay.kernel * lay.kernel
        w = T.kaiming_uniform((lay.out_channels, lay.in_channels, lay.kernel, lay.kernel), fan_in, wrng, dtype)
        gate = init_gate_params(lay.out_channels, rng.derive(2, idx), hc, _protected(lay), dtype, lay.name)
        units[lay.name] = ConvUnit(
            lay,
            T.parameter(w, f"{lay.name}.weight"),
            T.parameter(np.ones(lay.out_channels, dtype), f"{lay.name}.gamma"),
            T.parameter(np.zeros(lay.out_channels, dtype), f"{lay.name}.beta"),
            BatchNormState.fresh(lay.out_channels, dtype),
            gate,
        )
    last = spec.stages[-1].width
    bound = 1.0 / np.sqrt(last)
    hrng = rng.derive(3)
    head_w = T.parameter(hrng.uniform(-bound, bound, (spec.num_classes, last), dtype), "head.weight")
    head_b = T.parameter(np.zeros(spec.num_classes, dtype), "head.bias")
    return Network(spec, units, head_w, head_b)


def forward_soft(net: Network, x, rng: Optional[Rng] = None, mode: str = "train") -> Node:
    """Gated forward: sampled gates and batch statistics in train mode,
    deterministic gates and running statistics in eval mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not net.use_gates:
        return net.forward(x, None, training=mode == "train")
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for gate sampling")
        return net.forward(x, net.sample(rng), training=True)
    return net.forward(x, net.deterministic(), training=False)


# ---------------------------------------------------------------------------
# pruned graph


@dataclass
class PrunedUnit:
    layout: UnitLayout
    out_idx: np.ndarray  # canonical alive output channels
    weight: Node  # [len(out_idx), inputs, k, k]
    gamma: Node
    beta: Node
    bn: BatchNormState

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1])

    def __call__(self, x: Optional[Node], batch: int, training: bool) -> Node:
        lay = self.layout
        if self.in_channels == 0:
            # every input map is pruned: the convolution output is identically zero
            pre = Node(np.zeros((batch, self.out_channels, lay.out_size, lay.out_size), dtype=self.weight.dtype))
        else:
            pre = T.conv2d(x, self.weight, lay.stride, lay.padding)
        return T.relu(T.batchnorm2d(pre, self.gamma, self.beta, self.bn, training))

    def params(self) -> list[Node]:
        return [self.weight, self.gamma, self.beta]

    def flops(self) -> int:
        k = self.layout.kernel
        return self.out_channels * self.in_channels * k * k * self.layout.area

    def volume(self) -> int:
        return self.out_channels * self.layout.area


@dataclass
class PrunedBlock:
    stage: int
    index: int
    i_in: np.ndarray  # canonical channels of the incoming carried signal
    i_delta: np.ndarray  # canonical channels written by the delta branch
    c1: Optional[PrunedUnit]
    c2: Optional[PrunedUnit]
    res: Optional[PrunedUnit] = None  # pooling blocks only
    n_res: int = 0

    def __post_init__(self):
        self.out_idx = np.union1d(self.i_res if self.res is not None else self.i_in, self.i_delta).astype(np.int64)
        self._pos_carry = np.searchsorted(self.out_idx, self.i_res if self.res is not None else self.i_in)
        self._pos_delta = np.searchsorted(self.out_idx, self.i_delta)
        self._grows = len(self.out_idx) != len(self._pos_carry)

    @property
    def name(self) -> str:
        return block_name(self.stage, self.index)

    @property
    def i_res(self) -> np.ndarray:
        return self.res.out_idx if self.res is not None else np.zeros(0, np.int64)

    @property
    def pooling(self) -> bool:
        return self.res is not None

    def units(self) -> list[PrunedUnit]:
        return [u for u in (self.res, self.c1, self.c2) if u is not None]

    def __call__(self, x: Node, training: bool) -> Node:
        n = x.shape[0]
        carry = self.res(x, n, training) if self.res is not None else x
        if self.c2 is None:
            return carry
        mid = self.c1(x, n, training) if self.c1 is not None else None
        delta = self.c2(mid, n, training)
        width = len(self.out_idx)
        if self._grows:
            carry = T.scatter_channels(carry, self._pos_carry, width)
        return carry + T.scatter_channels(delta, self._pos_delta, width)


@dataclass
class PrunedGraph:
    spec: NetworkSpec
    stem: PrunedUnit
    blocks: list[PrunedBlock]
    dropped: tuple[str, ...]
    final_idx: np.ndarray
    head_w: Node
    head_b: Node

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def units(self) -> list[PrunedUnit]:
        out = [self.stem]
        for blk in self.blocks:
            out += blk.units()
        return out

    def params(self) -> list[Node]:
        out = []
        for u in self.units():
            out += u.params()
        return out + [self.head_w, self.head_b]

    def forward(self, x, training: bool = False) -> Node:
        x = T.as_node(x, self.head_w.dtype) if not isinstance(x, Node) else x
        h = self.stem(x, x.shape[0], training)
        for blk in self.blocks:
            h = blk(h, training)
        return T.linear(T.global_avg_pool(h), self.head_w, self.head_b)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=self.head_w.dtype), training=False).value

    def volume(self) -> float:
        return float(sum(u.volume() for u in self.units()))

    def flops(self) -> float:
        return float(sum(u.flops() for u in self.units()))

    # persistence
    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {
            "meta.kind": np.array([1], np.uint32),
            "meta.spec": self.spec.to_array(),
            "meta.blocks": np.array([[b.stage, b.index] for b in self.blocks], np.uint32).reshape(-1),
            "meta.final_idx": np.asarray(self.final_idx, np.uint32),
        }
        for u in self.units():
            n = u.layout.name
            arrays[f"u.{n}.out_idx"] = np.asarray(u.out_idx, np.uint32)
            arrays[f"u.{n}.weight"] = u.weight.value
            arrays[f"u.{n}.gamma"] = u.gamma.value
            arrays[f"u.{n}.beta"] = u.beta.value
            arrays[f"u.{n}.run_mean"] = u.bn.mean
            arrays[f"u.{n}.run_var"] = u.bn.var
        for b in self.blocks:
            pre = f"blk.{b.name}"
            arrays[f"{pre}.i_in"] = np.asarray(b.i_in, np.uint32)
            arrays[f"{pre}.i_delta"] = np.asarray(b.i_delta, np.uint32)
            if b.pooling:
                arrays[f"{pre}.i_res"] = np.asarray(b.i_res, np.uint32)
                arrays[f"{pre}.n_res"] = np.array([b.n_res], np.uint32)
        arrays["head.weight"] = self.head_w.value
        arrays["head.bias"] = self.head_b.value
        return {k: np.ascontiguousarray(v, dtype=np.float32 if v.dtype.kind == "f" else v.dtype) for k, v in arrays.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "PrunedGraph":
        if int(arrays["meta.kind"][0]) != 1:
            raise GraphError("checkpoint does not hold a pruned graph")
        spec = NetworkSpec.from_array(arrays["meta.spec"])
        lays = {l.name: l for l in layout(spec)}

        def unit(name: str) -> Optional[PrunedUnit]:
            if f"u.{name}.weight" not in arrays:
                return None
            return PrunedUnit(
                lays[name],
                arrays[f"u.{name}.out_idx"].astype(np.int64),
                T.parameter(arrays[f"u.{name}.weight"].copy()),
                T.parameter(arrays[f"u.{name}.gamma"].copy()),
                T.parameter(arrays[f"u.{name}.beta"].copy()),
                BatchNormState(arrays[f"u.{name}.run_mean"].copy(), arrays[f"u.{name}.run_var"].copy()),
            )

        present = arrays["meta.blocks"].astype(np.int64).reshape(-1, 2)
        blocks = []
        for s, b in present:
            pre = block_name(int(s), int(b))
            key = f"blk.{pre}"
            res = unit(f"{pre}.res")
            blocks.append(PrunedBlock(
                int(s), int(b),
                arrays[f"{key}.i_in"].astype(np.int64),
                arrays[f"{key}.i_delta"].astype(np.int64),
                unit(f"{pre}.c1"),
                unit(f"{pre}.c2"),
                res,
                int(arrays[f"{key}.n_res"][0]) if res is not None else 0,
            ))
        present_names = {blk.name for blk in blocks}
        dropped = tuple(block_name(s, b) for s, st in enumerate(spec.stages) for b in range(st.blocks)
                        if block_name(s, b) not in present_names)
        return cls(spec, unit("stem"), blocks, dropped, arrays["meta.final_idx"].astype(np.int64),
                   T.parameter(arrays["head.weight"].copy()), T.parameter(arrays["head.bias"].copy()))


def _prune_unit(u: ConvUnit, out_idx: np.ndarray, in_idx: Optional[np.ndarray], z: np.ndarray) -> PrunedUnit:
    """Slice one unit to its alive maps and fold the gate values into the BN affine.

    ``z * relu(bn(x)) == relu(z * bn(x))`` for z >= 0, so scaling gamma and beta
    by z reproduces the gated output without a multiply at inference.
    """
    w = u.weight.value[out_idx]
    w = w[:, in_idx] if in_idx is not None else w[:, :0]
    zf = z[out_idx].astype(u.gamma.dtype)
    return PrunedUnit(
        u.layout,
        np.asarray(out_idx, np.int64),
        T.parameter(np.ascontiguousarray(w)),
        T.parameter(u.gamma.value[out_idx] * zf),
        T.parameter(u.beta.value[out_idx] * zf),
        BatchNormState(u.bn.mean[out_idx].copy(), u.bn.var[out_idx].copy(), u.bn.momentum, u.bn.eps),
    )


def hard_prune(net: Network, masks: Optional[Mapping[str, np.ndarray]] = None) -> PrunedGraph:
    """Physically remove dead feature maps and empty blocks.

    ``masks`` defaults to :meth:`Network.effective_masks`; baselines pass their
    own keep-masks (gate values are then taken as 1).
    """
    if masks is None:
        masks = net.effective_masks()
        zvals = net.gate_values()
    else:
        zvals = {n: np.ones(u.layout.out_channels, dtype=net.head_w.dtype) for n, u in net.units.items()}
    spec = net.spec
    idx = {n: np.flatnonzero(m).astype(np.int64) for n, m in masks.items()}

    stem_in = np.arange(spec.in_channels)
    stem = _prune_unit(net.units["stem"], idx["stem"], stem_in, zvals["stem"])
    carried = idx["stem"]
    if len(carried) == 0:
        raise GraphError("fatal pruning: the stem has no alive feature map")
    blocks: list[PrunedBlock] = []
    dropped: list[str] = []
    for s, st in enumerate(spec.stages):
        for b in range(st.blocks):
            pre = block_name(s, b)
            i2 = idx[f"{pre}.c2"]
            res = None
            if b == 0:
                res = _prune_unit(net.units[f"{pre}.res"], idx[f"{pre}.res"], carried, zvals[f"{pre}.res"])
                if res.out_channels == 0:
                    raise GraphError(f"fatal pruning: {pre}.res has no alive feature map")
            elif len(i2) == 0:
                dropped.append(pre)
                continue
            c1 = c2 = None
            if len(i2):
                i1 = idx[f"{pre}.c1"]
                if len(i1):
                    c1 = _prune_unit(net.units[f"{pre}.c1"], i1, carried, zvals[f"{pre}.c1"])
                c2 = _prune_unit(net.units[f"{pre}.c2"], i2, i1 if len(i1) else None, zvals[f"{pre}.c2"])
            blk = PrunedBlock(s, b, carried, i2, c1, c2, res, st.width if res is not None else 0)
            blocks.append(blk)
            carried = blk.out_idx
    head_w = T.parameter(np.ascontiguousarray(net.head_w.value[:, carried]))
    head_b = T.parameter(net.head_b.value.copy())
    return PrunedGraph(spec, stem, blocks, tuple(dropped), carried, head_w, head_b)


def forward_pruned(g: PrunedGraph, x, training: bool = False) -> Node:
    return g.forward(x, training)


def write_back(g: PrunedGraph, net: Network) -> None:
    """Copy the (fine-tuned) pruned weights into the matching slots of ``net``.

    Only meaningful when the graph was pruned with unit gate values (baselines).
    """
    def in_idx_of(blk: Optional[PrunedBlock], u: PrunedUnit) -> np.ndarray:
        if u.layout.role == "stem":
            return np.arange(g.spec.in_channels)
        if u.layout.role == "c2":
            return blk.c1.out_idx if blk.c1 is not None else np.zeros(0, np.int64)
        return blk.i_in

    pairs = [(None, g.stem)] + [(blk, u) for blk in g.blocks for u in blk.units()]
    for blk, u in pairs:
        dense = net.units[u.layout.name]
        o, i = u.out_idx, in_idx_of(blk, u)
        dense.weight.value[np.ix_(o, i)] = u.weight.value
        dense.gamma.value[o] = u.gamma.value
        dense.beta.value[o] = u.beta.value
        dense.bn.mean[o] = u.bn.mean
        dense.bn.var[o] = u.bn.var
    net.head_w.value[:, g.final_idx] = g.head_w.value
    net.head_b.value[...] = g.head_b.value


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class CostReport:
    volume: float
    flops: float
    full_volume: float
    full_flops: float
    regular_volume: float
    regular_flops: float

    @property
    def volume_factor(self) -> float:
        return self.full_volume / self.volume if self.volume else float("inf")

    @property
    def flop_factor(self) -> float:
        return self.full_flops / self.flops if self.flops else float("inf")

    def as_dict(self) -> dict[str, float]:
        return {
            "volume": self.volume,
            "flops": self.flops,
            "full_volume": self.full_volume,
            "full_flops": self.full_flops,
            "volume_factor": self.volume_factor,
            "flop_factor": self.flop_factor,
            "regular_block_volume": self.regular_volume,
            "regular_block_flops": self.regular_flops,
        }


def _regular_costs(g: PrunedGraph) -> tuple[float, float]:
    """Costs of the same pruning with regular ResBlocks.

    Tensors summed inside a stage must share a width, so every residual and
    last-delta convolution of a stage outputs the stage's full union of
    alive channels.  Inner convolutions keep their own alive counts.
    """
    k2 = lambda u: u.layout.kernel ** 2
    vol = float(g.stem.volume())
    flops = float(g.stem.flops())
    width_in = g.stem.out_channels
    for s, st in enumerate(g.spec.stages):
        blocks = [b for b in g.blocks if b.stage == s]
        union = len(blocks[-1].out_idx)
        for blk in blocks:
            src = width_in if blk.pooling else union
            if blk.res is not None:
                vol += union * blk.res.layout.area
                flops += union * src * k2(blk.res) * blk.res.layout.area
            if blk.c2 is None:
                continue
            mid = blk.c1.out_channels if blk.c1 is not None else 0
            if blk.c1 is not None:
                vol += mid * blk.c1.layout.area
                flops += mid * src * k2(blk.c1) * blk.c1.layout.area
            vol += union * blk.c2.layout.area
            flops += union * mid * k2(blk.c2) * blk.c2.layout.area
        width_in = union
    return vol, flops


def cost_report(g: PrunedGraph, spec: Optional[NetworkSpec] = None) -> CostReport:
    spec = spec or g.spec
    layers = layer_costs(spec)
    reg_v, reg_f = _regular_costs(g)
    return CostReport(g.volume(), g.flops(), full_volume(layers), full_flops(layers), reg_v, reg_f)
