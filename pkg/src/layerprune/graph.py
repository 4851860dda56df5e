"""Architecture IR: pre-activation bottleneck ResNets as an explicit node graph.

Nodes are executed in dependency order, so the list order never matters.
Every conv inside a residual branch is gated by the BN that precedes or
follows it, which is what the pruning surgery exploits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import BNParams, ConvParams, FCParams, Tensor
from .errors import GraphError, ShapeError

INPUT = -1  # pseudo node id for the graph input batch

CONV, BN, RELU, ADD, POOL, FC = "conv", "bn", "relu", "add", "pool", "fc"
KINDS = (CONV, BN, RELU, ADD, POOL, FC)


@dataclass
class Node:
    id: int
    kind: str
    inputs: list[int]
    params: object | None
    channels: int


@dataclass
class ResidualBlock:
    """Bookkeeping for one bottleneck block: branch node ids in compute order."""

    id: int
    branch: list[int]  # bn_a, relu, conv1(1x1), bn_mid, relu, conv2(3x3), bn_out, relu, conv3(1x1)
    shortcut: list[int]  # [] for identity, [conv_id] for 1x1 projection
    add_id: int
    input_id: int
    stride: int

    @property
    def projection(self) -> bool:
        return bool(self.shortcut)


class ModelGraph:
    def __init__(self, nodes: list[Node], blocks: list[ResidualBlock], metadata: dict):
        self.nodes = nodes
        self.blocks = blocks
        self.metadata = metadata
        self._index = {n.id: n for n in nodes}
        self._topo: list[Node] | None = None

    def node(self, nid: int) -> Node:
        try:
            return self._index[nid]
        except KeyError:
            raise GraphError(f"no node with id {nid}") from None

    def has_node(self, nid: int) -> bool:
        return nid in self._index

    def reindex(self):
        """Call after any structural edit (nodes added/removed/rewired)."""
        self._index = {n.id: n for n in self.nodes}
        self._topo = None

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i != INPUT:
                    out.setdefault(i, []).append(n.id)
        return out

    def topo_order(self) -> list[Node]:
        """Dependency order, deterministic (ready nodes processed by ascending id)."""
        if self._topo is not None:
            return self._topo
        pending = {n.id: sum(1 for i in n.inputs if i != INPUT) for n in self.nodes}
        cons = self.consumers()
        ready = sorted(nid for nid, d in pending.items() if d == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(self.node(nid))
            inserted = False
            for c in cons[nid]:
                pending[c] -= 1
                if pending[c] == 0:
                    ready.append(c)
                    inserted = True
            if inserted:
                ready.sort()
        if len(order) != len(self.nodes):
            raise GraphError("graph has a cycle")
        self._topo = order
        return order

    def output_id(self) -> int:
        sinks = [nid for nid, cs in self.consumers().items() if not cs]
        if len(sinks) != 1:
            raise GraphError(f"expected exactly one output node, found {sinks}")
        return sinks[0]

    def bn_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == BN]

    def block_by_id(self, block_id: int) -> ResidualBlock:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise GraphError(f"no residual block with id {block_id}")

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def next_node_id(self) -> int:
        return max(self._index) + 1

    def dtype(self):
        for n in self.nodes:
            if n.kind == CONV:
                return n.params.weight.dtype
        return engine.DEFAULT_DTYPE


@dataclass
class ParamSlot:
    """Live references to one trainable array and its gradient buffer."""

    node_id: int
    name: str
    data: np.ndarray
    grad: np.ndarray
    decay: bool  # weight decay never touches BN alpha/beta


def param_slots(g: ModelGraph) -> list[ParamSlot]:
    slots = []
    for n in g.nodes:
        p = n.params
        if n.kind == CONV:
            slots.append(ParamSlot(n.id, "weight", p.weight.data, p.weight.ensure_grad(), True))
            if p.bias is not None:
                slots.append(ParamSlot(n.id, "bias", p.bias, p.bias_grad, True))
        elif n.kind == BN:
            slots.append(ParamSlot(n.id, "alpha", p.alpha, p.alpha_grad, False))
            slots.append(ParamSlot(n.id, "beta", p.beta, p.beta_grad, False))
        elif n.kind == FC:
            slots.append(ParamSlot(n.id, "weight", p.weight, p.weight_grad, True))
            slots.append(ParamSlot(n.id, "bias", p.bias, p.bias_grad, True))
    return slots


def count_params(g: ModelGraph) -> int:
    """Trainable element count: conv/FC weights and biases plus BN alpha/beta."""
    return sum(s.data.size for s in param_slots(g))


def stored_element_count(g: ModelGraph) -> int:
    """Everything a checkpoint stores: trainable params plus BN running stats."""
    extra = sum(2 * n.params.channels for n in g.nodes if n.kind == BN)
    return count_params(g) + extra


def zero_grads(g: ModelGraph):
    for s in param_slots(g):
        s.grad[...] = 0


# ---------------------------------------------------------------------------
# validation


def _producer_channels(g: ModelGraph, nid: int) -> int:
    if nid == INPUT:
        return g.metadata.get("input_channels", 3)
    return g.node(nid).channels


def validate(g: ModelGraph) -> None:
    """Check channel arithmetic, acyclicity, and block wiring. Raises GraphError."""
    seen = set()
    for n in g.nodes:
        if n.id in seen:
            raise GraphError(f"duplicate node id {n.id}")
        seen.add(n.id)
        if n.kind not in KINDS:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
        for i in n.inputs:
            if i != INPUT and i not in g._index:
                raise GraphError(f"node {n.id}: input {i} does not exist")

    g.topo_order()  # raises on cycles
    g.output_id()  # raises unless exactly one sink

    for n in g.nodes:
        ins = [_producer_channels(g, i) for i in n.inputs]
        if n.kind == CONV:
            if len(ins) != 1:
                raise GraphError(f"node {n.id}: conv takes one input")
            if ins[0] != n.params.in_channels:
                raise GraphError(
                    f"node {n.id}: conv expects {n.params.in_channels} input channels, producer has {ins[0]}"
                )
            if n.channels != n.params.out_channels:
                raise GraphError(
                    f"node {n.id}: channel count {n.channels} != conv out_channels {n.params.out_channels}"
                )
        elif n.kind == BN:
            if len(ins) != 1 or ins[0] != n.params.channels:
                raise GraphError(
                    f"node {n.id}: BN over {n.params.channels} channels fed by {ins} channels"
                )
            if n.channels != n.params.channels:
                raise GraphError(f"node {n.id}: channel count {n.channels} != BN width {n.params.channels}")
        elif n.kind in (RELU, POOL):
            if len(ins) != 1 or ins[0] != n.channels:
                raise GraphError(f"node {n.id}: {n.kind} channel count {n.channels} != producer {ins}")
        elif n.kind == ADD:
            if len(ins) != 2:
                raise GraphError(f"node {n.id}: add needs exactly two inputs, got {len(ins)}")
            if ins[0] != ins[1] or ins[0] != n.channels:
                raise GraphError(f"node {n.id}: add inputs have channels {ins}, node declares {n.channels}")
        elif n.kind == FC:
            if len(ins) != 1 or ins[0] != n.params.in_features:
                raise GraphError(f"node {n.id}: FC expects {n.params.in_features} features, producer has {ins}")

    for b in g.blocks:
        for nid in b.branch + b.shortcut + [b.add_id]:
            if not g.has_node(nid):
                raise GraphError(f"block {b.id}: node {nid} missing from graph")
        add = g.node(b.add_id)
        if add.kind != ADD:
            raise GraphError(f"block {b.id}: add_id {b.add_id} is a {add.kind} node")
        branch_end = b.branch[-1]
        shortcut_end = b.shortcut[-1] if b.shortcut else b.input_id
        if set(add.inputs) != {branch_end, shortcut_end}:
            raise GraphError(
                f"block {b.id}: add inputs {add.inputs} do not match branch end {branch_end} "
                f"and shortcut end {shortcut_end}"
            )
        first = g.node(b.branch[0])
        if first.inputs != [b.input_id]:
            raise GraphError(f"block {b.id}: branch head {first.id} not fed by block input {b.input_id}")


# ---------------------------------------------------------------------------
# execution


class Activations:
    """Per-node outputs and backward caches from one forward pass."""

    def __init__(self, mode: str):
        self.mode = mode
        self.values: dict[int, object] = {}
        self.caches: dict[int, object] = {}
        self.output_id: int | None = None

    @property
    def output(self):
        return self.values[self.output_id]


def graph_forward(g: ModelGraph, batch, mode: str = "train", momentum: float = 0.1) -> Activations:
    """Run the graph in dependency order; caches everything backward needs."""
    x = engine.as_tensor(batch)
    acts = Activations(mode)
    for n in g.topo_order():
        ins = [x if i == INPUT else acts.values[i] for i in n.inputs]
        try:
            if n.kind == CONV:
                out, cache = engine.conv2d_forward(ins[0], n.params)
            elif n.kind == BN:
                out, cache = engine.batchnorm_forward(ins[0], n.params, mode=mode, momentum=momentum)
            elif n.kind == RELU:
                out, cache = engine.relu_forward(ins[0])
            elif n.kind == ADD:
                a, b = ins[0].data, ins[1].data
                if a.shape != b.shape:
                    raise ShapeError(f"add operands {a.shape} vs {b.shape}")
                out, cache = Tensor(a + b), None
            elif n.kind == POOL:
                out, cache = engine.global_avg_pool_forward(ins[0])
            else:  # FC
                out, cache = engine.fc_forward(ins[0], n.params)
        except ShapeError as e:
            raise GraphError(f"node {n.id} ({n.kind}): {e}") from e
        acts.values[n.id] = out
        acts.caches[n.id] = cache
    acts.output_id = g.output_id()
    return acts


def graph_backward(g: ModelGraph, acts: Activations, dout):
    """Propagate the output gradient; parameter grads accumulate in place.

    Returns the gradient with respect to the graph input.
    """
    if acts is None or acts.output_id is None:
        raise GraphError("graph backward called before forward")
    grads: dict[int, np.ndarray] = {acts.output_id: np.asarray(engine._arr(dout))}
    dinput = None
    for n in reversed(g.topo_order()):
        d = grads.pop(n.id, None)
        if d is None:
            continue
        if n.id not in acts.caches:
            raise GraphError(f"node {n.id}: no cached forward state")
        cache = acts.caches[n.id]
        if n.kind == CONV:
            dins = [engine.conv2d_backward(d, cache, n.params).data]
        elif n.kind == BN:
            dins = [engine.batchnorm_backward(d, cache, n.params).data]
        elif n.kind == RELU:
            dins = [engine.relu_backward(d, cache).data]
        elif n.kind == ADD:
            dins = [d, d]
        elif n.kind == POOL:
            dins = [engine.global_avg_pool_backward(d, cache).data]
        else:  # FC
            dx = engine.fc_backward(d, cache, n.params)
            dins = [engine._arr(dx)]
        for src, dsrc in zip(n.inputs, dins):
            if src == INPUT:
                dinput = dsrc if dinput is None else dinput + dsrc
            elif src in grads:
                grads[src] = grads[src] + dsrc
            else:
                grads[src] = dsrc
    return dinput


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.nodes: list[Node] = []

    def _add(self, kind, inputs, params, channels) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, kind, list(inputs), params, channels))
        return nid

    def conv(self, src, in_ch, out_ch, k, stride=1, pad=0, bias=False) -> int:
        fan_in = in_ch * k * k
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k)).astype(self.dtype)
        b = np.zeros(out_ch, dtype=self.dtype) if bias else None
        return self._add(CONV, [src], ConvParams(Tensor(w), b, stride=stride, padding=pad), out_ch)

    def bn(self, src, ch, alpha_init) -> int:
        p = BNParams(
            alpha=np.full(ch, alpha_init, dtype=self.dtype),
            beta=np.zeros(ch, dtype=self.dtype),
            running_mean=np.zeros(ch, dtype=self.dtype),
            running_var=np.ones(ch, dtype=self.dtype),
        )
        return self._add(BN, [src], p, ch)

    def relu(self, src, ch) -> int:
        return self._add(RELU, [src], None, ch)

    def add(self, a, b, ch) -> int:
        return self._add(ADD, [a, b], None, ch)

    def pool(self, src, ch) -> int:
        return self._add(POOL, [src], None, ch)

    def fc(self, src, in_features, classes) -> int:
        w = self.rng.normal(0.0, np.sqrt(1.0 / in_features), size=(classes, in_features)).astype(self.dtype)
        b = np.zeros(classes, dtype=self.dtype)
        return self._add(FC, [src], FCParams(w, b), classes)


# BN scale init; 0.5 keeps scales small enough that the L1 pull can drive
# unused channels to zero within short training budgets.
ALPHA_INIT = 0.5

EXPANSION = 4  # bottleneck output width multiplier


def build_bottleneck_resnet(blocks_per_stage: int, widths=(16, 32, 64), classes: int = 10,
                            seed: int = 0, dtype=engine.DEFAULT_DTYPE) -> ModelGraph:
    """Depth 9n+2 pre-activation bottleneck ResNet over 32x32 inputs.

    Stage k runs `blocks_per_stage` blocks at bottleneck width widths[k]
    (trunk width 4x that); stages after the first open with a stride-2
    conv and a 1x1 projection shortcut.
    """
    if blocks_per_stage < 1:
        raise GraphError(f"blocks_per_stage must be >= 1, got {blocks_per_stage}")
    if len(widths) != 3 or any(w < 1 for w in widths):
        raise GraphError(f"need three positive stage widths, got {widths}")
    rng = np.random.default_rng(seed)
    gb = _Builder(rng, dtype)

    prev = gb.conv(INPUT, 3, widths[0], k=3, stride=1, pad=1, bias=True)
    in_ch = widths[0]
    blocks = []
    for stage, p in enumerate(widths):
        out_ch = EXPANSION * p
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            block_input = prev
            bn_a = gb.bn(block_input, in_ch, ALPHA_INIT)
            r_a = gb.relu(bn_a, in_ch)
            c1 = gb.conv(r_a, in_ch, p, k=1)
            bn_m = gb.bn(c1, p, ALPHA_INIT)
            r_m = gb.relu(bn_m, p)
            c2 = gb.conv(r_m, p, p, k=3, stride=stride, pad=1)
            bn_o = gb.bn(c2, p, ALPHA_INIT)
            r_o = gb.relu(bn_o, p)
            c3 = gb.conv(r_o, p, out_ch, k=1)
            if stride != 1 or in_ch != out_ch:
                shortcut = [gb.conv(block_input, in_ch, out_ch, k=1, stride=stride)]
                sc_end = shortcut[0]
            else:
                shortcut = []
                sc_end = block_input
            add = gb.add(c3, sc_end, out_ch)
            blocks.append(ResidualBlock(
                id=len(blocks),
                branch=[bn_a, r_a, c1, bn_m, r_m, c2, bn_o, r_o, c3],
                shortcut=shortcut,
                add_id=add,
                input_id=block_input,
                stride=stride,
            ))
            prev = add
            in_ch = out_ch

    bn_head = gb.bn(prev, in_ch, ALPHA_INIT)
    r_head = gb.relu(bn_head, in_ch)
    pool = gb.pool(r_head, in_ch)
    gb.fc(pool, in_ch, classes)

    meta = {
        "arch": "preact-bottleneck-resnet",
        "depth": 9 * blocks_per_stage + 2,
        "blocks_per_stage": blocks_per_stage,
        "widths": list(widths),
        "classes": classes,
        "input_channels": 3,
    }
    g = ModelGraph(gb.nodes, blocks, meta)
    validate(g)
    return g


def build_resnet164(classes: int = 10, seed: int = 0, dtype=engine.DEFAULT_DTYPE) -> ModelGraph:
    """The full-scale model: 18 blocks per stage at widths 16/32/64 (depth 164)."""
    return build_bottleneck_resnet(18, (16, 32, 64), classes=classes, seed=seed, dtype=dtype)


def build_mini_resnet(blocks_per_stage: int = 2, widths=(8, 16, 32), classes: int = 10,
                      seed: int = 0, dtype=engine.DEFAULT_DTYPE) -> ModelGraph:
    """Desk-scale stand-in with the same topology (default depth 20)."""
    return build_bottleneck_resnet(blocks_per_stage, widths, classes=classes, seed=seed, dtype=dtype)
