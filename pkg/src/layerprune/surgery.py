"""Channel pruning, threshold selection, and the two layer-folding transforms.

Pruning acts on each block's middle BN: the gate sitting between the 1x1
reduce conv and the 3x3 conv, the only BN whose front and back channels both
belong to the branch. Dropping its channel c removes the front conv's output
filter c, the BN entry, and the back conv's input slice c in one edit. A
block whose middle BN is down to a single channel becomes a fold candidate:
either the whole branch is deleted (zero init) or the conv-BN-ReLU-conv
sandwich is collapsed into one bridge convolution (composed init).

All transforms return new graphs; inputs are never mutated.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bench
from . import graph as G
from .checkpoint import checkpoint_bytes
from .engine import BNParams, ConvParams, Tensor
from .errors import SurgeryError
from .training import TrainConfig, Trainer


def middle_bn_id(g: G.ModelGraph, block: G.ResidualBlock) -> int | None:
    """The BN with a branch conv on both sides: the prune target and fold pivot.

    In the standard bottleneck branch that is the second of three BNs. A
    bare conv-BN-ReLU-conv sandwich branch qualifies through its only BN.
    Returns None once a fold has removed the sandwich.
    """
    bns = [nid for nid in block.branch if g.node(nid).kind == G.BN]
    if len(bns) == 3:
        return bns[1]
    if len(bns) == 1:
        i = block.branch.index(bns[0])
        if 1 <= i and i + 2 < len(block.branch):
            before = g.node(block.branch[i - 1]).kind
            after = (g.node(block.branch[i + 1]).kind, g.node(block.branch[i + 2]).kind)
            if before == G.CONV and after == (G.RELU, G.CONV):
                return bns[0]
    return None


def prunable_bn_ids(g: G.ModelGraph) -> list[int]:
    out = []
    for b in g.blocks:
        nid = middle_bn_id(g, b)
        if nid is not None:
            out.append(nid)
    return out


def _sandwich(g: G.ModelGraph, block: G.ResidualBlock):
    """(conv_front, bn, relu, conv_back) node ids around the middle BN."""
    bn_id = middle_bn_id(g, block)
    if bn_id is None:
        return None
    i = block.branch.index(bn_id)
    if i < 1 or i + 2 >= len(block.branch):
        raise SurgeryError(f"block {block.id}: middle BN {bn_id} sits at the branch edge")
    conv1, relu, conv2 = block.branch[i - 1], block.branch[i + 1], block.branch[i + 2]
    kinds = (g.node(conv1).kind, g.node(relu).kind, g.node(conv2).kind)
    if kinds != (G.CONV, G.RELU, G.CONV):
        raise SurgeryError(f"block {block.id}: branch around BN {bn_id} is {kinds}, not conv/relu/conv")
    return conv1, bn_id, relu, conv2


# ---------------------------------------------------------------------------
# threshold + plan


@dataclass
class PrunePlan:
    threshold: float
    keep_masks: dict[int, np.ndarray]  # every BN node id -> boolean keep mask
    fold_candidates: list[int]  # block ids whose middle BN keeps exactly one channel
    predicted_params: int


def select_threshold(g: G.ModelGraph, target_ratio: float) -> float:
    """Quantile of |alpha| pooled over the prunable BNs.

    Pruning everything strictly below the returned threshold removes about
    target_ratio of the pooled channels (before the one-channel floor rule).
    """
    if not 0.0 <= target_ratio < 1.0:
        raise SurgeryError(f"target_ratio must be in [0, 1), got {target_ratio}")
    pool = [np.abs(g.node(nid).params.alpha) for nid in prunable_bn_ids(g)]
    if not pool:
        raise SurgeryError("graph has no prunable BN layers")
    flat = np.sort(np.concatenate(pool))
    k = int(np.floor(target_ratio * flat.size))
    return float(flat[k])


def plan_prune(g: G.ModelGraph, threshold: float) -> PrunePlan:
    """Keep-masks for every BN (|alpha| >= threshold on prunable ones, floor 1).

    The floor survivor is the max-|alpha| channel, ties to the lowest index.
    Blocks whose middle BN keeps exactly one channel are fold candidates.
    The predicted parameter count is computed arithmetically, without
    touching the graph.
    """
    G.validate(g)
    masks: dict[int, np.ndarray] = {
        n.id: np.ones(n.params.channels, dtype=bool) for n in g.bn_nodes()
    }
    candidates = []
    out_override: dict[int, int] = {}
    in_override: dict[int, int] = {}
    bn_override: dict[int, int] = {}
    for block in g.blocks:
        sand = _sandwich(g, block)
        if sand is None:
            continue
        conv1, bn_id, _, conv2 = sand
        alpha = g.node(bn_id).params.alpha
        mask = np.abs(alpha) >= threshold
        if not mask.any():
            mask[int(np.argmax(np.abs(alpha)))] = True
        masks[bn_id] = mask
        kept = int(mask.sum())
        if kept == 1:
            candidates.append(block.id)
        out_override[conv1] = kept
        in_override[conv2] = kept
        bn_override[bn_id] = kept

    predicted = 0
    for n in g.nodes:
        if n.kind == G.CONV:
            p = n.params
            out_c = out_override.get(n.id, p.out_channels)
            in_c = in_override.get(n.id, p.in_channels)
            kh, kw = p.kernel
            predicted += out_c * in_c * kh * kw + (out_c if p.bias is not None else 0)
        elif n.kind == G.BN:
            predicted += 2 * bn_override.get(n.id, n.params.channels)
        elif n.kind == G.FC:
            predicted += n.params.weight.size + n.params.bias.size
    return PrunePlan(threshold, masks, candidates, predicted)


def apply_prune(g: G.ModelGraph, plan: PrunePlan) -> G.ModelGraph:
    """Cut the dropped channels out of conv weights and BN vectors."""
    for nid, mask in plan.keep_masks.items():
        if not g.has_node(nid) or g.node(nid).kind != G.BN:
            raise SurgeryError(f"plan references BN node {nid} absent from graph")
        if len(mask) != g.node(nid).params.channels:
            raise SurgeryError(
                f"plan mask for BN {nid} has {len(mask)} entries, layer has "
                f"{g.node(nid).params.channels} channels"
            )
    ng = g.clone()
    for block in ng.blocks:
        sand = _sandwich(ng, block)
        if sand is None:
            continue
        conv1_id, bn_id, relu_id, conv2_id = sand
        mask = plan.keep_masks[bn_id]
        if mask.all():
            continue
        keep = np.flatnonzero(mask)
        conv1 = ng.node(conv1_id)
        w1 = conv1.params.weight
        conv1.params.weight = Tensor(np.ascontiguousarray(w1.data[keep]))
        if conv1.params.bias is not None:
            conv1.params.bias = conv1.params.bias[keep].copy()
            conv1.params.bias_grad = np.zeros_like(conv1.params.bias)
        conv1.channels = len(keep)

        bn = ng.node(bn_id)
        old = bn.params
        bn.params = BNParams(
            old.alpha[keep].copy(), old.beta[keep].copy(),
            old.running_mean[keep].copy(), old.running_var[keep].copy(), eps=old.eps,
        )
        bn.channels = len(keep)
        ng.node(relu_id).channels = len(keep)

        conv2 = ng.node(conv2_id)
        conv2.params.weight = Tensor(np.ascontiguousarray(conv2.params.weight.data[:, keep]))
    ng.reindex()
    G.validate(ng)
    return ng


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldRecord:
    block_id: int
    method: str  # zero | composed
    removed_nodes: list[int]
    new_node: int | None
    kernel: tuple[int, int] | None
    param_delta: int  # count_params(before) - count_params(after); negative = fold grew the graph


def _require_candidate(g: G.ModelGraph, block: G.ResidualBlock) -> tuple:
    sand = _sandwich(g, block)
    if sand is None:
        raise SurgeryError(f"block {block.id} has no middle BN left to fold")
    bn = g.node(sand[1])
    if bn.params.channels != 1:
        raise SurgeryError(
            f"block {block.id} is not a fold candidate: middle BN keeps "
            f"{bn.params.channels} channels, folding needs exactly 1"
        )
    return sand


def _rewire(ng: G.ModelGraph, old_id: int, new_id: int):
    for n in ng.nodes:
        n.inputs = [new_id if i == old_id else i for i in n.inputs]
    for b in ng.blocks:
        if b.input_id == old_id:
            b.input_id = new_id


def fold_zero_init(g: G.ModelGraph, block_id: int) -> tuple[G.ModelGraph, FoldRecord]:
    """Drop the whole residual branch; the block collapses to its shortcut.

    Equivalent to initializing the bridge conv at zero: the branch then
    contributes nothing, so only the bypass path is kept. With an identity
    shortcut the block disappears entirely; a projection shortcut stays as
    the block's only path.
    """
    block = g.block_by_id(block_id)
    _require_candidate(g, block)
    before = G.count_params(g)
    ng = g.clone()
    block = ng.block_by_id(block_id)
    replacement = block.shortcut[0] if block.projection else block.input_id
    removed = list(block.branch) + [block.add_id]
    _rewire(ng, block.add_id, replacement)
    gone = set(removed)
    ng.nodes = [n for n in ng.nodes if n.id not in gone]
    ng.blocks = [b for b in ng.blocks if b.id != block_id]
    ng.reindex()
    G.validate(ng)
    return ng, FoldRecord(
        block_id, "zero", sorted(removed), None, None, before - G.count_params(ng)
    )


def _compose_weights(w1: np.ndarray, w2: np.ndarray, scale: float) -> np.ndarray:
    """Exact kernel of conv2(conv1(x)) through one scaled channel.

    Two stacked stride-1 cross-correlations compose into a single
    cross-correlation whose kernel is the full 2-D convolution of the two
    kernels: new[o, i] = scale * sum_{t+q=m} w2[o, 0, t] * w1[0, i, q].
    """
    _, in1, k1h, k1w = w1.shape
    out2, _, k2h, k2w = w2.shape
    new = np.zeros((out2, in1, k1h + k2h - 1, k1w + k2w - 1), dtype=w1.dtype)
    for t1 in range(k2h):
        for t2 in range(k2w):
            new[:, :, t1 : t1 + k1h, t2 : t2 + k1w] += (
                w2[:, 0, t1, t2][:, None, None, None] * w1[0][None, :]
            )
    new *= np.asarray(scale, dtype=w1.dtype)
    return new


def fold_composed_init(g: G.ModelGraph, block_id: int,
                       paper_literal: bool = False) -> tuple[G.ModelGraph, FoldRecord]:
    """Collapse the conv-BN-ReLU-conv sandwich into one bridge convolution.

    The bridge weight is the exact linear composition of the front conv, the
    single-channel BN affine, and the back conv, with kernel size k1+k2-1 and
    padding p1+p2; the constant the BN shift injects becomes a bias, passed
    through the ReLU so a non-positive shift contributes nothing. Exact
    whenever the middle pre-ReLU activation is positive everywhere (interior
    pixels when both kernels exceed 1x1).

    `paper_literal` keeps only the composed kernel's center tap as a 1x1
    bridge, an approximation for anything bigger than 1x1 sandwiches.
    """
    block = g.block_by_id(block_id)
    conv1_id, bn_id, relu_id, conv2_id = _require_candidate(g, block)
    p1 = g.node(conv1_id).params
    p2 = g.node(conv2_id).params
    if p1.stride != 1 or p2.stride != 1:
        raise SurgeryError(
            f"block {block_id}: sandwich has stride {p1.stride}/{p2.stride}; "
            "composed folding needs stride 1, use fold_zero_init"
        )
    before = G.count_params(g)
    bn = g.node(bn_id).params
    scale = float(bn.alpha[0] / np.sqrt(bn.running_var[0] + bn.eps))
    shift = float(bn.beta[0] - scale * bn.running_mean[0])

    new_w = _compose_weights(p1.weight.data, p2.weight.data, scale)
    padding = p1.padding + p2.padding
    if paper_literal:
        kh, kw = new_w.shape[2], new_w.shape[3]
        if kh != 2 * padding + 1 or kw != 2 * padding + 1:
            raise SurgeryError(
                f"block {block_id}: literal 1x1 mode needs a same-size sandwich, "
                f"composed kernel is {kh}x{kw} with padding {padding}"
            )
        new_w = np.ascontiguousarray(new_w[:, :, kh // 2 : kh // 2 + 1, kw // 2 : kw // 2 + 1])
        padding = 0
    tap_sum = p2.weight.data.sum(axis=(1, 2, 3))
    new_b = (max(shift, 0.0) * tap_sum).astype(new_w.dtype)
    if p2.bias is not None:
        new_b = new_b + p2.bias

    ng = g.clone()
    block = ng.block_by_id(block_id)
    new_id = ng.next_node_id()
    new_params = ConvParams(Tensor(new_w), new_b, stride=1, padding=padding)
    new_node = G.Node(new_id, G.CONV, list(ng.node(conv1_id).inputs), new_params,
                      new_params.out_channels)
    _rewire(ng, conv2_id, new_id)
    gone = {conv1_id, bn_id, relu_id, conv2_id}
    ng.nodes = [n for n in ng.nodes if n.id not in gone] + [new_node]
    i = block.branch.index(conv1_id)
    block.branch = block.branch[:i] + [new_id] + block.branch[i + 4 :]
    ng.reindex()
    G.validate(ng)
    return ng, FoldRecord(
        block_id, "composed", sorted(gone), new_id,
        (new_w.shape[2], new_w.shape[3]), before - G.count_params(ng),
    )


def fold_block(g: G.ModelGraph, block_id: int, method: str,
               paper_literal: bool = False) -> tuple[G.ModelGraph, FoldRecord]:
    """Fold one candidate block; strided sandwiches always take the zero path."""
    if method not in ("zero", "composed"):
        raise SurgeryError(f"unknown fold method {method!r}")
    if method == "composed":
        block = g.block_by_id(block_id)
        sand = _require_candidate(g, block)
        strided = g.node(sand[0]).params.stride != 1 or g.node(sand[3]).params.stride != 1
        if not strided:
            return fold_composed_init(g, block_id, paper_literal=paper_literal)
    return fold_zero_init(g, block_id)


def surgery_report(g_before: G.ModelGraph, g_after: G.ModelGraph, plan: PrunePlan,
                   records: list[FoldRecord]) -> dict:
    """JSON-ready summary: threshold, per-layer keep/drop, folds, param counts."""
    layers = {}
    for nid, mask in sorted(plan.keep_masks.items()):
        layers[str(nid)] = {"kept": int(mask.sum()), "dropped": int((~mask).sum())}
    return {
        "threshold": plan.threshold,
        "layers": layers,
        "fold_records": [asdict(r) for r in records],
        "params_before": G.count_params(g_before),
        "params_after": G.count_params(g_after),
        "predicted_params_after_prune": plan.predicted_params,
    }


# ---------------------------------------------------------------------------
# iterative pipeline


@dataclass
class PipelineConfig:
    """One sparsify-prune-fold-finetune loop per ratio."""

    ratios: tuple  # cumulative prune fractions, strictly increasing, each in [0, 1)
    epochs_per_stage: int
    train: TrainConfig = field(default_factory=TrainConfig)
    fold_method: str = "zero"  # zero | composed
    paper_literal: bool = False
    abort_floor: float = 0.0  # stop and keep the previous stage if top1 collapses below
    bench_batch: tuple = (64, 3, 32, 32)
    bench_reps: int = 5
    bench_warmup: int = 2
    threads: int = 1

    def __post_init__(self):
        ratios = tuple(self.ratios)
        if any(not 0.0 <= r < 1.0 for r in ratios):
            raise SurgeryError(f"ratios must lie in [0, 1), got {ratios}")
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise SurgeryError(f"ratios must be strictly increasing, got {ratios}")
        self.ratios = ratios


def _stage_report(g, stage, test_ds, cfg: PipelineConfig, baseline_time, timings) -> bench.MetricsReport:
    t0 = time.perf_counter()
    top1 = bench.evaluate(g, test_ds)
    t_now = bench.time_inference(
        g, cfg.bench_batch, reps=cfg.bench_reps, warmup=cfg.bench_warmup, threads=cfg.threads
    )
    timings = dict(timings)
    timings["bench_s"] = round(time.perf_counter() - t0, 3)
    return bench.MetricsReport(
        stage=stage,
        top1=top1,
        parameters=G.count_params(g),
        model_size_bytes=len(checkpoint_bytes(g)),
        inference_ratio=baseline_time / t_now,
        config={
            "ratios": list(cfg.ratios),
            "epochs_per_stage": cfg.epochs_per_stage,
            "lambda": cfg.train.lam,
            "fold_method": cfg.fold_method,
            "batch_size": cfg.train.batch_size,
            "seed": cfg.train.seed,
            "bench_batch": list(cfg.bench_batch),
            "threads": cfg.threads,
        },
        timings=timings,
    ), t_now


def iterate_pipeline(g: G.ModelGraph, train_ds, test_ds, cfg: PipelineConfig,
                     log_stream=None):
    """Sparsify-finetune, prune, fold, repeat; one MetricsReport per stage.

    Every training pass keeps the L1 penalty on. Ratios are cumulative
    against the starting channel pool, so [0.4, 0.6] first removes 40% and
    then another third of the survivors. Stops early and returns the
    previous stage's graph if test top-1 collapses below cfg.abort_floor.
    """
    reports: list[bench.MetricsReport] = []
    fold_records: list[FoldRecord] = []

    t0 = time.perf_counter()
    trainer = Trainer(g, cfg.train, log_stream=log_stream)
    for _ in range(cfg.epochs_per_stage):
        trainer.train_epoch(train_ds)
    train_s = round(time.perf_counter() - t0, 3)

    baseline_time = bench.time_inference(
        g, cfg.bench_batch, reps=cfg.bench_reps, warmup=cfg.bench_warmup, threads=cfg.threads
    )
    report, _ = _stage_report(g, "stage0-baseline", test_ds, cfg, baseline_time,
                              {"train_s": train_s})
    reports.append(report)

    prev_cum = 0.0
    for i, ratio in enumerate(cfg.ratios):
        stage_name = f"stage{i + 1}-prune{int(round(100 * ratio))}"
        t0 = time.perf_counter()
        effective = (ratio - prev_cum) / (1.0 - prev_cum) if ratio > prev_cum else 0.0
        threshold = select_threshold(g, effective)
        plan = plan_prune(g, threshold)
        g_next = apply_prune(g, plan)
        for block_id in plan.fold_candidates:
            g_next, rec = fold_block(g_next, block_id, cfg.fold_method, cfg.paper_literal)
            fold_records.append(rec)
        surgery_s = round(time.perf_counter() - t0, 3)

        t0 = time.perf_counter()
        seed = cfg.train.seed + 1000 * (i + 1)
        stage_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
        trainer = Trainer(g_next, stage_cfg, log_stream=log_stream)
        for _ in range(cfg.epochs_per_stage):
            trainer.train_epoch(train_ds)
        train_s = round(time.perf_counter() - t0, 3)

        report, _ = _stage_report(
            g_next, stage_name, test_ds, cfg, baseline_time,
            {"train_s": train_s, "surgery_s": surgery_s},
        )
        if report.top1 < cfg.abort_floor:
            return g, reports, fold_records
        reports.append(report)
        g = g_next
        prev_cum = ratio

    return g, reports, fold_records
