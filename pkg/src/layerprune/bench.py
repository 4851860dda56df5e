"""Metrics: top-1 evaluation, inference timing, and report rendering."""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .data import Dataset, normalize
from .engine import _arr
from .errors import LayerPruneError, NumericsError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl ships with the package
    threadpool_limits = None


@dataclass
class MetricsReport:
    """The four headline numbers for one model stage, plus run context."""

    stage: str
    top1: float
    parameters: int
    model_size_bytes: int
    inference_ratio: float
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inference_ratio <= 0:
            raise LayerPruneError(f"inference ratio must be positive, got {self.inference_ratio}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


@contextlib.contextmanager
def thread_limit(threads: int | None):
    if threads is None or threadpool_limits is None:
        yield
    else:
        with threadpool_limits(limits=threads):
            yield


def time_inference(g: G.ModelGraph, batch_dims=(64, 3, 32, 32), reps: int = 5,
                   warmup: int = 2, threads: int | None = 1, seed: int = 0) -> float:
    """Median wall-clock seconds for one forward pass at `batch_dims`.

    Timed single-threaded by default so ratios reflect arithmetic reduction
    rather than scheduler noise.
    """
    if reps < 3:
        raise LayerPruneError(f"reps must be >= 3, got {reps}")
    if warmup < 1:
        raise LayerPruneError(f"warmup must be >= 1, got {warmup}")
    x = np.random.default_rng(seed).standard_normal(batch_dims).astype(g.dtype())
    times = []
    with thread_limit(threads):
        for _ in range(warmup):
            G.graph_forward(g, x, mode="infer")
        for _ in range(reps):
            t0 = time.perf_counter()
            acts = G.graph_forward(g, x, mode="infer")
            times.append(time.perf_counter() - t0)
            out = acts.output
            out = out.data if hasattr(out, "data") else out
            if not np.all(np.isfinite(out)):
                raise NumericsError("non-finite activations during timed inference")
    return float(np.median(times))


def evaluate(g: G.ModelGraph, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy over the full dataset, infer-mode BN."""
    hits = 0
    for lo in range(0, len(ds), batch_size):
        x = normalize(ds.images[lo : lo + batch_size])
        labels = ds.labels[lo : lo + batch_size]
        acts = G.graph_forward(g, x, mode="infer")
        hits += int((acts.output.argmax(axis=1) == labels).sum())
    return hits / len(ds)


def _fmt_params(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def _fmt_size(n: int) -> str:
    return f"{n / 1e6:.2f}MB"


def render_table(reports: list[MetricsReport]) -> str:
    """Four-column comparison table over saved stage reports."""
    header = ["Model", "Top1 (%)", "Parameters", "Model size", "Inference ratio"]
    rows = [header]
    for r in reports:
        rows.append([
            r.stage,
            f"{100.0 * r.top1:.2f}",
            _fmt_params(r.parameters),
            _fmt_size(r.model_size_bytes),
            f"{r.inference_ratio:.2f}x",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(len(header))))
    return "\n".join(lines)


def write_csv(reports: list[MetricsReport], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "top1", "parameters", "model_size_bytes", "inference_ratio"])
        for r in reports:
            writer.writerow([r.stage, r.top1, r.parameters, r.model_size_bytes, r.inference_ratio])
