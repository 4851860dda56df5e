"""Checkpoint serialization.

Layout: magic ``LPRN``, u32 LE format version, u64 LE metadata length, UTF-8
JSON topology, then raw little-endian float32 blobs in node order (conv
weight/bias, BN alpha/beta/running_mean/running_var, FC weight/bias). The
file is fully deterministic for a given graph, so save/load/save round-trips
are byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import graph as G
from .engine import BNParams, ConvParams, FCParams, Tensor
from .errors import (
    CheckpointError,
    CheckpointLengthError,
    CheckpointMagicError,
    CheckpointTruncatedError,
)

MAGIC = b"LPRN"
VERSION = 1
_F4 = np.dtype("<f4")


def _node_meta(n: G.Node) -> dict:
    meta = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "channels": n.channels}
    if n.kind == G.CONV:
        p = n.params
        meta["weight_dims"] = list(p.weight.dims)
        meta["bias"] = p.bias is not None
        meta["stride"] = p.stride
        meta["padding"] = p.padding
    elif n.kind == G.BN:
        meta["eps"] = n.params.eps
    elif n.kind == G.FC:
        meta["features"] = n.params.in_features
        meta["classes"] = n.params.classes
    return meta


def _node_arrays(n: G.Node):
    if n.kind == G.CONV:
        arrs = [n.params.weight.data]
        if n.params.bias is not None:
            arrs.append(n.params.bias)
        return arrs
    if n.kind == G.BN:
        p = n.params
        return [p.alpha, p.beta, p.running_mean, p.running_var]
    if n.kind == G.FC:
        return [n.params.weight, n.params.bias]
    return []


def _node_blob_elements(meta: dict) -> int:
    kind = meta["kind"]
    if kind == G.CONV:
        o, i, kh, kw = meta["weight_dims"]
        return o * i * kh * kw + (meta["channels"] if meta["bias"] else 0)
    if kind == G.BN:
        return 4 * meta["channels"]
    if kind == G.FC:
        return meta["features"] * meta["classes"] + meta["classes"]
    return 0


def checkpoint_bytes(g: G.ModelGraph) -> bytes:
    meta = {
        "format": "layerprune-checkpoint",
        "nodes": [_node_meta(n) for n in g.nodes],
        "blocks": [
            {
                "id": b.id,
                "branch": list(b.branch),
                "shortcut": list(b.shortcut),
                "add": b.add_id,
                "input": b.input_id,
                "stride": b.stride,
            }
            for b in g.blocks
        ],
        "metadata": g.metadata,
        "counters": {
            "trainable_params": G.count_params(g),
            "stored_elements": G.stored_element_count(g),
        },
    }
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    for n in g.nodes:
        for arr in _node_arrays(n):
            parts.append(np.ascontiguousarray(arr, dtype=_F4).tobytes())
    return b"".join(parts)


def save_checkpoint(g: G.ModelGraph, path) -> int:
    """Write the graph to `path`; returns the byte size (the model-size metric)."""
    blob = checkpoint_bytes(g)
    Path(path).write_bytes(blob)
    return len(blob)


def _rebuild_node(meta: dict, take) -> G.Node:
    kind = meta["kind"]
    params = None
    if kind == G.CONV:
        dims = meta["weight_dims"]
        w = take(int(np.prod(dims))).reshape(dims)
        bias = take(meta["channels"]) if meta["bias"] else None
        params = ConvParams(Tensor(w), bias, stride=meta["stride"], padding=meta["padding"])
    elif kind == G.BN:
        c = meta["channels"]
        params = BNParams(take(c), take(c), take(c), take(c), eps=meta["eps"])
    elif kind == G.FC:
        k, f = meta["classes"], meta["features"]
        params = FCParams(take(k * f).reshape(k, f), take(k))
    return G.Node(meta["id"], kind, list(meta["inputs"]), params, meta["channels"])


def load_checkpoint(path) -> G.ModelGraph:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"file is only {len(raw)} bytes, header needs 16")
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointMagicError(f"unsupported format version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + meta_len:
        raise CheckpointTruncatedError(
            f"metadata declares {meta_len} bytes but only {len(raw) - 16} follow the header"
        )
    try:
        meta = json.loads(raw[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"metadata is not valid JSON: {e}") from e

    expected = sum(_node_blob_elements(nm) for nm in meta["nodes"])
    blob = raw[16 + meta_len :]
    if len(blob) < 4 * expected:
        raise CheckpointTruncatedError(
            f"parameter blob holds {len(blob)} bytes, topology needs {4 * expected}"
        )
    if len(blob) != 4 * expected:
        raise CheckpointLengthError(
            f"topology declares {4 * expected} blob bytes but file carries {len(blob)}"
        )

    flat = np.frombuffer(blob, dtype=_F4)
    cursor = 0

    def take(count: int) -> np.ndarray:
        nonlocal cursor
        out = flat[cursor : cursor + count].copy()
        cursor += count
        return out

    nodes = [_rebuild_node(nm, take) for nm in meta["nodes"]]
    blocks = [
        G.ResidualBlock(
            id=bm["id"],
            branch=list(bm["branch"]),
            shortcut=list(bm["shortcut"]),
            add_id=bm["add"],
            input_id=bm["input"],
            stride=bm["stride"],
        )
        for bm in meta["blocks"]
    ]
    g = G.ModelGraph(nodes, blocks, meta["metadata"])
    G.validate(g)
    return g
