"""Versioned on-disk format for networks and connectors.

A checkpoint file is a UTF-8 manifest of ``key: value`` lines terminated by
``end_manifest``, followed by a binary payload of little-endian floats. The
manifest lists every parameter and buffer in payload order together with its
shape, byte offset and length, plus a SHA-256 digest of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import (
    CheckpointError,
    CorruptPayloadError,
    TopologyMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .nn import Classifier, Connector, FeatureExtractor, Module, Network

MAGIC = "distill-lab-checkpoint"
FORMAT_VERSION = 1
END = "end_manifest"

_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class Entry:
    name: str
    role: str  # "param" or "buffer"
    shape: tuple
    offset: int
    nbytes: int
    frozen: bool = False


@dataclass
class Checkpoint:
    kind: str
    dtype: str
    topology: dict
    seed: Optional[int]
    step: int
    entries: list = field(default_factory=list)
    arrays: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_module(self) -> Module:
        module = build_module(self.kind, self.topology, self.dtype)
        _apply(module, self)
        if isinstance(module, Network):
            module.seed = self.seed
            module.step = self.step
        return module


def _topology(module: Module) -> tuple[str, dict]:
    if isinstance(module, Connector):
        return "connector", _connector_topology(module)
    if isinstance(module, Network):
        return "network", {
            "phi": module.phi.widths,
            "classes": module.num_classes,
            "connector": None if module.connector is None else _connector_topology(module.connector),
        }
    if isinstance(module, FeatureExtractor):
        return "feature_extractor", {"phi": module.widths}
    raise CheckpointError(f"cannot checkpoint a {type(module).__name__}")


def _connector_topology(c: Connector) -> dict:
    topo = {"widths": c.widths, "batchnorm": c.batchnorm, "relu": c.relu}
    if c.batchnorm:
        st = c.blocks[0].bn.state
        topo["bn_momentum"] = st.momentum
        topo["bn_eps"] = st.eps
    return topo


def _build_connector(topo: dict, dtype) -> Connector:
    widths = topo["widths"]
    hidden = widths[1] if len(widths) > 2 else None
    c = Connector(
        widths[0], widths[-1], depth=len(widths) - 1, hidden=hidden,
        batchnorm=topo["batchnorm"], relu=topo["relu"], dtype=dtype,
    )
    if len(widths) == 4 and widths[1] != widths[2]:
        raise TopologyMismatchError(f"unsupported connector widths {widths}")
    if topo["batchnorm"]:
        for block in c.blocks:
            block.bn.state.momentum = topo["bn_momentum"]
            block.bn.state.eps = topo["bn_eps"]
    return c


def build_module(kind: str, topo: dict, dtype: str = "float64") -> Module:
    """Fresh module with the recorded topology; parameters are overwritten on load."""
    np_dtype = np.dtype(dtype).type
    rng = np.random.default_rng(0)
    try:
        if kind == "connector":
            return _build_connector(topo, np_dtype)
        if kind == "feature_extractor":
            return FeatureExtractor(topo["phi"], rng, np_dtype)
        if kind == "network":
            phi = FeatureExtractor(topo["phi"], rng, np_dtype)
            conn = None if topo["connector"] is None else _build_connector(topo["connector"], np_dtype)
            width = conn.out_width if conn is not None else phi.feature_dim
            g = Classifier(width, topo["classes"], rng, np_dtype)
            return Network(phi, g, conn)
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyMismatchError(f"bad topology for {kind}: {exc}") from exc
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _dtype_name(module: Module) -> str:
    return str(module.parameters()[0].data.dtype)


def encode(module: Module, seed: Optional[int] = None, step: Optional[int] = None, extra: Optional[dict] = None) -> bytes:
    kind, topo = _topology(module)
    dtype = _dtype_name(module)
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype}")
    le = _DTYPES[dtype]
    if isinstance(module, Network):
        seed = module.seed if seed is None else seed
        step = module.step if step is None else step
    chunks, lines, offset = [], [], 0
    items = [("param", n, p.data, p.frozen) for n, p in module.named_parameters()]
    items += [("buffer", n, b, False) for n, b in module.named_buffers()]
    for role, name, arr, frozen in items:
        raw = np.ascontiguousarray(arr, dtype=le).tobytes()
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(
            f"{role}.{name}: shape={shape} offset={offset} nbytes={len(raw)} frozen={int(frozen)}"
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = [
        MAGIC,
        f"format_version: {FORMAT_VERSION}",
        f"kind: {kind}",
        f"dtype: {dtype}",
        f"topology: {json.dumps(topo, sort_keys=True, separators=(',', ':'))}",
        f"seed: {'none' if seed is None else int(seed)}",
        f"step: {int(step or 0)}",
        f"extra: {json.dumps(extra or {}, sort_keys=True, separators=(',', ':'))}",
        f"payload_bytes: {len(payload)}",
        f"payload_sha256: {hashlib.sha256(payload).hexdigest()}",
    ]
    manifest = "\n".join(header + lines + [END]) + "\n"
    return manifest.encode("utf-8") + payload


def save_checkpoint(module: Module, path: Union[str, os.PathLike], **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(module, **kwargs)
    path.write_bytes(data)
    return path


def _parse_entry(line: str) -> Entry:
    key, _, rest = line.partition(": ")
    role, _, name = key.partition(".")
    fields = dict(tok.split("=", 1) for tok in rest.split())
    shape = tuple(int(s) for s in fields["shape"].split("x")) if fields["shape"] else ()
    return Entry(name, role, shape, int(fields["offset"]), int(fields["nbytes"]), fields["frozen"] == "1")


def decode(data: bytes) -> Checkpoint:
    end_marker = ("\n" + END + "\n").encode()
    cut = data.find(end_marker)
    if cut < 0:
        raise TruncatedPayloadError("manifest terminator not found")
    try:
        manifest = data[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"manifest is not UTF-8: {exc}") from exc
    payload = data[cut + len(end_marker):]
    if not manifest or manifest[0] != MAGIC:
        raise CheckpointError("not a distill-lab checkpoint")
    meta, entries = {}, []
    try:
        for line in manifest[1:]:
            if line.startswith(("param.", "buffer.")):
                entries.append(_parse_entry(line))
            else:
                key, _, value = line.partition(": ")
                meta[key] = value
        version = int(meta["format_version"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format_version {version}, this build reads {FORMAT_VERSION}"
        )
    declared = int(meta["payload_bytes"])
    if len(payload) < declared:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, manifest declares {declared}")
    if len(payload) > declared:
        raise CorruptPayloadError(f"{len(payload) - declared} trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CorruptPayloadError("payload checksum mismatch")
    dtype = meta["dtype"]
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype}")
    arrays = {}
    for e in entries:
        chunk = payload[e.offset:e.offset + e.nbytes]
        if len(chunk) != e.nbytes:
            raise TruncatedPayloadError(f"entry {e.name} runs past the payload")
        arr = np.frombuffer(chunk, dtype=_DTYPES[dtype]).astype(dtype)
        expected = int(np.prod(e.shape)) if e.shape else 1
        if arr.size != expected:
            raise CorruptPayloadError(f"entry {e.name}: {arr.size} values for shape {e.shape}")
        arrays[(e.role, e.name)] = arr.reshape(e.shape)
    seed = None if meta["seed"] == "none" else int(meta["seed"])
    return Checkpoint(
        kind=meta["kind"],
        dtype=dtype,
        topology=json.loads(meta["topology"]),
        seed=seed,
        step=int(meta["step"]),
        entries=entries,
        arrays=arrays,
        extra=json.loads(meta.get("extra", "{}")),
    )


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    return decode(Path(path).read_bytes())


def _apply(module: Module, ckpt: Checkpoint) -> None:
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    want = {("param", n) for n in params} | {("buffer", n) for n in buffers}
    have = set(ckpt.arrays)
    if want != have:
        missing = sorted(n for _, n in want - have)
        unexpected = sorted(n for _, n in have - want)
        raise TopologyMismatchError(f"missing {missing}, unexpected {unexpected}")
    frozen = {e.name: e.frozen for e in ckpt.entries if e.role == "param"}
    for name, p in params.items():
        arr = ckpt.arrays[("param", name)]
        if arr.shape != p.shape:
            raise TopologyMismatchError(f"{name}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data = arr.copy()
        p.frozen = frozen[name]
        p.requires_grad = not p.frozen
        p.grad = None
    bn_states = {}
    if isinstance(module, (Connector, Network)):
        conn = module if isinstance(module, Connector) else module.connector
        prefix = "" if isinstance(module, Connector) else "connector."
        if conn is not None:
            for i, block in enumerate(conn.blocks):
                if block.bn is not None:
                    bn_states[f"{prefix}blocks.{i}.bn"] = block.bn.state
    for key, state in bn_states.items():
        state.running_mean = ckpt.arrays[("buffer", f"{key}.running_mean")].copy()
        state.running_var = ckpt.arrays[("buffer", f"{key}.running_var")].copy()


def load_module(path, kind: Optional[str] = None, topology: Optional[dict] = None) -> Module:
    """Load and rebuild; ``kind``/``topology`` if given must match the file."""
    ckpt = load_checkpoint(path)
    if kind is not None and ckpt.kind != kind:
        raise TopologyMismatchError(f"expected a {kind} checkpoint, found {ckpt.kind}")
    if topology is not None and ckpt.topology != topology:
        raise TopologyMismatchError(f"topology {ckpt.topology} != expected {topology}")
    return ckpt.to_module()


def load_network(path, widths=None) -> Network:
    net = load_module(path, kind="network")
    if widths is not None and list(widths) != net.widths:
        raise TopologyMismatchError(f"network widths {net.widths} != expected {list(widths)}")
    return net
