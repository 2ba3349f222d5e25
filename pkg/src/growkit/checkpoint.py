"""Checkpoint container: a small self-describing binary format.

Layout:
    bytes 0..8    magic "GROWCKPT"
    bytes 8..12   format version, little-endian u32
    bytes 12..20  header byte length, little-endian u64
    header        UTF-8 key=value text in [sections] (see below)
    zero padding  up to the next 64-byte file offset
    payload       raw little-endian float32 tensors, row-major, each tensor
                  starting on a 64-byte boundary (offsets are relative to the
                  payload start)

Header sections: [model] holds the architecture, [provenance] the growth
history and origin map, [masks] optional gate state, [tensors] the index
as name=dtype;comma-shape;offset lines. Writing is canonical (fixed key
order), so write -> read -> write reproduces files byte for byte. Files are
replaced atomically (write to a temp name, then rename).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import HeaderError, TensorBoundsError, TruncatedPayloadError
from .growth import MaskSet
from .model import ModelConfig, ParameterSet

MAGIC = b"GROWCKPT"
VERSION = 1
ALIGN = 64
_PREAMBLE = struct.Struct("<8sIQ")

_MODEL_FIELDS = ("vocab_size", "d_model", "d_ffn", "n_heads", "head_dim", "n_layers", "max_seq_len")


@dataclass
class CheckpointMeta:
    config: ModelConfig
    history: list = field(default_factory=list)
    origin_map: Optional[tuple] = None
    masks: Optional[MaskSet] = None


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _render_header(params: ParameterSet, meta: CheckpointMeta) -> tuple:
    lines = ["[model]"]
    for f in _MODEL_FIELDS:
        lines.append(f"{f}={getattr(meta.config, f)}")
    lines.append("[provenance]")
    for i, entry in enumerate(meta.history):
        lines.append(f"history.{i}={entry}")
    if meta.origin_map is not None:
        lines.append("origin_map=" + ",".join(str(o) for o in meta.origin_map))
    if meta.masks is not None:
        m = meta.masks
        lines.append("[masks]")
        lines.append(f"base_d_model={m.base_d_model}")
        lines.append(f"base_d_ffn={m.base_d_ffn}")
        lines.append("width_gates=" + ",".join(repr(float(g)) for g in m.width_gates))
        lines.append(
            "layer_gates=" + ",".join(f"{k}:{float(v)!r}" for k, v in sorted(m.layer_gates.items()))
        )
        lines.append(f"horizon={m.horizon}")
    lines.append("[tensors]")
    offset = 0
    offsets = []
    for name, tensor in params.named_tensors():
        shape = ",".join(str(s) for s in tensor.shape)
        lines.append(f"{name}=f32;{shape};{offset}")
        offsets.append(offset)
        offset = _align(offset + tensor.size * 4)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return header, offsets


def save_checkpoint(path, params: ParameterSet, meta: CheckpointMeta) -> None:
    params.validate_shapes(meta.config)
    header, offsets = _render_header(params, meta)
    preamble = _PREAMBLE.pack(MAGIC, VERSION, len(header))
    payload_start = _align(len(preamble) + len(header))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(preamble)
        fh.write(header)
        fh.write(b"\0" * (payload_start - len(preamble) - len(header)))
        pos = 0
        for (name, tensor), off in zip(params.named_tensors(), offsets):
            fh.write(b"\0" * (off - pos))
            data = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
            fh.write(data)
            pos = off + len(data)
    os.replace(tmp, path)


def _parse_header(text: str):
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections.setdefault(current, {})
            continue
        if current is None or "=" not in line:
            raise HeaderError(f"malformed header line {lineno}: {raw!r}")
        key, value = line.split("=", 1)
        sections[current][key] = value
    return sections


def load_checkpoint(path):
    """Read a container; returns (ParameterSet, CheckpointMeta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREAMBLE.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    if _PREAMBLE.size + header_len > len(blob):
        raise TruncatedPayloadError(f"{path}: declared header exceeds file size")
    try:
        header = blob[_PREAMBLE.size : _PREAMBLE.size + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"{path}: header is not valid UTF-8") from exc
    sections = _parse_header(header)
    for required in ("model", "tensors"):
        if required not in sections:
            raise HeaderError(f"{path}: missing [{required}] section")
    try:
        config = ModelConfig(**{f: int(sections["model"][f]) for f in _MODEL_FIELDS})
    except (KeyError, ValueError) as exc:
        raise HeaderError(f"{path}: bad [model] section: {exc}") from exc

    payload_start = _align(_PREAMBLE.size + header_len)
    payload = blob[payload_start:]
    entries = []
    for name, desc in sections["tensors"].items():
        try:
            dtype, shape_s, off_s = desc.split(";")
            shape = tuple(int(s) for s in shape_s.split(","))
            offset = int(off_s)
        except ValueError as exc:
            raise HeaderError(f"{path}: bad tensor entry {name}={desc}") from exc
        if dtype != "f32":
            raise HeaderError(f"{path}: unsupported dtype {dtype!r} for {name}")
        if offset < 0 or offset % ALIGN:
            raise TensorBoundsError(f"{path}: tensor {name} offset {offset} not 64-byte aligned")
        entries.append((offset, name, shape))
    entries.sort()
    tensors = {}
    prev_end = 0
    for offset, name, shape in entries:
        nbytes = int(np.prod(shape)) * 4
        if offset < prev_end:
            raise TensorBoundsError(f"{path}: tensor {name} overlaps the previous tensor")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"{path}: tensor {name} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        prev_end = offset + nbytes

    params = ParameterSet.from_named(tensors, config)
    prov = sections.get("provenance", {})
    history = [prov[k] for k in sorted((k for k in prov if k.startswith("history.")),
                                       key=lambda k: int(k.split(".")[1]))]
    origin = None
    if "origin_map" in prov:
        origin = tuple(int(x) for x in prov["origin_map"].split(","))
    masks = None
    if "masks" in sections:
        msec = sections["masks"]
        gates = msec.get("width_gates", "")
        width_gates = np.array([float(g) for g in gates.split(",") if g], dtype=np.float64)
        layer_gates = {}
        for item in msec.get("layer_gates", "").split(","):
            if item:
                k, v = item.split(":")
                layer_gates[int(k)] = float(v)
        masks = MaskSet(
            base_d_model=int(msec["base_d_model"]),
            base_d_ffn=int(msec["base_d_ffn"]),
            width_gates=width_gates,
            layer_gates=layer_gates,
            horizon=int(msec.get("horizon", 0)),
        )
    return params, CheckpointMeta(config=config, history=history, origin_map=origin, masks=masks)
