"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"EMOE"                       magic
    u32 version                   currently 1
    u32 kind                      0 = backbone, 1 = expert
    u32 x 7 geometry              channels, size, d_model, d_mid, d_txt, d_ff, T
    -- expert files only --
    u32 expert index
    u32 n, n bytes                positive descriptor (UTF-8)
    u32 n, n bytes                negative descriptor (UTF-8)
    -- all files --
    u32 block count
    per block, in the fixed order of Geometry.backbone_shapes()/expert_shapes():
        u32 element count, then that many f64 values (row-major)
    u32 CRC32 of every preceding byte

A bundle directory holds ``backbone.emoe`` plus ``expert_<i>.emoe`` per expert.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .engine import ExpertBundle
from .text import ExpertDescriptor
from .unet import Geometry, UNetWeights

MAGIC = b"EMOE"
VERSION = 1
KIND_BACKBONE = 0
KIND_EXPERT = 1
BACKBONE_FILE = "backbone.emoe"


class CheckpointError(ValueError):
    pass


def expert_file(i: int) -> str:
    return f"expert_{i}.emoe"


def _geometry_fields(g: Geometry) -> tuple[int, ...]:
    return (g.channels, g.size, g.d_model, g.d_mid, g.d_txt, g.d_ff, g.T)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _encode(kind: int, geom: Geometry, blocks: list[np.ndarray], header_extra: bytes = b"") -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, kind), struct.pack("<7I", *_geometry_fields(geom)), header_extra,
             struct.pack("<I", len(blocks))]
    for arr in blocks:
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def encode_backbone(weights: UNetWeights) -> bytes:
    g = weights.geometry
    return _encode(KIND_BACKBONE, g, [weights.backbone[k] for k in g.backbone_shapes()])


def encode_expert(geom: Geometry, index: int, expert: dict, descriptor: ExpertDescriptor) -> bytes:
    extra = struct.pack("<I", index) + _pack_str(descriptor.positive) + _pack_str(descriptor.negative)
    return _encode(KIND_EXPERT, geom, [expert[k] for k in geom.expert_shapes()], extra)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(data: bytes) -> dict:
    """Parse and validate one checkpoint; returns its fields as a dict."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not an EMOE checkpoint (bad magic)")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupted)")
    r = _Reader(payload)
    r.take(4)
    version, kind = r.u32(), r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    geom = Geometry(*struct.unpack("<7I", r.take(28)))
    out: dict = {"kind": kind, "geometry": geom}
    if kind == KIND_EXPERT:
        out["index"] = r.u32()
        out["descriptor"] = ExpertDescriptor(r.text(), r.text())
        shapes = geom.expert_shapes()
    elif kind == KIND_BACKBONE:
        shapes = geom.backbone_shapes()
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    if r.u32() != len(shapes):
        raise CheckpointError("block count does not match geometry")
    arrays = {}
    for name, shape in shapes.items():
        n = r.u32()
        if n != int(np.prod(shape)):
            raise CheckpointError(f"block {name} has {n} values, expected {int(np.prod(shape))}")
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after last block")
    out["arrays"] = arrays
    return out


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_bundle(bundle: ExpertBundle, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    w = bundle.weights
    paths = [directory / BACKBONE_FILE]
    _write_atomic(paths[0], encode_backbone(w))
    for i, (e, d) in enumerate(zip(w.experts, bundle.descriptors)):
        p = directory / expert_file(i)
        _write_atomic(p, encode_expert(w.geometry, i, e, d))
        paths.append(p)
    return paths


def _read(path: Path) -> dict:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing checkpoint {path}") from None
    try:
        return decode(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def load_bundle(directory: str | Path, geometry: Geometry, M: int, top_n: int,
                experts: list[int] | None = None) -> ExpertBundle:
    """Load a bundle, checking each file's geometry against ``geometry``.

    ``experts`` selects a subset of expert files (default: all ``M``).
    """
    directory = Path(directory)
    bb = _read(directory / BACKBONE_FILE)
    if bb["kind"] != KIND_BACKBONE:
        raise CheckpointError(f"{directory / BACKBONE_FILE} is not a backbone checkpoint")
    if bb["geometry"] != geometry:
        raise CheckpointError(f"backbone geometry {bb['geometry']} does not match config {geometry}")
    indices = list(range(M)) if experts is None else list(experts)
    ex, desc = [], []
    for i in indices:
        rec = _read(directory / expert_file(i))
        if rec["kind"] != KIND_EXPERT or rec["index"] != i:
            raise CheckpointError(f"{expert_file(i)} does not hold expert {i}")
        if rec["geometry"] != geometry:
            raise CheckpointError(f"{expert_file(i)} geometry does not match config")
        ex.append(rec["arrays"])
        desc.append(rec["descriptor"])
    return ExpertBundle(UNetWeights(geometry, bb["arrays"], ex), desc, min(top_n, len(indices)))
