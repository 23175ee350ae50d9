"""Full network assembly, deterministic initialization and the weight file format.

Weight file layout (little-endian)::

    b"FBSW" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values
    u32 CRC32 of every preceding byte

Parameter names are hierarchical (``encoder.stage3.bru07.left.dw1.conv.weight``)
and are part of the format contract. Batch-norm running statistics are
stored alongside the learnable tensors.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import (BRU, CAM, DRM, FAM, SAM, DownsampleBlock, InitialBlock, ProjectionLayer,
                     UpsampleBlock)
from .layers import BatchNorm2d, Container, Conv2d, Module
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, no_grad

DEFAULT_DILATIONS = ([1] * 3, [1] * 3, [1, 2, 5, 9, 17] * 4, [1] * 3, [1] * 3)

MAGIC = b"FBSW"
VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int = 19
    input_size: tuple = (512, 1024)
    widths: tuple = (16, 64, 128)
    dilations: tuple = DEFAULT_DILATIONS
    seed: int = 0
    spatial_branch: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.widths = tuple(int(v) for v in self.widths)
        self.dilations = tuple(tuple(int(r) for r in stage) for stage in self.dilations)

    def validate(self):
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ValueError(f"input size {h}x{w} must be divisible by 8")
        if len(self.widths) != 3:
            raise ValueError("widths must list three stage widths")
        if any(c % 2 for c in self.widths):
            raise ValueError(f"stage widths must be even, got {self.widths}")
        if not self.widths[0] < self.widths[1] < self.widths[2]:
            raise ValueError("stage widths must increase")
        if len(self.dilations) != 5:
            raise ValueError("dilations must give five stages")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


@dataclass
class LayerDesc:
    row: int
    name: str
    kind: str
    module: Module
    branch: str  # "sib", "sdb" or "fuse"
    expected_shape: tuple = None


@dataclass
class ModelGraph:
    config: ModelConfig
    root: Module
    layers: list = field(default_factory=list)

    def named_parameters(self):
        return self.root.named_parameters()

    def parameters(self):
        return self.root.parameters()

    def named_buffers(self):
        return self.root.named_buffers()

    def registry(self):
        """Name -> array for every stored tensor (parameters, then running statistics)."""
        reg = {name: p.data for name, p in self.named_parameters()}
        reg.update(self.named_buffers())
        return reg

    def zero_grad(self):
        self.root.zero_grad()

    def layer(self, key):
        for d in self.layers:
            if key in (d.name, d.row):
                return d
        raise KeyError(key)

    @property
    def sib_layers(self):
        return [d for d in self.layers if d.branch == "sib"]

    @property
    def sdb_layers(self):
        return [d for d in self.layers if d.branch == "sdb"]

    def forward(self, x: Tensor, training=False, check_shape=True) -> Tensor:
        cfg = self.config
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"expected a 3-channel image batch, got {x.shape}")
        if check_shape and (h, w) != cfg.input_size:
            raise ShapeError(f"input {h}x{w} does not match configured {cfg.input_size}")
        if h % 8 or w % 8:
            raise ShapeError(f"input {h}x{w} must be divisible by 8")
        sib = self.layers[0].module(x, training)
        detail = sib
        for d in self.sdb_layers:
            detail = d.module(detail, training)
        for d in self.sib_layers[1:]:
            sib = d.module(sib, training)
        for d in self.layers:
            if d.kind == "FAM":
                sib = d.module(sib, detail, training)
            elif d.kind == "Projection":
                return d.module(sib, training)
        raise RuntimeError("graph has no projection layer")

    def __call__(self, x, training=False):
        return self.forward(x, training)


def _stage(prefix, channels, dilations, dtype):
    return Container([(f"bru{i:02d}", BRU(channels, r, dtype=dtype)) for i, r in enumerate(dilations)])


def build(config: ModelConfig = None) -> ModelGraph:
    """Assemble the network row by row; the default config gives the 45-row layout."""
    cfg = (config or ModelConfig()).validate()
    dt = cfg.np_dtype
    c1, c2, c3 = cfg.widths
    d1, d2, d3, d4, d5 = cfg.dilations

    encoder = Container()
    encoder.initial = InitialBlock(3, c1, dt)
    encoder.cam1 = CAM(c1, dtype=dt)
    encoder.stage1 = _stage("stage1", c1, d1, dt)
    encoder.cam2 = CAM(c1, dtype=dt)
    encoder.down1 = DownsampleBlock(c1, c2, dt)
    encoder.stage2 = _stage("stage2", c2, d2, dt)
    encoder.cam3 = CAM(c2, dtype=dt)
    encoder.down2 = DownsampleBlock(c2, c3, dt)
    encoder.stage3 = _stage("stage3", c3, d3, dt)
    encoder.cam4 = CAM(c3, dtype=dt)

    decoder = Container()
    decoder.up1 = UpsampleBlock(c3, c2, dt)
    decoder.stage4 = _stage("stage4", c2, d4, dt)
    decoder.cam5 = CAM(c2, dtype=dt)
    decoder.up2 = UpsampleBlock(c2, c1, dt)
    decoder.stage5 = _stage("stage5", c1, d5, dt)
    decoder.cam6 = CAM(c1, dtype=dt)

    root = Container()
    root.encoder = encoder
    if cfg.spatial_branch:
        sdb = Container()
        sdb.drm = DRM(c1, 4 * c1, dt)
        sdb.sam = SAM(dtype=dt)
        root.sdb = sdb
    root.decoder = decoder
    if cfg.spatial_branch:
        root.fam = FAM(c1, dtype=dt)
    root.head = ProjectionLayer(c1, cfg.num_classes, dt)

    graph = ModelGraph(cfg, root)
    rows = []

    def add_row(name, kind, module, branch="sib"):
        row = len([d for d in rows if d.branch != "sdb"]) + 1
        rows.append(LayerDesc(row, name, kind, module, branch))

    add_row("encoder.initial", "InitialBlock", encoder.initial)
    if cfg.spatial_branch:
        rows.append(LayerDesc(0, "sdb.drm", "DRM", root.sdb.drm, "sdb"))
        rows.append(LayerDesc(0, "sdb.sam", "SAM", root.sdb.sam, "sdb"))
    for cname, child in encoder._children.items():
        if cname == "initial":
            continue
        if isinstance(child, Container):
            for bname, bru in child._children.items():
                add_row(f"encoder.{cname}.{bname}", f"BRU(d={bru.dilation})", bru)
        else:
            add_row(f"encoder.{cname}", type(child).__name__.replace("Block", " Block"), child)
    for cname, child in decoder._children.items():
        if isinstance(child, Container):
            for bname, bru in child._children.items():
                add_row(f"decoder.{cname}.{bname}", f"BRU(d={bru.dilation})", bru)
        else:
            add_row(f"decoder.{cname}", type(child).__name__.replace("Block", " Block"), child)
    if cfg.spatial_branch:
        add_row("fam", "FAM", root.fam, "fuse")
    add_row("head", "Projection", root.head, "fuse")

    # SDB rows share the row number of the SIB layer they sit beside: DRM spans
    # rows 2..(last encoder BRU), SAM sits on the final encoder CAM row.
    for d in rows:
        if d.name == "sdb.drm":
            d.row = 2
        elif d.name == "sdb.sam":
            d.row = next(x.row for x in rows if x.name == "encoder.cam4")
    graph.layers = rows
    _annotate_shapes(graph, (1, 3, *cfg.input_size))
    init_weights(graph, cfg.seed)
    return graph


def _annotate_shapes(graph, in_shape):
    shape = graph.layers[0].module.out_shape(in_shape)
    graph.layers[0].expected_shape = shape
    detail = shape
    for d in graph.sdb_layers:
        detail = d.module.out_shape(detail)
        d.expected_shape = detail
    for d in graph.layers[1:]:
        if d.branch == "sdb":
            continue
        if d.kind == "FAM" and detail != shape:
            raise ShapeError(f"FAM inputs differ: {shape} vs {detail}")
        shape = d.module.out_shape(shape)
        d.expected_shape = shape


def _modules_of(obj):
    root = obj.root if isinstance(obj, ModelGraph) else obj
    return root.named_modules()


def init_weights(target, seed: int):
    """Fill conv weights from N(0, 2/fan_in); zero biases; reset batch norm.

    Draws come from numpy's PCG64 generator, whose ``standard_normal``
    stream is identical on every platform for a given seed. Modules are
    visited in registry order.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))
    for _, mod in _modules_of(target):
        if isinstance(mod, Conv2d):
            w = mod.weight.data
            std = np.sqrt(2.0 / mod.spec.fan_in)
            w[...] = (rng.standard_normal(w.shape) * std).astype(w.dtype)
            if mod.bias is not None:
                mod.bias.data[...] = 0
        elif isinstance(mod, BatchNorm2d):
            mod.gamma.data[...] = 1
            mod.beta.data[...] = 0
            mod.reset_stats()


def forward(graph: ModelGraph, x: Tensor, mode="eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with no_grad():
            return graph.forward(x, training=False)
    return graph.forward(x, training=True)


def predict_labels(graph: ModelGraph, x: Tensor) -> np.ndarray:
    """Argmax class map of shape (N, 1, H, W)."""
    logits = forward(graph, x, "eval")
    return logits.data.argmax(axis=1)[:, None].astype(np.int64)


# ---------------------------------------------------------------------------
# weight files


class WeightFileError(Exception):
    code = "weight_file_error"


class BadMagicError(WeightFileError):
    code = "bad_magic"


class VersionMismatchError(WeightFileError):
    code = "version_mismatch"


class TruncatedFileError(WeightFileError):
    code = "truncated"


class ChecksumError(WeightFileError):
    code = "checksum_mismatch"


class MissingParameterError(WeightFileError):
    code = "missing_parameter"


class UnexpectedParameterError(WeightFileError):
    code = "unexpected_parameter"


class ShapeConflictError(WeightFileError):
    code = "shape_conflict"


def encode_weights(registry: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(registry))]
    for name, arr in registry.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_weights(blob: bytes) -> dict:
    if len(blob) < 16:
        raise TruncatedFileError(f"weight file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported weight file version {version}")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("CRC32 mismatch: file is truncated or corrupted")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise TruncatedFileError(f"payload of {name!r} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise TruncatedFileError(str(exc)) from exc
    if pos != len(body):
        raise TruncatedFileError(f"{len(body) - pos} unread bytes after last tensor")
    return out


def save_weights(graph: ModelGraph, path):
    Path(path).write_bytes(encode_weights(graph.registry()))


def load_weights(path, graph: ModelGraph = None) -> dict:
    """Read a weight file; if ``graph`` is given, validate against it and copy values in."""
    registry = decode_weights(Path(path).read_bytes())
    if graph is not None:
        assign_registry(graph, registry)
    return registry


def assign_registry(graph: ModelGraph, registry: dict):
    targets = dict(graph.named_parameters())
    buffers = dict(graph.named_buffers())
    expected = {name: t.shape for name, t in targets.items()}
    expected.update({name: b.shape for name, b in buffers.items()})
    for name in expected:
        if name not in registry:
            raise MissingParameterError(f"missing parameter {name!r}")
    for name in registry:
        if name not in expected:
            raise UnexpectedParameterError(f"unexpected parameter {name!r}")
    for name, shape in expected.items():
        if tuple(registry[name].shape) != tuple(shape):
            raise ShapeConflictError(f"{name!r}: file has {registry[name].shape}, model expects {shape}")
    for name, t in targets.items():
        t.data[...] = registry[name]
    for name, b in buffers.items():
        b[...] = registry[name]
    for _, mod in graph.root.named_modules():
        if isinstance(mod, BatchNorm2d):
            mod.stats_ready = True


def infer_num_classes(registry: dict) -> int:
    return int(registry["head.classifier.weight"].shape[0])


def config_for_registry(registry: dict, input_size, base: ModelConfig = None) -> ModelConfig:
    base = base or ModelConfig()
    return replace(base, num_classes=infer_num_classes(registry), input_size=tuple(input_size),
                   spatial_branch="fam.reduce.conv.weight" in registry)
