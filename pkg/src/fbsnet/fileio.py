"""Netpbm image and label I/O, class palettes, and the key=value model config format.

Images travel as binary PPM (P6, maxval 255). Label maps are written either
as palette-rendered P6 files or as raw P5 greymaps holding class ids.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

IGNORE_LABEL = 255
NORM_MEAN = 0.5
NORM_STD = 0.5


class NetpbmError(ValueError):
    pass


def _read_header(blob: bytes, magic: bytes, count: int):
    """Parse ``magic`` plus ``count`` integers; return (values, payload offset)."""
    if blob[:2] != magic:
        raise NetpbmError(f"unsupported format {blob[:2]!r}, expected {magic.decode()}")
    pos, values = 2, []
    while len(values) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("malformed header")
        values.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: no whitespace before pixel data")
    return values, pos + 1


def _read_netpbm(path, magic, channels):
    blob = Path(path).read_bytes()
    (w, h, maxval), off = _read_header(blob, magic, 3)
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}; only 255 is handled")
    if w < 1 or h < 1:
        raise NetpbmError(f"bad image size {w}x{h}")
    need = w * h * channels
    if len(blob) - off < need:
        raise NetpbmError(f"truncated pixel data: {len(blob) - off} of {need} bytes")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=off)
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) uint8 from a binary P6 file."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8 from a binary P5 file."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, grey):
    grey = np.ascontiguousarray(grey, dtype=np.uint8)
    if grey.ndim != 2:
        raise ValueError(f"expected (H, W) pixels, got {grey.shape}")
    h, w = grey.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + grey.tobytes())


def image_to_array(rgb, normalize=False):
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1], or (x - 0.5) / 0.5 when normalizing."""
    img = rgb.astype(np.float32).transpose(2, 0, 1) / np.float32(255)
    if normalize:
        img = (img - np.float32(NORM_MEAN)) / np.float32(NORM_STD)
    return img


def load_image_ppm(path, normalize=False) -> Tensor:
    return Tensor(image_to_array(read_ppm(path), normalize)[None])


def save_image_ppm(path, image):
    """Write a (3, H, W) or (1, 3, H, W) image with values in [0, 1]."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("save one image at a time")
        arr = arr[0]
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    write_ppm(path, pixels.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# palettes

CITYSCAPES_COLORS = [
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
]
CITYSCAPES_NAMES = [
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light", "traffic sign",
    "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "train",
    "motorcycle", "bicycle",
]
CAMVID_COLORS = [
    (128, 128, 128), (128, 0, 0), (192, 192, 128), (128, 64, 128), (60, 40, 222),
    (128, 128, 0), (192, 128, 128), (64, 64, 128), (64, 0, 128), (64, 64, 0), (0, 128, 192),
]
CAMVID_NAMES = [
    "sky", "building", "pole", "road", "sidewalk", "tree", "sign", "fence", "car",
    "pedestrian", "bicyclist",
]


def _bit_colormap(n):
    """Distinct non-black colours from interleaving the bits of the index."""
    out = []
    i = 1
    while len(out) < n:
        r = g = b = 0
        c, shift = i, 7
        while c:
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
            shift -= 1
        out.append((r, g, b))
        i += 1
    return out


@dataclass(frozen=True)
class Palette:
    """Class id -> RGB. Ignore pixels render black, so black is never a class colour."""

    colors: tuple
    names: tuple = ()

    def __post_init__(self):
        cols = tuple(tuple(int(v) for v in c) for c in self.colors)
        object.__setattr__(self, "colors", cols)
        if len(set(cols)) != len(cols):
            raise ValueError("palette colours must be distinct")
        if (0, 0, 0) in cols:
            raise ValueError("black is reserved for ignore pixels")

    def __len__(self):
        return len(self.colors)

    @classmethod
    def default(cls, num_classes):
        """Cityscapes colours for 19 classes, CamVid for 11, otherwise Cityscapes extended."""
        if num_classes == 11:
            return cls(CAMVID_COLORS, CAMVID_NAMES)
        if num_classes <= len(CITYSCAPES_COLORS):
            return cls(CITYSCAPES_COLORS[:num_classes], CITYSCAPES_NAMES[:num_classes])
        extra = [c for c in _bit_colormap(num_classes + len(CITYSCAPES_COLORS))
                 if c not in CITYSCAPES_COLORS]
        return cls(CITYSCAPES_COLORS + extra[:num_classes - len(CITYSCAPES_COLORS)])

    def render(self, labels) -> np.ndarray:
        """(H, W) ids -> (H, W, 3) uint8."""
        labels = np.asarray(labels)
        table = np.zeros((256, 3), dtype=np.uint8)
        table[:len(self.colors)] = self.colors
        defined = labels == IGNORE_LABEL
        defined |= (labels >= 0) & (labels < len(self.colors))
        if not defined.all():
            raise ValueError(f"label id {int(labels[~defined].flat[0])} has no palette colour")
        return table[labels.astype(np.uint8)]

    def invert(self, rgb) -> np.ndarray:
        """(H, W, 3) colours -> (H, W) ids; black maps to the ignore label."""
        rgb = np.asarray(rgb, dtype=np.uint8)
        key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        lookup = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(self.colors)}
        lookup[0] = IGNORE_LABEL
        uniq, inv = np.unique(key, return_inverse=True)
        missing = [u for u in uniq.tolist() if u not in lookup]
        if missing:
            u = missing[0]
            raise ValueError(f"colour {(u >> 16, (u >> 8) & 255, u & 255)} is not in the palette")
        ids = np.array([lookup[u] for u in uniq.tolist()], dtype=np.uint8)
        return ids[inv].reshape(key.shape)


def save_label_ppm(path, labels, palette: Palette):
    write_ppm(path, palette.render(labels))


def read_label_file(path, palette: Palette = None) -> np.ndarray:
    """Class ids from a P5 id map, or from a P6 rendering through ``palette``."""
    head = Path(path).read_bytes()[:2]
    if head == b"P5":
        return read_pgm(path)
    if head == b"P6":
        if palette is None:
            raise ValueError(f"{path}: colour label file needs a palette")
        return palette.invert(read_ppm(path))
    raise NetpbmError(f"{path}: unsupported format {head!r}")


# ---------------------------------------------------------------------------
# key=value model config


def _fmt_value(name, value):
    if name == "input_size":
        return f"{value[0]}x{value[1]}"
    if name == "widths":
        return ",".join(str(v) for v in value)
    if name == "dilations":
        return "; ".join(",".join(str(r) for r in stage) for stage in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_config(cfg: ModelConfig) -> str:
    return "".join(f"{f.name} = {_fmt_value(f.name, getattr(cfg, f.name))}\n" for f in fields(cfg))


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_size(text):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"size must look like HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


_PARSERS = {
    "num_classes": int,
    "input_size": parse_size,
    "widths": lambda t: tuple(int(v) for v in t.split(",")),
    "dilations": lambda t: tuple(tuple(int(r) for r in stage.split(",")) for stage in t.split(";")),
    "seed": int,
    "spatial_branch": _parse_bool,
    "dtype": str,
}


def parse_config(text: str) -> ModelConfig:
    """Build a ModelConfig from ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return ModelConfig(**values).validate()


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())
