"""
TensorFact - Weight Files

Binary layout (little-endian)::

    b"TFW" + ASCII version digit
    u32 layer count
    per layer: u8 kind (0 factorized, 1 dense), u32 T S D2 D1 r delta_r, u8 frozen,
               float32 data: A, B, [ΔA, ΔB], bias  (kind 0)
                             kernel, bias         (kind 1)
    per layer: u8 stride, u8 padding
    u16 canvas, float64 alpha (NaN for an unfactorized model)

The last dense layer is the detection head. Parsing is fail-closed: the whole
file is validated before any model is built.
"""

import logging
import math
import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import BadMagicError, ShapeMismatchError, TruncationError, VersionError, WeightFormatError
from .factorized import DenseConvLayer, FactorizedConvLayer
from .detector import ToyDetector
from .tensor_core import ConvGeometry

logger = logging.getLogger(__name__)

MAGIC_PREFIX = b"TFW"
FORMAT_VERSION = b"1"
KIND_FACTORIZED = 0
KIND_DENSE = 1

_COUNT = struct.Struct("<I")
_RECORD = struct.Struct("<B6IB")
_GEOMETRY = struct.Struct("<BB")
_MODEL = struct.Struct("<Hd")
_FLOAT = np.dtype("<f4")


def _pack_array(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_FLOAT).tobytes()


def serialize_model(model: ToyDetector) -> bytes:
    """
    Encode a detector; parameters are stored as float32.

    Args:
        model: Detector to encode

    Returns:
        bytes: File contents
    """
    out = bytearray(MAGIC_PREFIX + FORMAT_VERSION)
    layers = model.all_layers
    out += _COUNT.pack(len(layers))
    for layer in layers:
        t, s, d2, d1 = layer.kernel_shape
        if isinstance(layer, FactorizedConvLayer):
            out += _RECORD.pack(KIND_FACTORIZED, t, s, d2, d1, layer.r, layer.delta_r, int(layer.base_frozen))
            arrays = [layer.A, layer.B]
            if layer.delta_r:
                arrays += [layer.delta_A, layer.delta_B]
            arrays.append(layer.bias)
        else:
            out += _RECORD.pack(KIND_DENSE, t, s, d2, d1, 0, 0, int(layer.frozen))
            arrays = [layer.kernel, layer.bias]
        for array in arrays:
            out += _pack_array(array)
    for layer in layers:
        if layer.geom.stride > 255 or layer.geom.padding > 255:
            raise WeightFormatError(f"geometry {layer.geom} does not fit the file format")
        out += _GEOMETRY.pack(layer.geom.stride, layer.geom.padding)
    if not 1 <= model.canvas <= 0xFFFF:
        raise WeightFormatError(f"canvas {model.canvas} does not fit the file format")
    out += _MODEL.pack(model.canvas, math.nan if model.alpha is None else model.alpha)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise TruncationError(f"file ends inside {what} (need {size} bytes at offset {self.pos}, "
                                  f"{len(self.data) - self.pos} left)")
        chunk = self.data[self.pos: self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def floats(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * _FLOAT.itemsize, what), dtype=_FLOAT).astype(np.float32).reshape(shape)


def _read_layer(reader: _Reader, index: int):
    kind, t, s, d2, d1, r, delta_r, frozen = reader.unpack(_RECORD, f"layer {index} header")
    if min(t, s, d2, d1) < 1:
        raise ShapeMismatchError(f"layer {index}: kernel dims must be positive, got {(t, s, d2, d1)}")
    if frozen not in (0, 1):
        raise WeightFormatError(f"layer {index}: frozen flag must be 0 or 1, got {frozen}")
    if kind == KIND_FACTORIZED:
        if not 1 <= r <= min(t * s, d2 * d1):
            raise ShapeMismatchError(f"layer {index}: rank {r} outside [1, {min(t * s, d2 * d1)}]")
        arrays = {
            "A": reader.floats((t * s, r), f"layer {index} A"),
            "B": reader.floats((r, d2 * d1), f"layer {index} B"),
        }
        if delta_r:
            arrays["delta_A"] = reader.floats((t * s, delta_r), f"layer {index} delta_A")
            arrays["delta_B"] = reader.floats((delta_r, d2 * d1), f"layer {index} delta_B")
        arrays["bias"] = reader.floats((t,), f"layer {index} bias")
    elif kind == KIND_DENSE:
        if r or delta_r:
            raise ShapeMismatchError(f"layer {index}: dense layer with rank fields {r}/{delta_r}")
        arrays = {
            "kernel": reader.floats((t, s, d2, d1), f"layer {index} kernel"),
            "bias": reader.floats((t,), f"layer {index} bias"),
        }
    else:
        raise WeightFormatError(f"layer {index}: unknown layer kind {kind}")
    return kind, (t, s, d2, d1), bool(frozen), arrays


def deserialize_model(data: bytes, canvas: Optional[int] = None) -> ToyDetector:
    """
    Decode a detector.

    Args:
        data: File contents
        canvas: Input size override (the stored canvas when None)

    Returns:
        ToyDetector: Decoded model

    Raises:
        BadMagicError, VersionError, TruncationError, ShapeMismatchError
    """
    reader = _Reader(data)
    header = reader.take(4, "magic")
    if header[:3] != MAGIC_PREFIX:
        raise BadMagicError(f"not a weight file (magic {header!r})")
    if header[3:4] != FORMAT_VERSION:
        raise VersionError(header[3:4].decode("ascii", "replace"), FORMAT_VERSION.decode("ascii"))
    (count,) = reader.unpack(_COUNT, "layer count")
    if count < 1:
        raise ShapeMismatchError("weight file holds no layers")
    records = [_read_layer(reader, i) for i in range(count)]
    geometries = [reader.unpack(_GEOMETRY, f"layer {i} geometry") for i in range(count)]
    stored_canvas, alpha = reader.unpack(_MODEL, "model trailer")
    if reader.pos != len(data):
        raise WeightFormatError(f"{len(data) - reader.pos} unexpected trailing bytes")
    if stored_canvas < 1 or (canvas is not None and canvas < 1):
        raise ShapeMismatchError("canvas must be positive")
    if not (math.isnan(alpha) or 0.0 < alpha <= 1.0):
        raise WeightFormatError(f"stored alpha {alpha} outside (0, 1]")

    for i in range(1, count):
        if records[i][1][1] != records[i - 1][1][0]:
            raise ShapeMismatchError(f"layer {i} expects {records[i][1][1]} input channels, "
                                     f"layer {i - 1} emits {records[i - 1][1][0]}")
    if records[-1][0] != KIND_DENSE or records[-1][1][0] < 6:
        raise ShapeMismatchError("the last layer must be a dense head with 5 + C outputs")

    layers: List = []
    for i, ((kind, shape, frozen, arrays), (stride, padding)) in enumerate(zip(records, geometries)):
        if stride < 1:
            raise ShapeMismatchError(f"layer {i}: stride must be >= 1")
        geom = ConvGeometry(stride, padding, shape[2:])
        if kind == KIND_FACTORIZED:
            layers.append(FactorizedConvLayer(arrays["A"], arrays["B"], shape, arrays["bias"], geom,
                                              arrays.get("delta_A"), arrays.get("delta_B"), frozen))
        else:
            layers.append(DenseConvLayer(arrays["kernel"], arrays["bias"], geom, frozen))
    head = layers.pop()
    return ToyDetector(layers, head, head.out_channels - 5, stored_canvas if canvas is None else canvas,
                       None if math.isnan(alpha) else alpha)


def save_weights(model: ToyDetector, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize_model(model)
    path.write_bytes(data)
    logger.debug("wrote %d layers (%d bytes) to %s", len(model.all_layers), len(data), path)
    return path


def load_weights(path: Union[str, Path], canvas: Optional[int] = None) -> ToyDetector:
    """
    Read a weight file.

    Args:
        path: File to read
        canvas: Input size override (the stored canvas when None)

    Returns:
        ToyDetector: Decoded model
    """
    path = Path(path)
    model = deserialize_model(path.read_bytes(), canvas)
    logger.debug("loaded %d layers from %s", len(model.all_layers), path)
    return model
