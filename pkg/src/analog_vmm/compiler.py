"""Lowering float networks onto quantized tiles.

Weights are quantized per matrix to signed integers (``|w| <= 63`` by
default), inputs per layer to 5-bit codes. A layer that does not fit one tile
is split into balanced row tiles whose 8-bit partial results are summed
digitally before the activation function; column ranges are split to the
width of one synapse label set (half a block). Up to four signed tiles share
one chip run: two blocks times two label sets.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import INPUT_MAX, WEIGHT_MAX, CoreGeometry, Placement
from .errors import ContractViolation, IngestionError

SLOTS_PER_RUN = 4


@dataclass
class QuantizedMatrix:
    weights: np.ndarray
    scale: float
    limit: int = WEIGHT_MAX

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractViolation("scale must be positive")
        if np.any(np.abs(self.weights) > self.limit):
            raise ContractViolation(f"weights exceed +-{self.limit}")

    def dequantize(self) -> np.ndarray:
        return self.weights * self.scale


def quantize_weights(matrix, limit: int = WEIGHT_MAX) -> QuantizedMatrix:
    """Symmetric per-matrix quantization: ``scale = max|w| / limit``."""
    w = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ContractViolation("weight matrix contains NaN or inf")
    if not 1 <= limit <= WEIGHT_MAX:
        raise ContractViolation(f"limit must lie in [1, {WEIGHT_MAX}]")
    peak = np.abs(w).max() if w.size else 0.0
    if peak == 0:
        return QuantizedMatrix(np.zeros(w.shape, dtype=np.int64), 1.0, limit)
    scale = peak / limit
    return QuantizedMatrix(np.clip(np.rint(w / scale), -limit, limit).astype(np.int64), scale, limit)


def quantize_inputs(vector, scale: float) -> np.ndarray:
    """Map non-negative activations onto 5-bit input codes."""
    if not scale > 0:
        raise ContractViolation("input scale must be positive")
    x = np.asarray(vector, dtype=float)
    if np.any(x < 0):
        raise ContractViolation("negative input in a ReLU pipeline")
    return np.clip(np.rint(x / scale), 0, INPUT_MAX).astype(np.int64)


# --- model description ------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: int = 0
    activation: str = "relu"


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "relu"


@dataclass(frozen=True)
class ModelSpec:
    """Bias-free layer graph. ``input_shape`` is ``(height, width, channels)``."""

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ("relu", "softmax", "none"):
                raise ContractViolation(f"unsupported activation {layer.activation!r}")
            if isinstance(layer, Conv2D) and i:
                raise ContractViolation("convolutions are supported as the first layer only")

    def matmul_shapes(self) -> list[tuple[int, int]]:
        """``(rows, cols)`` of the weight matrix of every layer after lowering."""
        shapes = []
        h, w, c = self.input_shape
        features = h * w * c
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                low = lower_conv(layer, (h, w, c))
                shapes.append((low.patch_length, layer.filters))
                features = low.n_patches * layer.filters
            else:
                shapes.append((features, layer.units))
                features = layer.units
        return shapes

    def to_dict(self) -> dict:
        layers = [{"type": type(l).__name__, **asdict(l)} for l in self.layers]
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        layers = []
        for entry in data["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind == "Conv2D":
                entry["kernel"] = tuple(entry["kernel"])
                entry["stride"] = tuple(entry["stride"])
                layers.append(Conv2D(**entry))
            elif kind == "Dense":
                layers.append(Dense(**entry))
            else:
                raise IngestionError(f"unknown layer type {kind!r}", field="type")
        return cls(data["name"], tuple(data["input_shape"]), tuple(layers))


def dense_model() -> ModelSpec:
    return ModelSpec("dense", (28, 28, 1), (Dense(64, "relu"), Dense(10, "softmax")))


def conv_model() -> ModelSpec:
    return ModelSpec("conv", (28, 28, 1), (Conv2D(20, (10, 10), (5, 5), padding=1, activation="relu"),
                                           Dense(128, "relu"), Dense(10, "softmax")))


MODELS = {"dense": dense_model, "conv": conv_model}


# --- convolution lowering ------------------------------------------------------------

@dataclass(frozen=True)
class ConvLowering:
    padded_shape: tuple[int, int, int]
    out_shape: tuple[int, int]
    patch_length: int
    filters: int

    @property
    def n_patches(self) -> int:
        return self.out_shape[0] * self.out_shape[1]

    @property
    def weight_shape(self) -> tuple[int, int]:
        return self.patch_length, self.filters


def lower_conv(conv: Conv2D, input_shape) -> ConvLowering:
    h, w = input_shape[:2]
    c = input_shape[2] if len(input_shape) > 2 else 1
    kh, kw = conv.kernel
    sh, sw = conv.stride
    ph, pw = h + 2 * conv.padding, w + 2 * conv.padding
    if kh > ph or kw > pw or (ph - kh) % sh or (pw - kw) % sw:
        raise ContractViolation(f"kernel {conv.kernel} with stride {conv.stride} does not tile a {ph}x{pw} input")
    return ConvLowering((ph, pw, c), ((ph - kh) // sh + 1, (pw - kw) // sw + 1), kh * kw * c, conv.filters)


def im2col(images, conv: Conv2D) -> np.ndarray:
    """Patch matrix of shape ``(batch, patches, kh*kw*c)``; patches run row-major over
    the output grid, patch entries over ``(kh, kw, c)``."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[..., None]
    low = lower_conv(conv, x.shape[1:])
    p = conv.padding
    x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    kh, kw = conv.kernel
    sh, sw = conv.stride
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    # windows: (batch, out_h, out_w, c, kh, kw)
    windows = windows.transpose(0, 1, 2, 4, 5, 3)
    return windows.reshape(x.shape[0], low.n_patches, low.patch_length)


# --- partitioning -----------------------------------------------------------------

@dataclass
class Tile:
    layer: int
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int
    signed: bool = True
    patch: int | None = None
    run: int = 0
    slot: int = 0

    @property
    def n_rows(self) -> int:
        return self.row_stop - self.row_start

    @property
    def n_cols(self) -> int:
        return self.col_stop - self.col_start

    def placement(self, geometry: CoreGeometry | None = None) -> Placement:
        g = geometry or CoreGeometry()
        width = g.cols_per_block // 2
        if self.signed:
            return Placement(self.slot // 2, (self.slot % 2) * width, self.n_cols, self.n_rows, True)
        return Placement(self.slot // 2, 0, self.n_cols, self.n_rows, False)


@dataclass
class PartitionPlan:
    rows: int
    cols: int
    tiles: list[Tile]
    patches: int = 1
    activation_point: str = "after_recombination"
    recombine: dict = field(default_factory=dict)

    @property
    def n_row_tiles(self) -> int:
        return len({(t.row_start, t.row_stop) for t in self.tiles})

    @property
    def runs(self) -> int:
        return len({t.run for t in self.tiles})

    def to_rows(self) -> list[dict]:
        return [asdict(t) for t in self.tiles]


def _balanced_ranges(total: int, limit: int) -> list[tuple[int, int]]:
    parts = math.ceil(total / limit)
    edges = np.linspace(0, total, parts + 1).round().astype(int)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def partition(rows: int, cols: int, geometry: CoreGeometry | None = None, signed: bool = True,
              patches: int = 1, layer: int = 0) -> PartitionPlan:
    """Split a ``rows x cols`` matrix into tiles and pack them onto chip runs.

    ``patches > 1`` replicates the tiling once per convolution output position.
    Signed tiles hold at most ``rows_per_block / 2`` logical rows and half a
    block of columns; unsigned tiles hold a full block and occupy two slots.
    """
    if rows < 1 or cols < 1:
        raise ContractViolation("layer dimensions must be positive")
    g = geometry or CoreGeometry()
    max_rows = g.signed_rows if signed else g.rows_per_block
    max_cols = g.cols_per_block // 2 if signed else g.cols_per_block
    tiles = []
    for patch in range(patches):
        for r0, r1 in _balanced_ranges(rows, max_rows):
            for c0, c1 in _balanced_ranges(cols, max_cols):
                tiles.append(Tile(layer, r0, r1, c0, c1, signed, patch if patches > 1 else None))
    plan = PartitionPlan(rows, cols, tiles, patches)
    for i, t in enumerate(tiles):
        plan.recombine.setdefault((t.patch, t.col_start, t.col_stop), []).append(i)
    pack([plan])
    return plan


def pack(plans: list[PartitionPlan]) -> int:
    """Greedy in-order packing of all tiles onto runs; returns the number of runs."""
    run, slot = 0, 0
    for plan in plans:
        for t in plan.tiles:
            need = 1 if t.signed else 2
            if slot + need > SLOTS_PER_RUN:
                run, slot = run + 1, 0
            if not t.signed and slot % 2:
                slot += 1
                if slot + need > SLOTS_PER_RUN:
                    run, slot = run + 1, 0
            t.run, t.slot = run, slot
            slot += need
    return run + 1 if slot else run


def plan_model(spec: ModelSpec, geometry: CoreGeometry | None = None) -> list[PartitionPlan]:
    """Partition every layer of ``spec`` (signed tiles) and pack them jointly."""
    plans = []
    h, w, c = spec.input_shape
    for i, (layer, (rows, cols)) in enumerate(zip(spec.layers, spec.matmul_shapes())):
        patches = lower_conv(layer, (h, w, c)).n_patches if isinstance(layer, Conv2D) else 1
        plans.append(partition(rows, cols, geometry, True, patches, layer=i))
    pack(plans)
    return plans


def total_runs(plans: list[PartitionPlan]) -> int:
    return len({t.run for p in plans for t in p.tiles})


def total_tiles(plans: list[PartitionPlan]) -> int:
    return sum(len(p.tiles) for p in plans)


def combine_partials(partials, plan: PartitionPlan, modes=None) -> np.ndarray:
    """Sum 8-bit per-tile results into full-precision layer pre-activations.

    ``partials[i]`` belongs to ``plan.tiles[i]`` and has shape ``(batch, tile cols)``
    (or ``(tile cols,)``). Returns ``(batch, cols)``, or ``(batch, patches, cols)``
    for a convolution plan.
    """
    if len(partials) != len(plan.tiles):
        raise ContractViolation("one partial result per tile required")
    if modes is None:
        modes = [getattr(p, "mode", "signed") for p in partials]
    if plan.n_row_tiles > 1 and any(m != "signed" for m in modes):
        raise ContractViolation("multi-tile recombination requires signed partials")
    values = [np.atleast_2d(getattr(p, "values", p)) for p in partials]
    batch = values[0].shape[0]
    out = np.zeros((batch, plan.patches, plan.cols), dtype=np.int64)
    for tile, v in zip(plan.tiles, values):
        out[:, tile.patch or 0, tile.col_start:tile.col_stop] += v
    return out if plan.patches > 1 else out[:, 0]


# --- quantized model export ---------------------------------------------------------

QMODEL_MAGIC = b"AVMQ"
QMODEL_VERSION = 1
_HEADER = struct.Struct("<4sHH")
_LAYER = struct.Struct("<IIBxxxddd")


@dataclass
class QuantizedLayer:
    matrix: QuantizedMatrix
    input_scale: float
    gain: float


def write_quantized_model(path, layers: list[QuantizedLayer]) -> None:
    """Little-endian binary: header, one scale-table record per layer, then int8 weights."""
    blob = bytearray(_HEADER.pack(QMODEL_MAGIC, QMODEL_VERSION, len(layers)))
    for layer in layers:
        rows, cols = layer.matrix.weights.shape
        blob += _LAYER.pack(rows, cols, layer.matrix.limit, layer.matrix.scale, layer.input_scale, layer.gain)
    for layer in layers:
        blob += np.ascontiguousarray(layer.matrix.weights, dtype="<i1").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_quantized_model(path) -> list[QuantizedLayer]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IngestionError("file too short for header", field="header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != QMODEL_MAGIC:
        raise IngestionError("bad magic", field="magic")
    if version != QMODEL_VERSION:
        raise IngestionError(f"unsupported version {version}", field="version")
    offset = _HEADER.size
    table = []
    for _ in range(n):
        if offset + _LAYER.size > len(data):
            raise IngestionError("truncated scale table", field="scale_table")
        table.append(_LAYER.unpack_from(data, offset))
        offset += _LAYER.size
    layers = []
    for rows, cols, limit, scale, input_scale, gain in table:
        size = rows * cols
        if offset + size > len(data):
            raise IngestionError("truncated weight data", field="weights")
        w = np.frombuffer(data, dtype="<i1", count=size, offset=offset).reshape(rows, cols).astype(np.int64)
        offset += size
        layers.append(QuantizedLayer(QuantizedMatrix(w, scale, limit), input_scale, gain))
    return layers


def plan_to_json(plans: list[PartitionPlan]) -> str:
    return json.dumps({"runs": total_runs(plans), "tiles": [t for p in plans for t in p.to_rows()]}, indent=1)
