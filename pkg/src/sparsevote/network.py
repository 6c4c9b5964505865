"""Layer stacks, receptive fields, initialisation and the model file format."""

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import ClassBoxSpec
from .sparse_conv import FilterBank, relu, vote_forward
from .voxel_grid import NUM_FEATURES, GridConfig

# Lower-layer kernels of the five reference models; the output layer kernel
# is appended per class so the total receptive field covers the class box.
MODEL_HIDDEN_KERNELS = {
    "A": [],
    "B": [3],
    "C": [5],
    "D": [3, 3],
    "E": [5, 3],
}


@dataclass(frozen=True)
class LayerSpec:
    kernel: Tuple[int, int, int]
    f_in: int
    f_out: int
    has_relu: bool

    def to_dict(self):
        return {"kernel": list(self.kernel), "f_in": self.f_in, "f_out": self.f_out,
                "has_relu": self.has_relu}


@dataclass(frozen=True)
class Architecture:
    layers: Tuple[LayerSpec, ...]
    class_name: str = "Car"
    name: str = "custom"

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("an architecture needs at least one layer")
        last = layers[-1]
        if last.f_out != 1 or last.has_relu:
            raise ValueError("the final layer must be linear with a single output channel")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.f_out != nxt.f_in:
                raise ValueError("adjacent layers disagree on channel counts")
        for spec in layers:
            if any(k < 1 or k % 2 == 0 for k in spec.kernel):
                raise ValueError(f"kernel extents must be odd, got {spec.kernel}")

    @property
    def receptive_field(self):
        return receptive_field(self)

    @property
    def num_features(self):
        return self.layers[0].f_in

    def to_dict(self):
        return {"name": self.name, "class_name": self.class_name,
                "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = [LayerSpec(tuple(s["kernel"]), s["f_in"], s["f_out"], s["has_relu"])
                  for s in d["layers"]]
        return cls(tuple(layers), d["class_name"], d["name"])


def receptive_field(arch):
    """Cells per axis seen by one output cell: ``1 + sum(kernel - 1)``."""
    return tuple(1 + sum(s.kernel[a] - 1 for s in arch.layers) for a in range(3))


def output_kernel(target_cells, hidden_kernels):
    """Smallest odd extents giving a receptive field of at least ``target_cells``."""
    grown = sum(k - 1 for k in hidden_kernels)
    out = []
    for t in target_cells:
        k = max(1, int(t) - grown)
        if k % 2 == 0:
            k += 1
        out.append(k)
    return tuple(out)


def make_architecture(model, target_cells, class_name="Car", hidden=8,
                      num_features=NUM_FEATURES):
    """Build one of the reference models A-E for a class needing ``target_cells``."""
    model = model.upper()
    if model not in MODEL_HIDDEN_KERNELS:
        raise ValueError(f"unknown model {model!r}; choose from {sorted(MODEL_HIDDEN_KERNELS)}")
    hidden_kernels = MODEL_HIDDEN_KERNELS[model]
    layers = []
    f_in = num_features
    for k in hidden_kernels:
        layers.append(LayerSpec((k, k, k), f_in, hidden, True))
        f_in = hidden
    layers.append(LayerSpec(output_kernel(target_cells, hidden_kernels), f_in, 1, False))
    return Architecture(tuple(layers), class_name, f"Model {model}")


def architecture_for_box(model, box, cell_size, hidden=8):
    return make_architecture(model, box.cells(cell_size), box.class_name, hidden)


@dataclass(eq=False)
class Network:
    architecture: Architecture
    banks: List[FilterBank]
    grid_config: Optional[GridConfig] = None
    class_box: Optional[ClassBoxSpec] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.banks) != len(self.architecture.layers):
            raise ValueError("one filter bank per layer required")
        for spec, bank in zip(self.architecture.layers, self.banks):
            if bank.weights.shape != (*spec.kernel, spec.f_in, spec.f_out):
                raise ValueError(
                    f"bank shape {bank.weights.shape} does not match layer spec {spec}"
                )

    @property
    def receptive_field(self):
        return self.architecture.receptive_field

    def forward(self, grid, return_activations=False):
        """Score grid over vote-receiving cells of the final (linear) layer.

        With ``return_activations`` also returns the post-ReLU intermediate
        grids, one per hidden layer.
        """
        if grid.num_channels != self.architecture.num_features:
            raise ValueError(
                f"input has {grid.num_channels} channels, network expects "
                f"{self.architecture.num_features}"
            )
        h = grid
        activations = []
        for spec, bank in zip(self.architecture.layers, self.banks):
            h = vote_forward(h, bank)
            if spec.has_relu:
                h = relu(h)
                activations.append(h)
        if return_activations:
            return h, activations
        return h

    def copy(self):
        return Network(self.architecture, [b.copy() for b in self.banks],
                       self.grid_config, self.class_box, dict(self.meta))

    def parameters_equal(self, other):
        return all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.banks, other.banks)
        )


def init_he(arch, seed=0, **network_kwargs):
    """Zero-mean Gaussian weights with variance ``2 / fan_in``; zero biases."""
    rng = np.random.default_rng(seed)
    banks = []
    for spec in arch.layers:
        fan_in = int(np.prod(spec.kernel)) * spec.f_in
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(*spec.kernel, spec.f_in, spec.f_out))
        banks.append(FilterBank(w.astype(np.float32), np.zeros(spec.f_out, np.float32)))
    return Network(arch, banks, **network_kwargs)


# Model file: MAGIC, u16 version, u32 header length, UTF-8 JSON header,
# little-endian float32 payload (per layer: weights then biases), u32 CRC32
# of the payload.
MAGIC = b"SPVNET\x00\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class ModelFormatError(ValueError):
    """Raised when a model file is truncated, corrupt or inconsistent."""


def _header(net):
    return {
        "architecture": net.architecture.to_dict(),
        "class_box": net.class_box.to_dict() if net.class_box else None,
        "format_version": FORMAT_VERSION,
        "grid_config": net.grid_config.to_dict() if net.grid_config else None,
        "meta": net.meta,
    }


def dumps(net):
    header = json.dumps(_header(net), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        arr.astype("<f4").tobytes(order="C")
        for bank in net.banks
        for arr in (bank.weights, bank.biases)
    )
    return (_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload
            + struct.pack("<I", zlib.crc32(payload)))


def loads(data):
    if len(data) < _PREFIX.size:
        raise ModelFormatError("file too short for a model header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a sparsevote model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise ModelFormatError("truncated model header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        arch = Architecture.from_dict(header["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from exc
    sizes = [(s.kernel + (s.f_in, s.f_out), s.f_out) for s in arch.layers]
    expected = sum((int(np.prod(w)) + b) * 4 for w, b in sizes)
    payload = data[start + hlen:]
    if len(payload) != expected + 4:
        raise ModelFormatError(
            f"model payload is {len(payload)} bytes, expected {expected + 4}"
        )
    body = payload[:expected]
    (crc,) = struct.unpack("<I", payload[expected:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError("model payload checksum mismatch")
    banks, pos = [], 0
    for wshape, nb in sizes:
        nw = int(np.prod(wshape))
        w = np.frombuffer(body, "<f4", nw, pos).reshape(wshape)
        pos += nw * 4
        b = np.frombuffer(body, "<f4", nb, pos)
        pos += nb * 4
        try:
            banks.append(FilterBank(w.astype(np.float32), b.astype(np.float32)))
        except ValueError as exc:
            raise ModelFormatError(f"invalid layer parameters: {exc}") from exc
    grid = header.get("grid_config")
    box = header.get("class_box")
    return Network(
        arch, banks,
        GridConfig.from_dict(grid) if grid else None,
        ClassBoxSpec.from_dict(box) if box else None,
        header.get("meta") or {},
    )


def save(net, path):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
