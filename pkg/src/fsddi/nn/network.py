"""Architectures, flat parameter storage and checkpoint files."""
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import ConfigurationError, NumericOverflowError
from .layers import (BatchNorm, Concat, Conv3x3, GlobalMeanPool, InstanceNorm, MeanPool2,
                     Pointwise, ReLU, Stash, Upsample2)

CHECKPOINT_MAGIC = b"FSDDI001"


@dataclass(frozen=True)
class SegNetConfig:
    height: int = 64
    width: int = 96
    channels: tuple = (16, 32, 16)
    num_classes: int = 5
    norm: str = "instance"
    depth: int = 1  # stride-2 convolutions in the encoder
    skip: bool = False  # concatenate full-resolution encoder features before the decoder conv

    def __post_init__(self):
        if self.depth < 1 or self.height % 2 ** self.depth or self.width % 2 ** self.depth:
            raise ConfigurationError("height and width must be divisible by 2**depth")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.height % 2 or self.width % 2:
            raise ConfigurationError("height and width must be divisible by 2")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigurationError("channels must be three positive widths")
        if self.norm not in ("instance", "batch"):
            raise ConfigurationError(f"unknown norm kind {self.norm!r}")

    def arch(self):
        return {"kind": "segnet", "height": self.height, "width": self.width,
                "channels": list(self.channels), "num_classes": self.num_classes,
                "norm": self.norm, "depth": self.depth, "skip": self.skip}


@dataclass(frozen=True)
class ClassifierConfig:
    height: int = 64
    width: int = 96
    channels: tuple = (8, 16)
    num_outputs: int = 2

    def arch(self):
        return {"kind": "classifier", "height": self.height, "width": self.width,
                "channels": list(self.channels), "num_outputs": self.num_outputs}


def _segnet_layers(arch):
    c1, c2, c3 = arch["channels"]
    Norm = InstanceNorm if arch["norm"] == "instance" else BatchNorm
    depth = arch.get("depth", 1)
    skip = arch.get("skip", False)
    layers = [Conv3x3("conv1", 1, c1), Norm("norm1", c1), ReLU("relu1")]
    if skip:
        layers.append(Stash("keep1", "full"))
    c_prev = c1
    for d in range(depth):
        sfx = "" if d == 0 else f"_{d + 1}"
        layers += [Conv3x3("conv2" + sfx, c_prev, c2, stride=2), Norm("norm2" + sfx, c2),
                   ReLU("relu2" + sfx)]
        c_prev = c2
    for d in range(depth):
        layers.append(Upsample2("up" if d == 0 else f"up_{d + 1}"))
    c_in = c2
    if skip:
        layers.append(Concat("cat", "full"))
        c_in += c1
    layers += [Conv3x3("conv3", c_in, c3), Norm("norm3", c3), ReLU("relu3"),
               Pointwise("head", c3, arch["num_classes"])]
    return layers


def _classifier_layers(arch):
    c1, c2 = arch["channels"]
    return [
        Conv3x3("conv1", 1, c1), InstanceNorm("norm1", c1), ReLU("relu1"), MeanPool2("pool1"),
        Conv3x3("conv2", c1, c2), InstanceNorm("norm2", c2), ReLU("relu2"), MeanPool2("pool2"),
        GlobalMeanPool("gap"),
        Pointwise("fc", c2, arch["num_outputs"]),
    ]


_BUILDERS = {"segnet": _segnet_layers, "classifier": _classifier_layers}


class Tape:
    """Cached activations of one forward pass; reusable for several backward calls."""

    def __init__(self, network, values, caches, output, buffers):
        self.network = network
        self.values = values
        self.caches = caches
        self.output = output
        self.buffers = buffers

    def backward(self, doutput):
        net = self.network
        grad = np.zeros(net.size)
        dy = doutput
        last = len(net.layers) - 1
        pending = {}
        for idx in range(last, -1, -1):
            layer = net.layers[idx]
            P = net.views(self.values, layer.name)
            G = net.views(grad, layer.name)
            if isinstance(layer, Stash) and layer.key in pending:
                dy = dy + pending.pop(layer.key)
            dy = layer.backward(P, G, self.caches[idx], dy, need_dx=idx > 0)
            if isinstance(layer, Concat):
                dy, pending[layer.key] = dy
            for key, g in G.items():
                if not np.isfinite(g).all():
                    raise NumericOverflowError(f"{layer.name}.{key}", "non-finite gradient")
        return grad


class Network:
    """A fixed sequence of layers over a flat parameter vector."""

    def __init__(self, arch):
        kind = arch.get("kind")
        if kind not in _BUILDERS:
            raise ConfigurationError(f"unknown architecture kind {kind!r}")
        self.arch = dict(arch)
        self.layers = _BUILDERS[kind](arch)
        self.layout = {}
        self.specs = {}
        offset = 0
        for layer in self.layers:
            for spec in layer.param_specs():
                key = f"{layer.name}.{spec.suffix}"
                self.layout[key] = (offset, spec.shape)
                self.specs[key] = spec
                offset += spec.size
        self.size = offset
        mask = np.zeros(offset, dtype=bool)
        for key, (off, shape) in self.layout.items():
            if self.specs[key].trainable:
                mask[off:off + int(np.prod(shape))] = True
        self.trainable = mask
        self._by_layer = {}
        for key in self.layout:
            lname, suffix = key.rsplit(".", 1)
            self._by_layer.setdefault(lname, []).append((suffix, key))

    @property
    def input_shape(self):
        return (self.arch["height"], self.arch["width"])

    def views(self, flat, layer_name):
        out = {}
        for suffix, key in self._by_layer.get(layer_name, ()):
            off, shape = self.layout[key]
            out[suffix] = flat[off:off + int(np.prod(shape))].reshape(shape)
        return out

    def init(self, rng):
        values = np.zeros(self.size)
        for key, (off, shape) in self.layout.items():
            spec = self.specs[key]
            n = spec.size
            if spec.init[0] == "kaiming":
                bound = np.sqrt(6.0 / spec.init[1])
                values[off:off + n] = rng.uniform(-bound, bound, size=n)
            elif spec.init[0] == "ones":
                values[off:off + n] = 1.0
        return ModelParams(values, self.arch)

    def forward(self, values, images, mode="train", track_buffers=False):
        """Run the network on ``images`` of shape ``(B, H, W)``.

        Returns a :class:`Tape`; ``tape.output`` holds channels-last logits.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"image batch shape {images.shape} does not match (B, {self.input_shape[0]}, "
                f"{self.input_shape[1]})")
        x = images[..., None]
        caches = []
        buffers = {} if track_buffers else None
        stash = {}
        for layer in self.layers:
            # non-finite values are reported below with the layer name instead
            with np.errstate(invalid="ignore", over="ignore"):
                if isinstance(layer, Concat):
                    x, cache = layer.forward(None, x, mode, buffers, stash[layer.key])
                else:
                    x, cache = layer.forward(self.views(values, layer.name), x, mode, buffers)
            if isinstance(layer, Stash):
                stash[layer.key] = x
            if not np.isfinite(x).all():
                raise NumericOverflowError(layer.name, "non-finite activation")
            caches.append(cache)
        return Tape(self, values, caches, x, buffers or {})

    def write_buffers(self, values, buffers):
        for key, val in buffers.items():
            off, shape = self.layout[key]
            values[off:off + int(np.prod(shape))] = np.asarray(val).reshape(-1)


@lru_cache(maxsize=None)
def _network_cached(arch_json):
    return Network(json.loads(arch_json))


def network_for(arch):
    return _network_cached(json.dumps(arch, sort_keys=True))


@dataclass
class ModelParams:
    """Flat parameter vector plus the architecture it belongs to."""

    values: np.ndarray
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.network.size:
            raise ConfigurationError(
                f"parameter vector has {self.values.size} entries, architecture needs "
                f"{self.network.size}")

    @property
    def network(self):
        return network_for(self.arch)

    @property
    def layout(self):
        return self.network.layout

    @property
    def size(self):
        return self.values.size

    def layer(self, key):
        off, shape = self.layout[key]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def copy(self):
        return ModelParams(self.values.copy(), self.arch)

    def with_values(self, values):
        return ModelParams(values, self.arch)


def save_checkpoint(params, path):
    net = params.network
    header = json.dumps({
        "arch": params.arch,
        "p": int(params.size),
        "layers": {k: {"offset": o, "shape": list(s)} for k, (o, s) in net.layout.items()},
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint (magic {magic!r})")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if values.size != header["p"]:
        raise ConfigurationError(f"{path}: expected {header['p']} floats, found {values.size}")
    params = ModelParams(values, header["arch"])
    for key, entry in header["layers"].items():
        if params.layout.get(key) != (entry["offset"], tuple(entry["shape"])):
            raise ConfigurationError(f"{path}: layer map mismatch at {key}")
    return params
