"""Generator/discriminator testbeds and the filter-granular parameter layout.

Two architectures ship:

* ``point-mlp``: 2-D point GAN, ``dz -> 64 -> 64 -> 2``.
* ``icon-conv``: 8x8 single-channel icon GAN with two 3x3 conv layers.

A *filter* is one dense output unit (weight row + bias) or one conv output
channel (``c_in x k x k`` kernel + bias). Within a layer, the flat parameter
vector interleaves each filter's weights with its bias, so every filter owns
one contiguous span.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHES = ("point-mlp", "icon-conv")
SLOPE = 0.2


@dataclass
class Layer:
    kind: str  # "dense" | "conv"
    weight: Tensor
    bias: Tensor
    padding: int = 0
    mod: Tensor | None = None  # per-filter scalar modulation, effective w*(1+m)

    @property
    def n_filters(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))

    @property
    def span_len(self) -> int:
        return self.fan_in + 1

    def effective(self) -> tuple[Tensor, Tensor]:
        if self.mod is None:
            return self.weight, self.bias
        return T.row_scale(self.weight, self.mod), T.row_scale(self.bias, self.mod)

    def apply(self, x: Tensor) -> Tensor:
        w, b = self.effective()
        if self.kind == "dense":
            return T.dense(x, w, b)
        return T.conv2d(x, w, b, self.padding)

    def zero_filter(self, o: int) -> None:
        self.weight.data[o] = 0.0
        self.bias.data[o] = 0.0

    def flat(self) -> np.ndarray:
        n = self.n_filters
        return np.concatenate([self.weight.data.reshape(n, -1), self.bias.data[:, None]], axis=1).ravel()


def _init_layer(kind: str, shape: tuple[int, ...], rng: np.random.Generator, padding: int = 0) -> Layer:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=shape)
    b = rng.uniform(-bound, bound, size=shape[0])
    return Layer(kind, Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), padding)


def reinit_filter(layer: Layer, o: int, rng: np.random.Generator) -> None:
    """Redraw one filter from the initialisation distribution."""
    bound = 1.0 / math.sqrt(layer.fan_in)
    layer.weight.data[o] = rng.uniform(-bound, bound, size=layer.weight.shape[1:])
    layer.bias.data[o] = rng.uniform(-bound, bound)


class Network:
    tag = "?"

    def __init__(self, arch: str, layers: list[Layer], dz: int):
        if arch not in ARCHES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.layers = layers
        self.dz = dz

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def mod_params(self) -> list[Tensor]:
        return [layer.mod for layer in self.layers if layer.mod is not None]

    def zero_grad(self) -> None:
        for p in self.params() + self.mod_params():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params():
            p.requires_grad = flag

    def enable_modulation(self) -> None:
        for layer in self.layers:
            if layer.mod is None:
                layer.mod = Tensor(np.zeros(layer.n_filters), requires_grad=True)

    def disable_modulation(self) -> None:
        for layer in self.layers:
            layer.mod = None

    def bake_modulation(self) -> None:
        """Fold ``w*(1+m)`` into the base weights and drop the modulation."""
        for layer in self.layers:
            if layer.mod is not None:
                w, b = layer.effective()
                layer.weight.data = w.data.copy()
                layer.bias.data = b.data.copy()
        self.disable_modulation()

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def flat(self) -> np.ndarray:
        return np.concatenate([layer.flat() for layer in self.layers])

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class GeneratorNet(Network):
    tag = "G"

    def forward(self, z: Tensor) -> Tensor:
        L = self.layers
        if self.arch == "point-mlp":
            h = T.leaky_relu(L[0].apply(z), SLOPE)
            h = T.leaky_relu(L[1].apply(h), SLOPE)
            return L[2].apply(h)
        B = z.shape[0]
        h = T.leaky_relu(L[0].apply(z), SLOPE)
        h = T.reshape(h, (B, 16, 4, 4))
        h = T.leaky_relu(L[1].apply(h), SLOPE)
        h = T.upsample_nearest(h, 2)
        h = T.tanh(L[2].apply(h))
        return T.reshape(h, (B, 64))


class DiscriminatorNet(Network):
    tag = "D"

    def forward(self, x: Tensor) -> Tensor:
        L = self.layers
        B = x.shape[0]
        if self.arch == "point-mlp":
            h = T.leaky_relu(L[0].apply(x), SLOPE)
            h = T.leaky_relu(L[1].apply(h), SLOPE)
        else:
            h = T.reshape(x, (B, 1, 8, 8))
            h = T.leaky_relu(L[0].apply(h), SLOPE)
            h = T.leaky_relu(L[1].apply(h), SLOPE)
            h = T.reshape(h, (B, 16 * 64))
        return T.reshape(T.sigmoid(L[2].apply(h)), (B,))


def data_dim(arch: str) -> int:
    return 2 if arch == "point-mlp" else 64


def default_dz(arch: str) -> int:
    return 4 if arch == "point-mlp" else 16


def build_generator(arch: str, rng: np.random.Generator, dz: int | None = None) -> GeneratorNet:
    dz = default_dz(arch) if dz is None else dz
    if arch == "point-mlp":
        layers = [_init_layer("dense", (64, dz), rng), _init_layer("dense", (64, 64), rng),
                  _init_layer("dense", (2, 64), rng)]
    elif arch == "icon-conv":
        layers = [_init_layer("dense", (16 * 4 * 4, dz), rng),
                  _init_layer("conv", (16, 16, 3, 3), rng, padding=1),
                  _init_layer("conv", (1, 16, 3, 3), rng, padding=1)]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return GeneratorNet(arch, layers, dz)


def build_discriminator(arch: str, rng: np.random.Generator) -> DiscriminatorNet:
    if arch == "point-mlp":
        layers = [_init_layer("dense", (64, 2), rng), _init_layer("dense", (64, 64), rng),
                  _init_layer("dense", (1, 64), rng)]
    elif arch == "icon-conv":
        layers = [_init_layer("conv", (16, 1, 3, 3), rng, padding=1),
                  _init_layer("conv", (16, 16, 3, 3), rng, padding=1),
                  _init_layer("dense", (1, 16 * 64), rng)]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return DiscriminatorNet(arch, layers, default_dz(arch))


@dataclass
class GANPair:
    g: GeneratorNet
    d: DiscriminatorNet

    @property
    def arch(self) -> str:
        return self.g.arch

    def net(self, tag: str) -> Network:
        return self.g if tag == "G" else self.d


def build_gan(arch: str, rng: np.random.Generator, dz: int | None = None) -> GANPair:
    g = build_generator(arch, rng, dz)
    d = build_discriminator(arch, rng)
    return GANPair(g, d)


def clone_for_adaptation(source: GANPair) -> GANPair:
    """Deep copy; the clone shares no arrays with ``source``."""
    return copy.deepcopy(source)


def sample_latent(batch: int, dz: int, rng: np.random.Generator) -> Tensor:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return Tensor(rng.standard_normal((batch, dz)))


def generate(g: GeneratorNet, z: np.ndarray | Tensor, chunk: int = 2048) -> np.ndarray:
    """Forward ``g`` without recording a graph."""
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    outs = []
    with T.no_grad():
        for s in range(0, zd.shape[0], chunk):
            outs.append(g(Tensor(zd[s:s + chunk])).data)
    return np.concatenate(outs, axis=0)


# filter layout ---------------------------------------------------------------

@dataclass(frozen=True)
class FilterDescriptor:
    filter_id: int
    network: str  # "G" | "D"
    layer: int
    output: int
    span: tuple[int, int]  # [start, stop) in the network's flat parameter vector


@dataclass
class FilterLayout:
    filters: list[FilterDescriptor]
    layer_sizes: dict[str, list[tuple[int, int]]] = field(default_factory=dict)  # net -> [(n_filters, span_len)]

    def __len__(self) -> int:
        return len(self.filters)

    def ids(self, network: str) -> np.ndarray:
        return np.array([f.filter_id for f in self.filters if f.network == network], dtype=np.int64)

    def count(self, network: str) -> int:
        return sum(n for n, _ in self.layer_sizes[network])

    def offset(self, network: str, layer: int) -> int:
        """filter_id of the first filter in (network, layer)."""
        base = 0
        for net in ("G", "D"):
            for li, (n, _) in enumerate(self.layer_sizes[net]):
                if net == network and li == layer:
                    return base
                base += n
        raise KeyError((network, layer))

    def layer_slices(self, network: str) -> list[slice]:
        return [slice(self.offset(network, li), self.offset(network, li) + n)
                for li, (n, _) in enumerate(self.layer_sizes[network])]

    def n_prunable(self, network: str | None = None) -> int:
        nets = ("G", "D") if network is None else (network,)
        return sum(n * s for net in nets for n, s in self.layer_sizes[net])


def build_filter_layout(g: GeneratorNet, d: DiscriminatorNet) -> FilterLayout:
    filters: list[FilterDescriptor] = []
    sizes: dict[str, list[tuple[int, int]]] = {}
    fid = 0
    for net in (g, d):
        pos = 0
        sizes[net.tag] = []
        for li, layer in enumerate(net.layers):
            span = layer.span_len
            sizes[net.tag].append((layer.n_filters, span))
            for o in range(layer.n_filters):
                filters.append(FilterDescriptor(fid, net.tag, li, o, (pos, pos + span)))
                pos += span
                fid += 1
    return FilterLayout(filters, sizes)
