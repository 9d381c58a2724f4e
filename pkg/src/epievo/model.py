"""Executable layered networks with per-kernel shapes.

A convolutional layer keeps one parameter block per kernel. Kernels may have
different odd widths and heights; at forward time they are zero-padded around
their central element to the largest extent in the layer and stacked into a
single weight tensor, so the layer runs as one convolution. Padding elements
are never parameters, so training cannot move them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError, StructuralError
from .tensor import Parameter, Tape, Tensor

CONV = "conv"
FC = "fc"

WEIGHT_STD = 0.1

Layout = tuple[int, ...]


@dataclass(frozen=True)
class KernelShape:
    """Kernel extent in elements; ``width`` x ``height`` (both odd)."""

    width: int
    height: int

    def __post_init__(self):
        for v in (self.width, self.height):
            if v < 1 or v % 2 == 0:
                raise InputError(f"kernel extents must be odd and positive, got {self}")

    @property
    def area(self) -> int:
        return self.width * self.height

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


class ConvKernelGene:
    """One convolution kernel (a node of a conv layer) with its bias."""

    __slots__ = ("weights", "bias")

    def __init__(self, weights: Parameter, bias: Parameter):
        self.weights = weights  # depth x height x width
        self.bias = bias

    @property
    def shape(self) -> KernelShape:
        _, h, w = self.weights.shape
        return KernelShape(w, h)

    @property
    def depth(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ConvKernelGene":
        return ConvKernelGene(self.weights.copy(), self.bias.copy())


class FCNodeGene:
    """One fully connected unit: all of its input weights plus a bias."""

    __slots__ = ("weights", "bias")

    def __init__(self, weights: Parameter, bias: Parameter):
        self.weights = weights
        self.bias = bias

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "FCNodeGene":
        return FCNodeGene(self.weights.copy(), self.bias.copy())


Gene = ConvKernelGene | FCNodeGene


@dataclass
class LayerSpec:
    kind: str
    genes: list = field(default_factory=list)
    stride: tuple[int, int] = (1, 1)

    @property
    def size(self) -> int:
        return len(self.genes)

    @property
    def max_kernel(self) -> tuple[int, int]:
        """(max height, max width) over the layer's kernels."""
        return (
            max(g.weights.shape[1] for g in self.genes),
            max(g.weights.shape[2] for g in self.genes),
        )

    @property
    def padding(self) -> tuple[int, int]:
        kh, kw = self.max_kernel
        return kh // 2, kw // 2

    def copy(self) -> "LayerSpec":
        return LayerSpec(self.kind, [g.copy() for g in self.genes], tuple(self.stride))


@dataclass
class Network:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    num_classes: int
    id: int = 0
    age: int = 0
    absolute_fitness: float = 0.0
    relative_fitness: float = 0.5
    relative_complexity: float = 0.5
    is_new_offspring: bool = False
    species_id: int | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    # short aliases used throughout the evolutionary code
    @property
    def f_a(self) -> float:
        return self.absolute_fitness

    @property
    def f_r(self) -> float:
        return self.relative_fitness

    @property
    def c_r(self) -> float:
        return self.relative_complexity

    def parameters(self) -> Iterator[Parameter]:
        for layer in self.layers:
            for gene in layer.genes:
                yield gene.weights
                yield gene.bias

    def copy(self) -> "Network":
        """Deep copy of structure, weights and optimiser state (RNG excluded)."""
        return Network(
            layers=[layer.copy() for layer in self.layers],
            input_shape=tuple(self.input_shape),
            num_classes=self.num_classes,
            id=self.id,
            age=self.age,
            absolute_fitness=self.absolute_fitness,
            relative_fitness=self.relative_fitness,
            relative_complexity=self.relative_complexity,
            is_new_offspring=self.is_new_offspring,
            species_id=self.species_id,
            rng=self.rng,
        )


# ---------------------------------------------------------------------------
# gene construction


def new_conv_gene(depth: int, shape: KernelShape, rng: np.random.Generator) -> ConvKernelGene:
    w = rng.normal(0.0, WEIGHT_STD, size=(depth, shape.height, shape.width))
    return ConvKernelGene(Parameter(w), Parameter(np.zeros(1)))


def new_fc_gene(fan_in: int, rng: np.random.Generator) -> FCNodeGene:
    return FCNodeGene(Parameter(rng.normal(0.0, WEIGHT_STD, size=fan_in)), Parameter(np.zeros(1)))


def minimal_network(input_shape, num_classes: int, rng: np.random.Generator, **kw) -> Network:
    """A network with only an output layer looking straight at the input."""
    fan_in = int(np.prod(input_shape))
    out = LayerSpec(FC, [new_fc_gene(fan_in, rng) for _ in range(num_classes)])
    return Network([out], tuple(input_shape), num_classes, rng=rng, **kw)


# ---------------------------------------------------------------------------
# shapes


def odd_cap(extent: int) -> int:
    """Largest legal kernel extent for an input of ``extent`` elements."""
    cap = max(1, extent // 2)
    return cap if cap % 2 else cap - 1


def conv_output_extent(extent: int, kernel: int, stride: int) -> int:
    return T.conv_output_size(extent, kernel, stride, kernel // 2)


def input_layouts(net: Network) -> list[Layout]:
    """Input layout of every layer plus the network output layout.

    Spatial layouts are ``(C, H, W)``; flat layouts are ``(n,)``.
    """
    layouts: list[Layout] = []
    cur: Layout = tuple(net.input_shape)
    for layer in net.layers:
        layouts.append(cur)
        if layer.kind == CONV:
            if len(cur) != 3:
                raise StructuralError("convolutional layer placed after a fully connected layer")
            _, h, w = cur
            kh, kw = layer.max_kernel
            sh, sw = layer.stride
            cur = (layer.size, conv_output_extent(h, kh, sh), conv_output_extent(w, kw, sw))
        else:
            cur = (layer.size,)
    layouts.append(cur)
    return layouts


def validate(net: Network) -> None:
    """Raise :class:`StructuralError` unless every structural invariant holds."""
    if not net.layers or net.layers[-1].kind != FC:
        raise StructuralError("a network must end with a fully connected layer")
    if net.layers[-1].size != net.num_classes:
        raise StructuralError(
            f"output layer has {net.layers[-1].size} nodes, task has {net.num_classes} classes"
        )
    seen_fc = False
    for layer in net.layers:
        if layer.size < 1:
            raise StructuralError("every layer needs at least one node")
        if layer.kind == FC:
            seen_fc = True
        elif seen_fc:
            raise StructuralError("convolutional layer placed after a fully connected layer")
    layouts = input_layouts(net)
    for layer, layout in zip(net.layers, layouts):
        if layer.kind == CONV:
            sh, sw = layer.stride
            if sh < 1 or sw < 1:
                raise StructuralError(f"stride must be >= 1, got {layer.stride}")
            for g in layer.genes:
                if g.depth != layout[0]:
                    raise StructuralError(f"kernel depth {g.depth} does not match {layout[0]} input channels")
        else:
            fan_in = int(np.prod(layout))
            for g in layer.genes:
                if g.fan_in != fan_in:
                    raise StructuralError(f"node fan-in {g.fan_in} does not match input size {fan_in}")


def parameter_count(net: Network) -> int:
    return sum(g.weights.size + 1 for layer in net.layers for g in layer.genes)


# ---------------------------------------------------------------------------
# fan-in repair


def refit_conv_gene(gene: ConvKernelGene, depth: int, rng, log: list | None = None) -> None:
    old = gene.weights.data
    if old.shape[0] == depth:
        return
    keep = min(depth, old.shape[0])
    new = np.empty((depth,) + old.shape[1:])
    new[:keep] = old[:keep]
    if depth > keep:
        draw = rng.normal(0.0, WEIGHT_STD, size=(depth - keep,) + old.shape[1:])
        new[keep:] = draw
        if log is not None:
            log.append(draw.ravel())
    gene.weights = Parameter(new)


def refit_fc_gene(gene: FCNodeGene, old: Layout, new: Layout, rng, log: list | None = None) -> None:
    """Map a node's input weights from one input layout to another.

    Overlapping connections keep their weights, surplus ones are dropped and
    missing ones are drawn from N(0, 0.1). Spatial layouts are aligned
    channel by channel and from the top-left corner.
    """
    if tuple(old) == tuple(new):
        return
    w = gene.weights.data
    if len(old) == 3 and len(new) == 3:
        src = w.reshape(old)
        dst = rng.normal(0.0, WEIGHT_STD, size=new)
        c, h, wd = (min(a, b) for a, b in zip(old, new))
        mask = np.ones(new, dtype=bool)
        mask[:c, :h, :wd] = False
        dst[:c, :h, :wd] = src[:c, :h, :wd]
        drawn = dst[mask]
        dst = dst.ravel()
    else:
        n_new = int(np.prod(new))
        keep = min(n_new, w.size)
        dst = np.empty(n_new)
        dst[:keep] = w[:keep]
        drawn = rng.normal(0.0, WEIGHT_STD, size=n_new - keep)
        dst[keep:] = drawn
    if log is not None and drawn.size:
        log.append(np.asarray(drawn).ravel())
    gene.weights = Parameter(dst)


def reconcile(net: Network, old_layouts: dict[int, Layout], rng, log: list | None = None) -> None:
    """Refit every layer whose input layout changed.

    ``old_layouts`` maps ``id(layer)`` to the layout the layer's genes were
    built for; layers absent from the map are assumed already consistent.
    """
    layouts = input_layouts(net)
    for layer, layout in zip(net.layers, layouts):
        old = old_layouts.get(id(layer))
        if old is None or tuple(old) == tuple(layout):
            continue
        for g in layer.genes:
            if layer.kind == CONV:
                refit_conv_gene(g, layout[0], rng, log)
            else:
                refit_fc_gene(g, old, layout, rng, log)


def layout_map(net: Network) -> dict[int, Layout]:
    return {id(layer): lay for layer, lay in zip(net.layers, input_layouts(net))}


# ---------------------------------------------------------------------------
# mixed-shape kernel stacking


def _stack_centered(kernels: Sequence[Tensor], kh: int, kw: int) -> Tensor:
    slots = []
    for k in kernels:
        _, h, w = k.shape
        top, left = (kh - h) // 2, (kw - w) // 2
        slots.append((slice(top, top + h), slice(left, left + w)))
    depth = kernels[0].shape[0]
    out = np.zeros((len(kernels), depth, kh, kw))
    for i, (k, (rs, cs)) in enumerate(zip(kernels, slots)):
        out[i, :, rs, cs] = k.data

    def bw(g):
        return tuple(g[i, :, rs, cs] for i, (rs, cs) in enumerate(slots))

    return T._emit(tuple(kernels), out, bw)


def stack_kernels(layer: LayerSpec) -> tuple[Tensor, np.ndarray]:
    """Stack a conv layer's kernels about their centres.

    Returns the F x D x Kh_max x Kw_max weight tensor (differentiable with
    respect to each kernel's parameter block) and a same-shaped 0/1 mask that
    marks real kernel elements.
    """
    if layer.kind != CONV:
        raise StructuralError("stack_kernels needs a convolutional layer")
    kh, kw = layer.max_kernel
    weight = _stack_centered([g.weights for g in layer.genes], kh, kw)
    ones = [Tensor._wrap(np.ones_like(g.weights.data), False) for g in layer.genes]
    mask = _stack_centered(ones, kh, kw).data
    return weight, mask


def _bias(layer: LayerSpec) -> Tensor:
    return T.concat([g.bias for g in layer.genes])


def forward(net: Network, batch) -> Tensor:
    """Logits (N x classes) for a batch of N x C x H x W inputs."""
    x = T.as_tensor(batch)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise StructuralError(f"input batch {x.shape} does not match network input {net.input_shape}")
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if layer.kind == CONV:
            weight, _ = stack_kernels(layer)
            x = T.relu(T.conv2d(x, weight, _bias(layer), layer.stride, layer.padding))
        else:
            if x.data.ndim != 2:
                x = T.flatten(x)
            weight = T.stack([g.weights for g in layer.genes])
            x = T.linear(x, weight, _bias(layer))
            if i != last:
                x = T.relu(x)
    return x


def train_epoch(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    batches: Sequence[np.ndarray],
    rho: float = 0.9,
    eps: float = 1e-6,
) -> list[float]:
    """One pass of Adadelta over the given index batches. Returns batch losses."""
    if not batches or sum(len(b) for b in batches) == 0:
        raise InputError("cannot train on an empty subset")
    losses = []
    params = list(net.parameters())
    for idx in batches:
        with Tape() as tape:
            loss = T.softmax_cross_entropy(forward(net, images[idx]), labels[idx])
        tape.backward(loss)
        for p in params:
            T.adadelta_step(p, rho, eps)
        losses.append(loss.item())
    net.age += 1
    return losses


def predict(net: Network, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(net, images[start : start + batch_size]).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    """Test accuracy; ties in the logits resolve to the lowest class index."""
    if len(labels) == 0:
        net.absolute_fitness = 0.0
        return 0.0
    acc = float(np.mean(predict(net, images, batch_size) == labels))
    net.absolute_fitness = acc
    return acc
