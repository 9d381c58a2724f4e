"""Evolutionary operators: initial sampling, calibration, mutation, crossover, culling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .genome import GenomeKey, NetworkStats, genome_key, network_stats
from .model import (
    CONV,
    FC,
    WEIGHT_STD,
    ConvKernelGene,
    KernelShape,
    LayerSpec,
    Network,
    input_layouts,
    layout_map,
    new_conv_gene,
    new_fc_gene,
    odd_cap,
    reconcile,
    refit_conv_gene,
    refit_fc_gene,
    validate,
)
from .tensor import Parameter

logger = logging.getLogger(__name__)

MAX_INIT_KERNEL = 7
STRIDE_CANDIDATES = (1, 2, 3)

MUTATION_KINDS = ("AddLayer", "RemoveLayer", "AddNode", "RemoveNode", "ResizeStride", "ResizeKernel")
_FAMILY = {"layer": ("AddLayer", "RemoveLayer"), "node": ("AddNode", "RemoveNode"),
           "stride": ("ResizeStride",), "kernel": ("ResizeKernel",)}


# ---------------------------------------------------------------------------
# initial kernel / stride sampling


@dataclass
class ShapeDistribution:
    """Candidate (width, height) pairs weighted by exp(-width * height)."""

    candidates: list[tuple[int, int]]

    def __post_init__(self):
        if not self.candidates:
            raise InputError("shape distribution needs at least one candidate")

    @property
    def weights(self) -> np.ndarray:
        return np.array([math.exp(-w * h) for w, h in self.candidates])

    @property
    def probabilities(self) -> np.ndarray:
        wts = self.weights
        return wts / wts.sum()

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        return self.candidates[rng.choice(len(self.candidates), p=self.probabilities)]


def shape_weight(width: int, height: int) -> float:
    return math.exp(-width * height)


def kernel_distribution(input_h: int, input_w: int, limit: int = MAX_INIT_KERNEL) -> ShapeDistribution:
    max_h = min(limit, odd_cap(input_h))
    max_w = min(limit, odd_cap(input_w))
    return ShapeDistribution([(w, h) for w in range(1, max_w + 1, 2) for h in range(1, max_h + 1, 2)])


def stride_distribution(input_h: int, input_w: int) -> ShapeDistribution:
    ws = [s for s in STRIDE_CANDIDATES if s <= input_w] or [1]
    hs = [s for s in STRIDE_CANDIDATES if s <= input_h] or [1]
    return ShapeDistribution([(w, h) for w in ws for h in hs])


def sample_kernel_shape(dist: ShapeDistribution, rng) -> KernelShape:
    w, h = dist.sample(rng)
    return KernelShape(w, h)


def sample_stride(dist: ShapeDistribution, rng) -> tuple[int, int]:
    w, h = dist.sample(rng)
    return (h, w)


def new_kernel_for(layout, rng) -> ConvKernelGene:
    c, h, w = layout
    return new_conv_gene(c, sample_kernel_shape(kernel_distribution(h, w), rng), rng)


def network_from_key(key: GenomeKey, input_shape, num_classes: int, rng, **kw) -> Network:
    """Fresh network realising ``key`` with sampled kernel shapes and strides."""
    layers: list[LayerSpec] = []
    net = Network(layers, tuple(input_shape), num_classes, rng=rng, **kw)
    for kind, count in key:
        layout = input_layouts(net)[-1]
        if kind == CONV:
            _, h, w = layout
            stride = sample_stride(stride_distribution(h, w), rng)
            layers.append(LayerSpec(CONV, [new_kernel_for(layout, rng) for _ in range(count)], stride))
        else:
            fan_in = int(np.prod(layout))
            layers.append(LayerSpec(FC, [new_fc_gene(fan_in, rng) for _ in range(count)]))
    validate(net)
    return net


# ---------------------------------------------------------------------------
# calibration


def _logistic_z(values: np.ndarray) -> np.ndarray:
    mu, sigma = values.mean(), values.std()
    if sigma == 0:
        return np.full(values.shape, 0.5)
    return 1.0 / (1.0 + np.exp(-(values - mu) / sigma))


def calibrate(group: Sequence[Network]) -> None:
    """Set relative fitness and relative complexity from z-scores within ``group``."""
    from .model import parameter_count

    if not group:
        raise InputError("cannot calibrate an empty group")
    fitness = np.array([n.absolute_fitness for n in group], dtype=float)
    params = np.array([parameter_count(n) for n in group], dtype=float)
    for n, fr, cr in zip(group, _logistic_z(fitness), _logistic_z(params)):
        n.relative_fitness = float(fr)
        n.relative_complexity = float(cr)


# ---------------------------------------------------------------------------
# mutation


def mutation_weights(stats: NetworkStats) -> dict[str, float]:
    """Normalised probabilities of the layer / node / stride / kernel families."""

    def inv(d):
        return 1.0 / d if d > 0 and math.isfinite(d) else 0.0

    raw = {
        "layer": inv(stats.mean_connections * (stats.mean_nodes + stats.std_nodes)),
        "node": inv(stats.mean_connections),
        "stride": inv(stats.conv_layers * stats.mean_conv_outputs),
        "kernel": inv(stats.mean_node_count * stats.mean_kernel_area) if stats.conv_layers else 0.0,
    }
    total = sum(raw.values())
    if total <= 0:
        raise InputError("degenerate network: no mutation has positive weight")
    return {k: v / total for k, v in raw.items()}


@dataclass
class MutationOutcome:
    kind: str | None
    failed: bool = False
    reason: str = ""


def _conv_count(net: Network) -> int:
    return sum(1 for layer in net.layers if layer.kind == CONV)


def _add_layer(net: Network, rng) -> bool:
    n_conv = _conv_count(net)
    slots = [(CONV, p) for p in range(n_conv + 1)] + [(FC, p) for p in range(n_conv, len(net.layers))]
    kind, pos = slots[rng.integers(len(slots))]
    old = layout_map(net)
    layout = input_layouts(net)[pos]
    if kind == CONV:
        _, h, w = layout
        stride = sample_stride(stride_distribution(h, w), rng)
        layer = LayerSpec(CONV, [new_kernel_for(layout, rng)], stride)
    else:
        below = net.layers[pos - 1].size if pos > 0 else int(np.prod(layout))
        above = net.layers[pos].size
        count = max(1, int(round(math.sqrt(below * above))))
        fan_in = int(np.prod(layout))
        layer = LayerSpec(FC, [new_fc_gene(fan_in, rng) for _ in range(count)])
    net.layers.insert(pos, layer)
    reconcile(net, old, rng)
    enforce_kernel_caps(net, rng)
    return True


def _remove_layer(net: Network, rng) -> bool:
    if len(net.layers) < 2:
        return False
    old = layout_map(net)
    del net.layers[rng.integers(len(net.layers) - 1)]
    reconcile(net, old, rng)
    enforce_kernel_caps(net, rng)
    return True


def _add_node(net: Network, rng) -> bool:
    eligible = range(len(net.layers) - 1)
    if not eligible:
        return False
    i = int(rng.integers(len(eligible)))
    old = layout_map(net)
    layer = net.layers[i]
    layout = input_layouts(net)[i]
    if layer.kind == CONV:
        layer.genes.append(new_kernel_for(layout, rng))
    else:
        layer.genes.append(new_fc_gene(int(np.prod(layout)), rng))
    reconcile(net, old, rng)
    return True


def _drop_input(layer: LayerSpec, layout, j: int) -> None:
    """Remove input channel / unit ``j`` from every gene of ``layer``."""
    for g in layer.genes:
        if layer.kind == CONV:
            g.weights = Parameter(np.delete(g.weights.data, j, axis=0))
        elif len(layout) == 3:
            w = g.weights.data.reshape(layout)
            g.weights = Parameter(np.delete(w, j, axis=0).ravel())
        else:
            g.weights = Parameter(np.delete(g.weights.data, j))


def _remove_node(net: Network, rng) -> bool:
    eligible = [i for i in range(len(net.layers) - 1) if net.layers[i].size >= 2]
    if not eligible:
        return False
    i = eligible[rng.integers(len(eligible))]
    layer = net.layers[i]
    j = int(rng.integers(layer.size))
    above = net.layers[i + 1]
    _drop_input(above, input_layouts(net)[i + 1], j)
    del layer.genes[j]
    return True


def _resize_kernel(net: Network, rng) -> bool:
    layouts = input_layouts(net)
    kernels = [(i, g) for i, layer in enumerate(net.layers) if layer.kind == CONV for g in layer.genes]
    if not kernels:
        return False
    i, gene = kernels[rng.integers(len(kernels))]
    _, in_h, in_w = layouts[i]
    axis = int(rng.integers(2))  # 0 = width, 1 = height
    size = gene.shape.width if axis == 0 else gene.shape.height
    cap = odd_cap(in_w if axis == 0 else in_h)
    first = 1 if rng.random() < 0.5 else -1
    for step in (2 * first, -2 * first):
        new = size + step
        if 1 <= new <= cap:
            resize_kernel(gene, axis, step, rng)
            return True
    return False


def resize_kernel(gene: ConvKernelGene, axis: int, step: int, rng) -> None:
    """Grow (step=+2) or shrink (step=-2) a kernel's width (axis 0) or height (axis 1).

    Growth adds one new element row/column on each side so the original
    kernel keeps its central position.
    """
    w = gene.weights.data
    np_axis = 2 if axis == 0 else 1
    if step > 0:
        pad = [(0, 0)] * 3
        pad[np_axis] = (1, 1)
        grown = np.pad(w, pad)
        fresh = rng.normal(0.0, WEIGHT_STD, size=grown.shape)
        inner = [slice(None)] * 3
        inner[np_axis] = slice(1, -1)
        fresh[tuple(inner)] = w
        new = fresh
    else:
        inner = [slice(None)] * 3
        inner[np_axis] = slice(1, -1)
        new = w[tuple(inner)]
    gene.weights = Parameter(new)


def enforce_kernel_caps(net: Network, rng=None) -> None:
    """Crop kernels (about the centre) that exceed half of their input."""
    for layer, layout in zip(net.layers, input_layouts(net)):
        if layer.kind != CONV:
            continue
        _, h, w = layout
        ch, cw = odd_cap(h), odd_cap(w)
        for g in layer.genes:
            _, gh, gw = g.weights.shape
            if gh > ch or gw > cw:
                th, tw = (gh - min(gh, ch)) // 2, (gw - min(gw, cw)) // 2
                g.weights = Parameter(g.weights.data[:, th : gh - th, tw : gw - tw])


def _resize_stride(net: Network, rng) -> bool:
    layouts = input_layouts(net)
    convs = [i for i, layer in enumerate(net.layers) if layer.kind == CONV]
    if not convs:
        return False
    i = convs[rng.integers(len(convs))]
    layer = net.layers[i]
    dim = int(rng.integers(2))  # 0 = height, 1 = width
    limit = layouts[i][1 + dim]
    first = 1 if rng.random() < 0.5 else -1
    for step in (first, -first):
        new = layer.stride[dim] + step
        if 1 <= new <= limit:
            old = layout_map(net)
            stride = list(layer.stride)
            stride[dim] = new
            layer.stride = tuple(stride)
            reconcile(net, old, rng)
            enforce_kernel_caps(net, rng)
            return True
    return False


_APPLY = {
    "AddLayer": _add_layer,
    "RemoveLayer": _remove_layer,
    "AddNode": _add_node,
    "RemoveNode": _remove_node,
    "ResizeStride": _resize_stride,
    "ResizeKernel": _resize_kernel,
}


def apply_mutation(net: Network, kind: str, rng) -> bool:
    """Apply ``kind`` in place; False when its preconditions cannot be met."""
    return _APPLY[kind](net, rng)


def mutate(
    net: Network,
    rng: np.random.Generator,
    accept_key: Callable[[GenomeKey], bool] | None = None,
) -> MutationOutcome:
    """Sample and apply one structural mutation, atomically.

    ``accept_key`` is consulted with the mutated genome key; a False answer
    (e.g. a novel key while the species cap is reached) reverts the network
    and reports a failed mutation.
    """
    weights = mutation_weights(network_stats(net))
    families = [f for f, p in weights.items() if p > 0]
    trial = net.copy()
    while families:
        probs = np.array([weights[f] for f in families])
        family = families[rng.choice(len(families), p=probs / probs.sum())]
        kinds = list(_FAMILY[family])
        if len(kinds) == 2 and rng.random() >= 0.5:
            kinds.reverse()
        for kind in kinds:
            if apply_mutation(trial, kind, rng):
                validate(trial)
                if accept_key is not None and not accept_key(genome_key(trial)):
                    return MutationOutcome(kind, failed=True, reason="species cap reached")
                net.layers = trial.layers
                return MutationOutcome(kind)
        families.remove(family)
    return MutationOutcome(None, failed=True, reason="no applicable mutation")


# ---------------------------------------------------------------------------
# crossover


def _align(net: Network):
    """Split layers into (conv layers, hidden FC layers, output layer)."""
    conv = [l for l in net.layers if l.kind == CONV]
    fc = [l for l in net.layers if l.kind == FC]
    return conv, fc[:-1], fc[-1]


def crossover_probability(f1: float, f2: float) -> float:
    total = f1 + f2
    return 0.5 if total <= 0 else f1 / total


def crossover(
    p1: Network,
    p2: Network,
    rng: np.random.Generator,
    repair_log: list | None = None,
    child_rng: np.random.Generator | None = None,
    **kw,
) -> Network:
    """Assemble an offspring from whole genes (nodes with all their inputs).

    Matched node slots come from ``p1`` with probability f_r1 / (f_r1 + f_r2).
    Excess nodes and excess layers are kept with the owning parent's relative
    fitness as probability. Inherited genes keep their trained weights; only
    inputs that no longer exist are dropped and missing ones drawn from
    N(0, 0.1) (each draw is appended to ``repair_log`` when given).
    """
    prob1 = crossover_probability(p1.f_r, p2.f_r)
    lay1, lay2 = layout_map(p1), layout_map(p2)
    src_layout: dict[int, object] = {}  # id(gene) -> layout it was built for
    fitter = p1 if p1.f_a >= p2.f_a else p2

    def take(gene, layer, layouts):
        g = gene.copy()
        src_layout[id(g)] = layouts[id(layer)]
        return g

    def merge(l1: LayerSpec, l2: LayerSpec) -> LayerSpec:
        genes = []
        for j in range(max(l1.size, l2.size)):
            if j < l1.size and j < l2.size:
                if rng.random() < prob1:
                    genes.append(take(l1.genes[j], l1, lay1))
                else:
                    genes.append(take(l2.genes[j], l2, lay2))
            elif j < l1.size:
                if rng.random() < p1.f_r:
                    genes.append(take(l1.genes[j], l1, lay1))
            elif rng.random() < p2.f_r:
                genes.append(take(l2.genes[j], l2, lay2))
        if not genes:
            src, lay = (l1, lay1) if fitter is p1 else (l2, lay2)
            genes.append(take(src.genes[0], src, lay))
        stride = l1.stride if rng.random() < prob1 else l2.stride
        return LayerSpec(l1.kind, genes, tuple(stride))

    def excess(layers: list[LayerSpec], parent: Network, layouts) -> list[LayerSpec]:
        kept = []
        for layer in layers:
            if rng.random() < parent.f_r:
                kept.append(LayerSpec(layer.kind, [take(g, layer, layouts) for g in layer.genes], layer.stride))
        return kept

    conv1, hid1, out1 = _align(p1)
    conv2, hid2, out2 = _align(p2)
    layers: list[LayerSpec] = []
    for block1, block2 in ((conv1, conv2), (hid1, hid2)):
        m = min(len(block1), len(block2))
        layers.extend(merge(a, b) for a, b in zip(block1[:m], block2[:m]))
        layers.extend(excess(block1[m:], p1, lay1))
        layers.extend(excess(block2[m:], p2, lay2))
    layers.append(merge(out1, out2))

    child = Network(layers, tuple(p1.input_shape), p1.num_classes, **kw)
    if child_rng is not None:
        child.rng = child_rng
    layouts = input_layouts(child)
    for layer, layout in zip(child.layers, layouts):
        for g in layer.genes:
            old = src_layout[id(g)]
            if layer.kind == CONV:
                refit_conv_gene(g, layout[0], rng, repair_log)
            else:
                refit_fc_gene(g, old, layout, rng, repair_log)
    enforce_kernel_caps(child)
    for p in child.parameters():
        p.reset_state()
    child.age = 0
    child.is_new_offspring = True
    validate(child)
    return child


# ---------------------------------------------------------------------------
# culling


def cull_weight(net: Network) -> float:
    denom = net.relative_fitness * net.relative_complexity
    return net.age / denom if denom > 0 else math.inf


def champions(networks: Sequence[Network]) -> set[int]:
    """Ids of the best network per species (or overall when unspeciated)."""
    best: dict[object, Network] = {}
    for n in networks:
        cur = best.get(n.species_id)
        if cur is None or n.absolute_fitness > cur.absolute_fitness:
            best[n.species_id] = n
    return {n.id for n in best.values()}


def cull(networks: Sequence[Network], limit: int, rng: np.random.Generator) -> list[Network]:
    """Remove unprotected networks by weighted sampling until ``limit`` remain."""
    survivors = list(networks)
    if len(survivors) <= limit:
        return survivors
    champs = champions(survivors)
    protected = {n.id for n in survivors if n.is_new_offspring} | champs
    while len(survivors) > limit:
        pool = [n for n in survivors if n.id not in protected]
        if not pool:
            victims = [n for n in survivors if n.is_new_offspring and n.id not in champs]
            if not victims:
                logger.warning("cull: only champions remain, %d above limit", len(survivors) - limit)
                break
            victim = max(victims, key=lambda n: (n.age, -n.id))
            logger.warning("cull: protected networks exceed the limit, removing offspring %d", victim.id)
        else:
            w = np.array([cull_weight(n) for n in pool])
            if np.isinf(w).any():
                w = np.isinf(w).astype(float)
            if w.sum() <= 0:
                w = np.ones(len(pool))
            victim = pool[rng.choice(len(pool), p=w / w.sum())]
        survivors.remove(victim)
    return survivors
