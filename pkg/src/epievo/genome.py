"""Genome keys, genome similarity and per-network structural statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CONV, FC, Network, input_layouts

GenomeKey = tuple[tuple[str, int], ...]


def genome_key(net: Network) -> GenomeKey:
    """Ordered (layer kind, node count) pairs; weights and shapes are ignored."""
    return tuple((layer.kind, layer.size) for layer in net.layers)


def format_key(key: GenomeKey) -> str:
    names = {CONV: "Conv", FC: "FC"}
    return "[" + ",".join(f"({names[k]},{n})" for k, n in key) + "]"


def total_nodes(key: GenomeKey) -> int:
    return sum(n for _, n in key)


def _by_kind(key: GenomeKey, kind: str) -> list[int]:
    return [n for k, n in key if k == kind]


def layer_intersection(a: GenomeKey, b: GenomeKey) -> int:
    """Sum of min node counts over layers aligned by position within each kind."""
    total = 0
    for kind in (CONV, FC):
        total += sum(min(x, y) for x, y in zip(_by_kind(a, kind), _by_kind(b, kind)))
    return total


def similarity(a: GenomeKey, b: GenomeKey) -> float:
    o = layer_intersection(a, b)
    denom = total_nodes(a) + total_nodes(b) - o
    return o / denom if denom else 1.0


@dataclass
class NetworkStats:
    mean_connections: float  # per node
    mean_nodes: float  # per layer
    std_nodes: float
    conv_layers: int
    mean_conv_outputs: float  # output nodes per conv layer
    mean_node_count: float  # used in place of the mean kernel count
    mean_kernel_area: float


def network_stats(net: Network) -> NetworkStats:
    layouts = input_layouts(net)
    sizes = np.array([layer.size for layer in net.layers], dtype=float)
    connections = sum(g.weights.size for layer in net.layers for g in layer.genes)
    conv_outputs = []
    areas = []
    for layer, out in zip(net.layers, layouts[1:]):
        if layer.kind == CONV:
            conv_outputs.append(out[0] * out[1] * out[2])
            areas.extend(g.shape.area for g in layer.genes)
    return NetworkStats(
        mean_connections=connections / sizes.sum(),
        mean_nodes=float(sizes.mean()),
        std_nodes=float(sizes.std()),
        conv_layers=len(conv_outputs),
        mean_conv_outputs=float(np.mean(conv_outputs)) if conv_outputs else 0.0,
        mean_node_count=float(sizes.mean()),
        mean_kernel_area=float(np.mean(areas)) if areas else 0.0,
    )


@dataclass
class Species:
    id: int
    genome_key: GenomeKey
    members: list[int] = field(default_factory=list)
    champion: int | None = None
