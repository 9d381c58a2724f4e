from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from epievo import data as D
from epievo.model import CONV, FC, KernelShape, LayerSpec, Network, input_layouts, new_conv_gene, new_fc_gene

ROOT = Path(__file__).resolve().parents[1]
DESK_MNIST = ROOT / "data" / "mnist-desk"
FULL_MNIST = ROOT / "data" / "mnist"


def naive_conv(x, w, b, stride, pad):
    """Six nested loops over N, F, output rows/cols, D, kernel rows/cols."""
    n, d, h, wd = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((n, d, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for ch in range(d):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * sh + u, c * sw + v] * w[o, ch, u, v]
                    out[i, o, r, c] = acc
    return out


def naive_linear(x, w, b):
    n, i_dim = x.shape
    o_dim = w.shape[0]
    out = np.zeros((n, o_dim))
    for r in range(n):
        for o in range(o_dim):
            acc = b[o]
            for k in range(i_dim):
                acc += x[r, k] * w[o, k]
            out[r, o] = acc
    return out


def central_difference(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def make_network(input_shape, num_classes, conv_layers=(), fc_hidden=(), seed=0) -> Network:
    """Build a network from explicit per-kernel shapes.

    ``conv_layers`` is a list of (list of (width, height), stride) tuples;
    an integer stride applies to both axes.
    """
    rng = np.random.default_rng(seed)
    layers = []
    depth = input_shape[0]
    for shapes, stride in conv_layers:
        if isinstance(stride, int):
            stride = (stride, stride)
        layers.append(LayerSpec(CONV, [new_conv_gene(depth, KernelShape(w, h), rng) for w, h in shapes], stride))
        depth = len(shapes)
    net = Network(layers, tuple(input_shape), num_classes, rng=rng)
    for width in list(fc_hidden) + [num_classes]:
        fan_in = int(np.prod(input_layouts(net)[-1]))
        layers.append(LayerSpec(FC, [new_fc_gene(fan_in, rng) for _ in range(width)]))
    return net


@pytest.fixture(scope="session")
def desk_mnist():
    d = DESK_MNIST
    train = D.load_idx(d / "train-images-idx3-ubyte.gz", d / "train-labels-idx1-ubyte.gz")
    test = D.load_idx(d / "t10k-images-idx3-ubyte.gz", d / "t10k-labels-idx1-ubyte.gz", split="test")
    return train, test


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
