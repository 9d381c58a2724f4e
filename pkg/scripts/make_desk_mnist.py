"""Build the desk-scale MNIST files in data/mnist-desk/ from the npm ``mnist`` package.

The npm package (https://www.npmjs.com/package/mnist, v1.1.0) ships 10,000
MNIST digits as JSON arrays of pixel intensities rounded to three decimals.
Rounding ``value * 255`` recovers the original bytes exactly. The digits are
split 8000/2000 (stratified, fixed seed) and written as gzipped IDX files
under the standard MNIST file names.

Usage::

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/make_desk_mnist.py package/src/digits data/mnist-desk
"""

import argparse
import json
from pathlib import Path

import numpy as np

from epievo.data import write_idx


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20170831)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        values = np.array(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        pixels = np.rint(values * 255).astype(np.uint8).reshape(-1, 28, 28)
        order = rng.permutation(len(pixels))
        test, train = order[: args.test_per_class], order[args.test_per_class :]
        test_x.append(pixels[test])
        test_y.append(np.full(len(test), digit))
        train_x.append(pixels[train])
        train_y.append(np.full(len(train), digit))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        perm = rng.permutation(len(y))
        write_idx(x[perm], y[perm], args.out_dir / f"{name}-images-idx3-ubyte.gz",
                  args.out_dir / f"{name}-labels-idx1-ubyte.gz")
        print(f"{name}: {len(y)} images")


if __name__ == "__main__":
    main()
