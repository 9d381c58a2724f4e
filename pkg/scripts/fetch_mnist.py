"""Place the full MNIST IDX files in data/mnist/ from the npm ``mnist-data`` package.

The npm package (https://www.npmjs.com/package/mnist-data, v1.2.6) ships the
four original uncompressed IDX files. They are checked against known SHA-256
digests and stored gzipped under the standard file names, which
``epievo.data.load_task("mnist", ...)`` reads directly.

Usage::

    python scripts/fetch_mnist.py data/mnist
    python scripts/fetch_mnist.py data/mnist --tarball mnist-data-1.2.6.tgz
"""

import argparse
import gzip
import hashlib
import subprocess
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist-data@1.2.6"
SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--tarball", type=Path, help="use an already downloaded package tarball")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            name = subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True,
                                  capture_output=True, text=True).stdout.strip().splitlines()[-1]
            tarball = Path(tmp) / name
        args.out_dir.mkdir(parents=True, exist_ok=True)
        with tarfile.open(tarball) as tar:
            for name, digest in SHA256.items():
                raw = tar.extractfile(f"package/data/{name}").read()
                if hashlib.sha256(raw).hexdigest() != digest:
                    raise SystemExit(f"{name}: SHA-256 mismatch")
                # mtime=0 keeps the gzip output byte-stable
                with open(args.out_dir / f"{name}.gz", "wb") as fh:
                    with gzip.GzipFile(filename=name, mode="wb", fileobj=fh, mtime=0) as gz:
                        gz.write(raw)
                print(f"{name}: {len(raw)} bytes, checksum ok")


if __name__ == "__main__":
    main()
