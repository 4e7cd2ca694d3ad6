"""Write a 5 000-image MNIST subset as IDX files.

The official IDX archives are not always reachable; PyPI is. The mlxtend
wheel bundles 5 000 MNIST training images (500 per digit) as a gzipped
CSV, one row of 784 pixels followed by the label. This script pulls that
CSV out of the wheel and writes ``train-images-idx3-ubyte`` and
``train-labels-idx1-ubyte`` so the regular IDX loader can read them.

    python scripts/fetch_mnist_subset.py --out data/mnist
    python scripts/fetch_mnist_subset.py --wheel mlxtend-0.24.0-py3-none-any.whl
"""
from __future__ import annotations

import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from otformer.data import load_mnist_arrays, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def download_wheel(dest: Path) -> Path:
    cmd = [sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps",
           "--only-binary", ":all:", "-d", str(dest), "--timeout", "120", "-q"]
    subprocess.run(cmd, check=True)
    wheels = sorted(glob.glob(str(dest / "mlxtend-*.whl")))
    if not wheels:
        raise FileNotFoundError("pip did not produce an mlxtend wheel")
    return Path(wheels[-1])


def convert(wheel: Path, out: Path) -> tuple[int, int]:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    if pixels.shape[1] != 784 or pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("unexpected CSV layout")
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", pixels.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(out / "train-labels-idx1-ubyte", labels.astype(np.uint8))
    images, lab = load_mnist_arrays(out)
    return images.shape[0], len(np.unique(lab))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist", type=Path)
    ap.add_argument("--wheel", type=Path, help="use an already downloaded mlxtend wheel")
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or download_wheel(Path(tmp))
        count, classes = convert(wheel, args.out)
    print(f"wrote {count} images over {classes} classes to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
