#!/usr/bin/env python3
"""Download the benchmark data into data/ in the layout the tests and CLI expect.

  data/uci/<name>.csv           header row, features first, target in the last column
  data/fashion_mnist/train.csv  label in column 0, then 784 pixels scaled to [0, 1]
  data/fashion_mnist/test.csv   same layout (held-out in-distribution inputs)
  data/fashion_mnist/context.csv  pixels only (auxiliary context set, KMNIST by default)
  data/fashion_mnist/ood.csv    pixels only (out-of-distribution inputs, MNIST by default)

Needs network access plus pandas (and xlrd/openpyxl for the Excel files).
Usage: scripts/fetch_data.py [--root data] [--subset 5000] [uci] [fashion]
"""

import argparse
import gzip
import io
import pathlib
import struct
import urllib.request

import numpy as np
import pandas as pd

UCI = {
    "wine": (
        "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/winequality-red.csv",
        lambda raw: pd.read_csv(io.BytesIO(raw), sep=";"),
    ),
    "concrete": (
        "https://archive.ics.uci.edu/ml/machine-learning-databases/concrete/compressive/Concrete_Data.xls",
        lambda raw: pd.read_excel(io.BytesIO(raw)),
    ),
    "yacht": (
        "https://archive.ics.uci.edu/ml/machine-learning-databases/00243/yacht_hydrodynamics.data",
        lambda raw: pd.read_csv(io.BytesIO(raw), sep=r"\s+", header=None),
    ),
    # Heating load (Y1) is the target; the cooling load (Y2) is dropped.
    "energy": (
        "https://archive.ics.uci.edu/ml/machine-learning-databases/00242/ENB2012_data.xlsx",
        lambda raw: pd.read_excel(io.BytesIO(raw)).dropna(how="all").iloc[:, :9],
    ),
}

IMAGES = {
    "fashion": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/{}-{}-idx{}-ubyte.gz",
    "kmnist": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/{}-{}-idx{}-ubyte.gz",
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/{}-{}-idx{}-ubyte.gz",
}


def fetch(url):
    print(f"fetching {url}")
    with urllib.request.urlopen(url, timeout=60) as r:
        return r.read()


def idx(raw):
    data = gzip.decompress(raw)
    _, dtype, ndim = struct.unpack(">HBB", data[:4])
    dims = struct.unpack(">" + "I" * ndim, data[4 : 4 + 4 * ndim])
    return np.frombuffer(data[4 + 4 * ndim :], dtype=np.uint8).reshape(dims)


def images(name, split):
    prefix = "train" if split == "train" else "t10k"
    x = idx(fetch(IMAGES[name].format(prefix, "images", 3)))
    y = idx(fetch(IMAGES[name].format(prefix, "labels", 1)))
    return x.reshape(len(x), -1) / 255.0, y


def write(frame, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6g")
    print(f"wrote {path} {frame.shape}")


def uci(root):
    for name, (url, parse) in UCI.items():
        frame = parse(fetch(url))
        frame.columns = [str(c) for c in frame.columns]
        write(frame, root / "uci" / f"{name}.csv")


def fashion(root, subset, seed):
    rng = np.random.default_rng(seed)
    cols = [f"p{i}" for i in range(784)]
    for split, n in [("train", subset), ("test", subset // 5)]:
        x, y = images("fashion", split)
        keep = rng.choice(len(x), size=min(n, len(x)), replace=False)
        frame = pd.DataFrame(x[keep], columns=cols)
        frame.insert(0, "label", y[keep])
        write(frame, root / "fashion_mnist" / f"{split}.csv")
    for name, file in [("kmnist", "context.csv"), ("mnist", "ood.csv")]:
        x, _ = images(name, "test")
        keep = rng.choice(len(x), size=min(subset // 5, len(x)), replace=False)
        write(pd.DataFrame(x[keep], columns=cols), root / "fashion_mnist" / file)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", default="data", type=pathlib.Path)
    ap.add_argument("--subset", default=5000, type=int, help="FashionMNIST training rows")
    ap.add_argument("--seed", default=0, type=int)
    ap.add_argument("what", nargs="*", default=["uci", "fashion"], choices=["uci", "fashion"])
    args = ap.parse_args()
    if "uci" in args.what:
        uci(args.root)
    if "fashion" in args.what:
        fashion(args.root, args.subset, args.seed)


if __name__ == "__main__":
    main()
