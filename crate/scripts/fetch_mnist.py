#!/usr/bin/env python3
"""Fetch MNIST into IDX files under data/mnist.

Tries the usual IDX mirrors first. When none is reachable, falls back to the
`mnist` npm package (about 10k real digits stored as JSON floats), converts
them to bytes, shuffles with a fixed seed and writes a 9000/1000 train/test
split in the same IDX layout.
"""

import argparse
import gzip
import json
import os
import random
import shutil
import struct
import subprocess
import sys
import tarfile
import tempfile
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FILES = {
    "train-images-idx3-ubyte": "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte": "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte": "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte": "t10k-labels-idx1-ubyte.gz",
}


def from_mirrors(out):
    for base in MIRRORS:
        try:
            for name, gz in FILES.items():
                with urllib.request.urlopen(base + gz, timeout=20) as r:
                    data = gzip.decompress(r.read())
                with open(os.path.join(out, name), "wb") as f:
                    f.write(data)
            return True
        except Exception as e:  # noqa: BLE001
            print(f"mirror {base} failed: {e}", file=sys.stderr)
    return False


def write_idx(path, dims, payload):
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 8, len(dims)]))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def npm_digits(package_dir):
    digits_dir = os.path.join(package_dir, "src", "digits")
    examples = []
    for label in range(10):
        with open(os.path.join(digits_dir, f"{label}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            examples.append((pixels, label))
    return examples


def locate_npm_package():
    for candidate in ["/tmp/npmm/package"]:
        if os.path.isdir(os.path.join(candidate, "src", "digits")):
            return candidate, None
    tmp = tempfile.mkdtemp()
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
    tarball = next(p for p in os.listdir(tmp) if p.endswith(".tgz"))
    with tarfile.open(os.path.join(tmp, tarball)) as t:
        t.extractall(tmp)
    return os.path.join(tmp, "package"), tmp


def from_npm(out, test_count, seed):
    package, tmp = locate_npm_package()
    try:
        examples = npm_digits(package)
    finally:
        if tmp:
            shutil.rmtree(tmp)
    random.Random(seed).shuffle(examples)
    splits = {"t10k": examples[:test_count], "train": examples[test_count:]}
    for prefix, rows in splits.items():
        write_idx(os.path.join(out, f"{prefix}-images-idx3-ubyte"), [len(rows), 28, 28], b"".join(p for p, _ in rows))
        write_idx(os.path.join(out, f"{prefix}-labels-idx1-ubyte"), [len(rows)], bytes(l for _, l in rows))
    print(f"wrote {len(splits['train'])} train / {len(splits['t10k'])} test digits from the npm package")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--offline", action="store_true", help="skip the IDX mirrors")
    ap.add_argument("--test-count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if not args.offline and from_mirrors(args.out):
        print(f"downloaded MNIST into {args.out}")
        return
    from_npm(args.out, args.test_count, args.seed)


if __name__ == "__main__":
    main()
