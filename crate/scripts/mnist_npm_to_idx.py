#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package (dist/mnist.js) into
gzipped IDX files laid out like the standard MNIST archive.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_npm_to_idx.py package/dist/mnist.js data/mnist-mini

The package ships 10,000 grayscale 28x28 digits grouped by class. They are
shuffled with a fixed seed and split 8,000 train / 2,000 test.
"""
import gzip
import hashlib
import os
import random
import re
import struct
import sys

TRAIN = 8000


def parse(path):
    src = open(path).read()
    blocks = re.findall(r'(\d+):\[function\(require,module,exports\)\{\s*module\.exports=\{ "data": \[([^\]]*)\]', src)
    samples = []
    for module_id, body in blocks:
        digit = int(module_id) - 1
        vals = [float(v) for v in body.split(",")]
        assert len(vals) % 784 == 0
        for i in range(0, len(vals), 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in vals[i:i + 784])
            samples.append((px, digit))
    return samples


def write_idx(out, name, samples):
    img = struct.pack(">IIII", 0x803, len(samples), 28, 28) + b"".join(p for p, _ in samples)
    lab = struct.pack(">II", 0x801, len(samples)) + bytes(d for _, d in samples)
    files = {}
    for suffix, payload in (("images-idx3-ubyte.gz", img), ("labels-idx1-ubyte.gz", lab)):
        fname = f"{name}-{suffix}"
        data = gzip.compress(payload, mtime=0)
        with open(os.path.join(out, fname), "wb") as f:
            f.write(data)
        files[fname] = hashlib.sha256(data).hexdigest()
    return files


def main():
    src, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    samples = parse(src)
    assert len(samples) == 10000, len(samples)
    random.Random(20181).shuffle(samples)
    sums = {}
    sums.update(write_idx(out, "train", samples[:TRAIN]))
    sums.update(write_idx(out, "t10k", samples[TRAIN:]))
    with open(os.path.join(out, "SHA256SUMS"), "w") as f:
        for name in sorted(sums):
            f.write(f"{sums[name]}  {name}\n")


if __name__ == "__main__":
    main()
