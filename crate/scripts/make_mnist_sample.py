"""Build the 10k-digit MNIST sample used by the desk-scale tests.

Source: the `mnist` npm package (cazala/mnist, MIT), which ships 10,000
real MNIST digits as gray values in [0, 1] rounded to 3 decimals.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_sample.py package/src/digits crates/cli/tests/data

Writes gzipped IDX image files (magic 0x00000803): an 8,000-image train
split and a 2,000-image test split, shuffled with a fixed seed.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np

src, out = sys.argv[1], sys.argv[2]
images = []
for d in range(10):
    flat = json.load(open(os.path.join(src, f"{d}.json")))["data"]
    images.append(np.asarray(flat, dtype=np.float64).reshape(-1, 784))
images = np.concatenate(images)
pixels = np.rint(images * 255.0).clip(0, 255).astype(np.uint8)
perm = np.random.RandomState(2019).permutation(len(pixels))
pixels = pixels[perm]


def write_idx(path, arr):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(arr), 28, 28))
        f.write(arr.tobytes())


write_idx(os.path.join(out, "mnist-sample-train-images-idx3-ubyte.gz"), pixels[:8000])
write_idx(os.path.join(out, "mnist-sample-test-images-idx3-ubyte.gz"), pixels[8000:])
print(len(pixels))
