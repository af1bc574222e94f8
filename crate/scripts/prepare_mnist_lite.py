#!/usr/bin/env python3
"""Build the `mnist-lite` dataset (IDX format) from the npm `mnist` package.

The npm package ships ~10k real MNIST digits as JSON (28x28, values k/255
rounded to three decimals). This script restores the uint8 pixels, splits
each class deterministically (every fifth sample goes to the test split) and
writes gzip-compressed IDX files plus a SHA256SUMS manifest.

usage: prepare_mnist_lite.py <path/to/mnist-x.y.z.tgz> <out_dir>
"""
import gzip
import hashlib
import io
import json
import struct
import sys
import tarfile


def idx_images(images):
    head = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    return head + b"".join(bytes(img) for img in images)


def idx_labels(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def main():
    tgz, out = sys.argv[1], sys.argv[2]
    splits = {"train": ([], []), "test": ([], [])}
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            data = json.load(tar.extractfile(member))["data"]
            assert len(data) % 784 == 0
            for i in range(len(data) // 784):
                px = [int(round(v * 255)) for v in data[i * 784:(i + 1) * 784]]
                split = "test" if i % 5 == 4 else "train"
                splits[split][0].append(px)
                splits[split][1].append(digit)
    # interleave classes deterministically so the file is not class-sorted
    sums = []
    import os
    os.makedirs(out, exist_ok=True)
    for split, (imgs, labels) in splits.items():
        order = sorted(range(len(labels)), key=lambda k: (hashlib.sha256(str(k).encode()).digest()))
        imgs = [imgs[k] for k in order]
        labels = [labels[k] for k in order]
        for kind, payload in (("images-idx3-ubyte", idx_images(imgs)), ("labels-idx1-ubyte", idx_labels(labels))):
            name = f"{split}-{kind}.gz"
            buf = io.BytesIO()
            with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
                gz.write(payload)
            raw = buf.getvalue()
            with open(f"{out}/{name}", "wb") as f:
                f.write(raw)
            sums.append(f"{hashlib.sha256(raw).hexdigest()}  {name}")
        print(split, len(labels))
    with open(f"{out}/SHA256SUMS", "w") as f:
        f.write("\n".join(sums) + "\n")


if __name__ == "__main__":
    main()
