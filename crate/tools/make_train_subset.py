#!/usr/bin/env python3
"""Build the class-stratified training subsets shipped in data/.

Reads the official IDX training files (gzipped or raw) and keeps a
seeded random subset of N_PER_CLASS examples per class, preserving the
original row order. Usage:

    python3 tools/make_train_subset.py <images.gz> <labels.gz> <out-images.gz> <out-labels.gz>

The selection uses Python's Mersenne Twister with SEED so the shipped
files can be regenerated bit-for-bit from the official sets.
"""
import gzip
import random
import struct
import sys

SEED = 12345
N_PER_CLASS = 2000


def read_maybe_gz(path):
    raw = open(path, "rb").read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def main(img_path, lab_path, img_out, lab_out):
    img = read_maybe_gz(img_path)
    lab = read_maybe_gz(lab_path)
    n, rows, cols = struct.unpack(">III", img[4:16])
    n_lab, = struct.unpack(">I", lab[4:8])
    assert n == n_lab, "image/label count mismatch"
    labels = lab[8 : 8 + n]
    per_class = {}
    for i, y in enumerate(labels):
        per_class.setdefault(y, []).append(i)
    rng = random.Random(SEED)
    keep = []
    for c in sorted(per_class):
        keep.extend(rng.sample(per_class[c], N_PER_CLASS))
    keep.sort()
    item = rows * cols
    img_body = b"".join(img[16 + i * item : 16 + (i + 1) * item] for i in keep)
    lab_body = bytes(labels[i] for i in keep)
    img_hdr = img[:4] + struct.pack(">III", len(keep), rows, cols)
    lab_hdr = lab[:4] + struct.pack(">I", len(keep))
    for path, payload in ((img_out, img_hdr + img_body), (lab_out, lab_hdr + lab_body)):
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as g:
                g.write(payload)
    print(f"kept {len(keep)} of {n} -> {img_out}, {lab_out}")


if __name__ == "__main__":
    main(*sys.argv[1:5])
