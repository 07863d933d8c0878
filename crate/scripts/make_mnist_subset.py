"""Write a balanced MNIST subset as 28x28 PGM files plus manifests.

Usage: make_mnist_subset.py MNIST_CSV_GZ OUT_DIR [TRAIN_PER_CLASS] [TEST_PER_CLASS]

The input is the 5000-row CSV shipped with mlxtend (784 pixel columns
followed by the label). Rows are taken in file order.
"""

import csv
import gzip
import os
import sys


def main():
    src, out = sys.argv[1], sys.argv[2]
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 100
    n_test = int(sys.argv[4]) if len(sys.argv) > 4 else 20
    os.makedirs(os.path.join(out, "img"), exist_ok=True)
    counts = [0] * 10
    train, test = [], []
    with gzip.open(src, "rt") as f:
        for row in csv.reader(f):
            pixels, label = [int(float(v)) for v in row[:-1]], int(float(row[-1]))
            k = counts[label]
            if k >= n_train + n_test:
                continue
            counts[label] += 1
            name = f"img/{label}_{k:03d}.pgm"
            with open(os.path.join(out, name), "wb") as g:
                g.write(b"P5\n28 28\n255\n" + bytes(pixels))
            (train if k < n_train else test).append(f"{name},{label}")
    for name, rows in (("train.csv", train), ("test.csv", test)):
        with open(os.path.join(out, name), "w") as g:
            g.write("\n".join(sorted(rows)) + "\n")
    print(f"{len(train)} train, {len(test)} test")


if __name__ == "__main__":
    main()
