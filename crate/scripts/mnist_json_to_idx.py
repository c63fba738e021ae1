"""Convert the digit JSON files shipped in the npm `mnist` package (MIT,
https://github.com/cazala/mnist) into gzipped IDX files.

Usage: python3 mnist_json_to_idx.py <package>/src/digits <out-dir>

Pixels are stored in the JSON as floats in [0, 1] with three decimals; they
are rounded back to bytes. The 10,000 digits are shuffled with a fixed seed
and split into 8,000 train and 2,000 test images.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for k in range(len(data) // 784):
            pixels = bytes(round(v * 255) for v in data[k * 784:(k + 1) * 784])
            samples.append((pixels, digit))
    random.Random(20221123).shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:8000]), ("test", samples[8000:])):
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for pixels, _ in part:
                f.write(pixels)
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
