#!/usr/bin/env python3
"""Download MNIST, Fashion-MNIST or CIFAR into a data directory.

Training never touches the network; run this once, then point ``ASGE_DATA_DIR``
(or ``--data-dir``) at the directory. Files land under the names the example
configs in docs/config-format.md expect.
"""

from __future__ import annotations

import argparse
import gzip
import logging
import shutil
import sys
import tarfile
import urllib.request
from pathlib import Path

logger = logging.getLogger("asge.fetch")

IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

SOURCES = {
    "mnist": ("https://ossci-datasets.s3.amazonaws.com/mnist/", IDX_NAMES),
    "fashion_mnist": ("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/", IDX_NAMES),
    "cifar10": ("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz", None),
    "cifar100": ("https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz", None),
}


def _download(url: str, dest: Path) -> None:
    logger.info("fetching %s", url)
    tmp = dest.with_name(dest.name + ".part")
    with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as fh:
        shutil.copyfileobj(resp, fh)
    tmp.replace(dest)


def fetch_idx(name: str, out: Path) -> None:
    base, names = SOURCES[name]
    for stem in names:
        target = out / stem
        if target.exists():
            logger.info("%s already present", target)
            continue
        archive = out / f"{stem}.gz"
        _download(base + archive.name, archive)
        with gzip.open(archive, "rb") as src, open(target, "wb") as dst:
            shutil.copyfileobj(src, dst)
        archive.unlink()


def fetch_cifar(name: str, out: Path) -> None:
    url, _ = SOURCES[name]
    archive = out / url.rsplit("/", 1)[1]
    if not archive.exists():
        _download(url, archive)
    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            if member.isfile() and member.name.endswith(".bin"):
                member.name = Path(member.name).name
                tar.extract(member, out)
                logger.info("extracted %s", out / member.name)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="fetch_datasets", description="Download datasets for asge.")
    parser.add_argument("dataset", choices=sorted(SOURCES))
    parser.add_argument("out", type=Path, help="Destination directory")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if ns.quiet else logging.INFO, format="asge: %(levelname)s %(name)s: %(message)s")
    ns.out.mkdir(parents=True, exist_ok=True)
    try:
        if SOURCES[ns.dataset][1] is not None:
            fetch_idx(ns.dataset, ns.out)
        else:
            fetch_cifar(ns.dataset, ns.out)
    except OSError as exc:
        sys.stderr.write(f"asge: io-error: {exc}\n")
        raise SystemExit(1) from None


if __name__ == "__main__":
    main()
