"""Regenerates the committed CIFAR-layout byte fixtures.

Each fixture holds two records whose pixel bytes follow the deterministic
pattern byte[k] = (37*k + 11) % 256 over the whole file, with the label
bytes patched afterwards: cifar10 fine labels 3 and 7; cifar100 records get
coarse labels 1 and 19 plus fine labels 42 and 99.
"""

import os

import numpy as np


def main() -> None:
    here = os.path.dirname(os.path.abspath(__file__))

    rec10 = (37 * np.arange(2 * 3073) + 11) % 256
    rec10 = rec10.astype(np.uint8).reshape(2, 3073)
    rec10[:, 0] = [3, 7]
    rec10.tofile(os.path.join(here, "cifar10_fixture.bin"))

    rec100 = (37 * np.arange(2 * 3074) + 11) % 256
    rec100 = rec100.astype(np.uint8).reshape(2, 3074)
    rec100[:, 0] = [1, 19]
    rec100[:, 1] = [42, 99]
    rec100.tofile(os.path.join(here, "cifar100_fixture.bin"))
    print("fixtures written")


if __name__ == "__main__":
    main()
