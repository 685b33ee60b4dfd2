"""Named, reproducible RNG sub-streams.

All randomness in a run flows from one master seed. Components draw from
named sub-streams so that e.g. dataset generation and weight init can be
re-run independently and still agree bit-for-bit with a full run, and so
per-sample generation can be parallelized without changing results.
"""

import zlib

import numpy as np

# Stream names used across the package (informal registry).
DATA = "data"
INIT = "init"
SHUFFLE = "shuffle"
PROBE_FOLDS = "probe-folds"
KMEANS = "kmeans"


def substream(master_seed: int, name: str, index: int | None = None) -> np.random.Generator:
    """Generator for the (master, name[, index]) sub-stream.

    `index` is used for per-sample streams: sample i of stream "data" is
    identical whether samples are generated serially or in parallel.
    """
    entropy = [int(master_seed), zlib.crc32(name.encode("utf-8"))]
    if index is not None:
        entropy.append(int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
