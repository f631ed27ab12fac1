"""Named random substreams derived from one master seed.

Each consumer (data generation, SimNet init, batch order, ...) gets its own
generator keyed by name, so switching a module on or off never shifts the
random draws seen by another module.
"""

import zlib

import numpy as np

STREAMS = (
    "data",
    "noise",
    "simnet-init",
    "simnet-batches",
    "disc-init",
    "disc-batches",
    "pretrain",
    "classifier-init",
    "classifier-batches",
    "eval",
)


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
