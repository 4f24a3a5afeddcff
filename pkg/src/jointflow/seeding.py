"""One master seed fanned out into named, independent random streams."""

import hashlib
import json

import numpy as np

STREAMS = {
    "init": 0,
    "shuffle": 1,
    "noise": 2,
    "classify": 3,
    "generate": 4,
    "autoencoder": 5,
    "data": 6,
}


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, index)])


def torch_seed(seed: int, name: str = "init") -> int:
    return int(substream(seed, name).integers(2**31 - 1))


def rng_fingerprint(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()[:16]
