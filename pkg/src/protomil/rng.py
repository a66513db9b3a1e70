"""Named random sub-streams derived from one integer seed."""
import os
import zlib

import numpy as np

SEED_ENV = "PROTOMIL_SEED"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name`` (data, init, dropout, folds, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))


def resolve_seed(cli_seed=None, config_seed=None, default: int = 1) -> int:
    """CLI flag beats config file beats the environment variable."""
    for s in (cli_seed, config_seed, os.environ.get(SEED_ENV)):
        if s is not None and s != "":
            return int(s)
    return default
