"""Every random stream is derived from one master seed plus string/int tags."""
from __future__ import annotations

import contextlib
import zlib

import numpy as np
import torch


def derive_seed(master: int, *tags) -> int:
    words = [int(master) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def generator(master: int, *tags) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, *tags))


@contextlib.contextmanager
def seeded(master: int, *tags):
    """Run a block (e.g. module construction) under a derived global torch seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(master, *tags))
        yield
