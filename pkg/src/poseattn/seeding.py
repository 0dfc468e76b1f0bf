"""Named random sub-streams derived from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent numpy generator for ``(seed, name)``; stable across runs and platforms."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0]))
    return g


def seed_torch(seed: int, name: str = "torch") -> None:
    torch.manual_seed(int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0]))
