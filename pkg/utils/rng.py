"""
Seed fan-out: one master seed, independent named random streams
"""
import zlib
from contextlib import contextmanager
from typing import Dict, Iterator

import numpy as np
import torch


class SeedStreams:
    """Derive independent, reproducible random streams from a master seed

    Each stream is keyed by name, so adding a new consumer never shifts the
    numbers another consumer sees.
    """

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("Master seed must be non-negative")
        self.master_seed = int(master_seed)

    def _sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.master_seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))

    def seed(self, name: str) -> int:
        """63-bit integer seed for `name` (torch, sklearn, ...)"""
        return int(self._sequence(name).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._sequence(name)))

    @contextmanager
    def torch_global(self, name: str) -> Iterator[None]:
        """Run a block (e.g. module construction) under a seeded global torch RNG

        The surrounding global RNG state is restored afterwards.
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed(name))
            yield


def generator_state(generator: np.random.Generator) -> Dict:
    """JSON-friendly snapshot of a numpy Generator"""
    return generator.bit_generator.state


def restore_generator(state: Dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def configure_torch(num_threads: int = 1):
    """Fixed thread count and deterministic kernels for reproducible CPU runs"""
    torch.set_num_threads(max(1, int(num_threads)))
    torch.use_deterministic_algorithms(True)
