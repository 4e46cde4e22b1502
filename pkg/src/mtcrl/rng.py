"""Named, independent random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "env", "policy", "replay", "wrappers", "encoder", "eval")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for ``name`` under ``seed``; independent of every other name."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


class RunStreams:
    """Lazily created streams for one run, so call order across subsystems never matters."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = stream(self.seed, name)
        return self._gens[name]

    def get_state(self) -> dict:
        return {k: g.bit_generator.state for k, g in self._gens.items()}

    def set_state(self, state: dict) -> None:
        for k, st in state.items():
            self[k].bit_generator.state = st
