"""
Named random streams derived from one root seed.

Every component asks for ``child_rng(root_seed, "forge", ...)`` style streams
so it can be re-run on its own and still draw the same numbers.
"""

import zlib

import numpy as np
import torch


def _spawn_key(names) -> tuple[int, ...]:
    return tuple(
        zlib.crc32(str(n).encode("utf-8")) if not isinstance(n, int) else int(n)
        for n in names
    )


def child_seed_sequence(root_seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=_spawn_key(names))


def child_rng(root_seed: int, *names) -> np.random.Generator:
    """Independent numpy generator for the stream ``names`` under ``root_seed``."""
    return np.random.Generator(np.random.PCG64(child_seed_sequence(root_seed, *names)))


def child_seed(root_seed: int, *names) -> int:
    """A 63-bit integer seed for the stream (used for torch generators)."""
    state = child_seed_sequence(root_seed, *names).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def configure_determinism(enabled: bool, seed: int | None = None):
    """Switch torch to deterministic kernels and seed the global RNGs."""
    if seed is not None:
        torch.manual_seed(int(seed))
        np.random.seed(int(seed) % (2**32))
    torch.use_deterministic_algorithms(bool(enabled), warn_only=False)
    if enabled:
        torch.backends.cudnn.benchmark = False
