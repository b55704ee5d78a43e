import hashlib
from collections.abc import Iterable
from typing import Any

import numpy as np
from scipy.special import ndtri

Seed = int | np.random.SeedSequence

_MANTISSA_BITS = 53
_MANTISSA_SCALE = float(2**_MANTISSA_BITS)


def make_rng(seed: Seed) -> np.random.Generator:
    """Philox is counter-based, so a seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(seed))


def substreams(seed: Seed, count: int) -> list[np.random.Generator]:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return [make_rng(child) for child in seed.spawn(count)]


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63, dtype=np.int64))


def open_uniform(rng: np.random.Generator, size: Any) -> np.ndarray:
    # (k + 0.5) / 2**53 never hits 0 or 1, so ndtri stays finite
    k = rng.integers(0, 2**_MANTISSA_BITS, size=size, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) / _MANTISSA_SCALE


def standard_normal(rng: np.random.Generator, size: Any) -> np.ndarray:
    return ndtri(open_uniform(rng, size))


def short_hash(parts: Iterable[str], length: int = 12) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()[:length]


def relative_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-12) -> float:
    """Largest element-wise ``|actual - expected| / max(|expected|, floor)``."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(actual - expected) / np.maximum(np.abs(expected), floor)))


def spawn_seeds(seed: Seed, count: int) -> list[int]:
    """Independent integer seeds, one per trial, fixed by ``seed`` alone."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in seed.spawn(count)]
