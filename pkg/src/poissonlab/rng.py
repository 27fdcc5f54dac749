"""Counter-based, keyed random streams.

Every random quantity in the package is drawn from a generator that is a pure
function of a :class:`StreamKey`.  Keys are hashed into a 128-bit Philox key,
so two tasks never share state and results do not depend on how tasks are
scheduled across workers.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

#: Replicates are generated in blocks of this size; block ``b`` owns stream
#: ``replicate=b``.  Changing it changes every downstream number.
BLOCK_SIZE = 4096


@dataclass(frozen=True)
class StreamKey:
    seed: int
    purpose: str = ""
    replicate: int = 0
    cell: int = 0

    def philox_key(self) -> int:
        payload = f"{int(self.seed)}\x1f{self.purpose}\x1f{int(self.replicate)}\x1f{int(self.cell)}"
        digest = hashlib.blake2b(payload.encode("utf-8"), digest_size=16).digest()
        return int.from_bytes(digest, "little")


def stream(key: StreamKey) -> np.random.Generator:
    """Return the generator owned by ``key`` (same key, same variates)."""
    return np.random.Generator(np.random.Philox(key=key.philox_key()))


@dataclass(frozen=True)
class RandomStreams:
    """A seed plus a purpose tag; hands out keyed generators.

    ``child`` extends the purpose tag so that sub-computations get disjoint
    key spaces without any sequential splitting.
    """

    seed: int
    purpose: str = "root"

    def child(self, tag: str | int) -> "RandomStreams":
        return RandomStreams(self.seed, f"{self.purpose}/{tag}")

    def key(self, replicate: int = 0, cell: int = 0) -> StreamKey:
        return StreamKey(self.seed, self.purpose, replicate, cell)

    def generator(self, replicate: int = 0, cell: int = 0) -> np.random.Generator:
        return stream(self.key(replicate, cell))


def as_streams(rng: RandomStreams | int) -> RandomStreams:
    if isinstance(rng, RandomStreams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RandomStreams(int(rng))
    raise TypeError(f"expected RandomStreams or int seed, got {type(rng).__name__}")


def block_sizes(n: int, block: int = BLOCK_SIZE) -> list[int]:
    """Split ``n`` replicates into fixed-size blocks (last one possibly short)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    full, rest = divmod(n, block)
    return [block] * full + ([rest] if rest else [])


def parallel_map(fn: Callable[[T], object], items: Sequence[T] | Iterable[T], workers: int = 1) -> list:
    """Ordered map; the result list never depends on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def map_blocks(fn: Callable[[int, int, np.random.Generator], T], n: int, streams: RandomStreams,
               workers: int = 1, block: int = BLOCK_SIZE) -> list[T]:
    """Call ``fn(block_index, block_size, generator)`` for every replicate block."""
    sizes = block_sizes(n, block)

    def task(i: int) -> T:
        return fn(i, sizes[i], streams.generator(replicate=i))

    return parallel_map(task, range(len(sizes)), workers)
