"""Counter-addressed random streams.

Every source of randomness in a simulation is addressed by a master seed
plus a path of labels (round, client, iteration, ...).  A stream is an
immutable descriptor: drawing from it never mutates shared state, so the
same address always yields the same values no matter which thread asks,
or in which order clients happen to be scheduled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Label = int | str


def _encode_label(label: Label) -> bytes:
    if isinstance(label, bool):
        raise TypeError("stream labels must be int or str, not bool")
    if isinstance(label, int):
        return b"i" + label.to_bytes(16, "little", signed=True)
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "little") + raw
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


@dataclass(frozen=True)
class RandomStream:
    """Immutable handle on a deterministic stream of random numbers.

    The underlying bit generator is Philox keyed by SHA-256 of
    (master_seed, path), so streams at distinct addresses are
    statistically independent and a stream's output is a pure function
    of its address.
    """

    master_seed: int
    path: tuple[Label, ...] = ()

    def child(self, *labels: Label) -> "RandomStream":
        """Derive the sub-stream addressed by appending the given labels."""
        if not labels:
            raise ValueError("child() requires at least one label")
        for label in labels:
            _encode_label(label)  # validate eagerly
        return RandomStream(self.master_seed, self.path + tuple(labels))

    def _key(self) -> int:
        h = hashlib.sha256()
        h.update(_encode_label(self.master_seed))
        for label in self.path:
            h.update(_encode_label(label))
        return int.from_bytes(h.digest()[:16], "little")  # Philox keys are 128-bit

    def generator(self) -> np.random.Generator:
        """A fresh generator for this address.

        Repeated calls return generators that replay the identical
        sequence; callers wanting distinct values must derive distinct
        children.
        """
        return np.random.Generator(np.random.Philox(key=self._key()))

    def normal(self, shape: tuple[int, ...] | int = (), std: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, std, size=shape)

    def uniform(self, shape: tuple[int, ...] | int = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
