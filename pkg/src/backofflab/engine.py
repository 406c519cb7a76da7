"""Replayable random streams and the two sampling kernels every process uses.

Stream derivation (version ``STREAM_DERIVATION``):

* A stream is named by ``(seed, path)`` where ``path`` is a tuple of string labels.
* Its 128-bit Philox key is the first 16 bytes of
  ``blake2b(version | seed | label_1 / label_2 / ...)``.
* ``stream.at(step, purpose)`` positions a Philox generator with that key at counter
  ``(0, 0, step, h(purpose))``.  Draws advance only the lowest counter word, so
  substreams for distinct ``(step, purpose)`` never overlap.
* ``stream.generator`` is the sequential generator at counter ``(0, 0, 0, 0)``.

Two processes that hold streams with equal ``(seed, path)`` and ask for the same
``(step, purpose)`` see the same draws, whatever order they run in.  That is
what the exact couplings rely on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

STREAM_DERIVATION = "philox-blake2b/1"

_MASK64 = (1 << 64) - 1


def _digest(text: str, size: int) -> bytes:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=size).digest()


def _purpose_word(purpose: str) -> int:
    # Odd, hence nonzero, so no purpose collides with the sequential counter.
    return int.from_bytes(_digest(purpose, 8), "little") | 1


@dataclass(frozen=True)
class RngStream:
    """A named, splittable source of randomness.

    Value-like: equal ``(seed, path)`` means equal draws.  The cached generators
    make an instance stateful, so one instance must not be shared between threads.
    """

    seed: int
    path: tuple[str, ...] = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def key(self) -> np.ndarray:
        if "key" not in self._cache:
            text = f"{STREAM_DERIVATION}|{int(self.seed)}|{'/'.join(self.path)}"
            raw = _digest(text, 16)
            self._cache["key"] = np.array(
                [int.from_bytes(raw[:8], "little"), int.from_bytes(raw[8:], "little")],
                dtype=np.uint64,
            )
        return self._cache["key"]

    @property
    def generator(self) -> np.random.Generator:
        """Sequential generator; successive calls continue one draw sequence."""
        if "seq" not in self._cache:
            self._cache["seq"] = np.random.Generator(np.random.Philox(key=self.key))
        return self._cache["seq"]

    def at(self, step: int, purpose: str = "") -> np.random.Generator:
        """Generator for the substream ``(step, purpose)``.

        The returned generator is reused by the next ``at`` call on this instance,
        so finish drawing from it before asking for another substream.
        """
        if step < 0:
            raise ValueError("step must be nonnegative")
        bitgen = self._cache.get("philox")
        if bitgen is None:
            bitgen = np.random.Philox(key=self.key)
            self._cache["philox"] = bitgen
            self._cache["sub"] = np.random.Generator(bitgen)
            self._cache["state"] = bitgen.state
        state = self._cache["state"]
        state["state"]["counter"] = np.array(
            [0, 0, int(step) & _MASK64, _purpose_word(purpose)], dtype=np.uint64
        )
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        bitgen.state = state
        return self._cache["sub"]

    def split(self, label: str) -> "RngStream":
        return split(self, label)

    def header(self) -> dict:
        return {"seed": int(self.seed), "path": list(self.path), "rng": STREAM_DERIVATION}


def split(stream: RngStream, label: str) -> RngStream:
    """Child stream whose path is ``stream.path + (label,)``."""
    if not label:
        raise ValueError("label must be nonempty")
    return RngStream(stream.seed, stream.path + (str(label),))


Source = Union[RngStream, np.random.Generator]


def _gen(source: Source) -> np.random.Generator:
    return source.generator if isinstance(source, RngStream) else source


def draw_poisson(source: Source, mean):
    """Exact Poisson sample(s); ``mean`` may be an array."""
    if np.any(np.asarray(mean) < 0):
        raise ValueError("Poisson mean must be nonnegative")
    return _gen(source).poisson(mean)


def draw_binomial(source: Source, n, p):
    """Exact binomial sample(s) (numpy's inversion/BTPE, never a normal approximation)."""
    if np.any(np.asarray(n) < 0):
        raise ValueError("binomial n must be nonnegative")
    pa = np.asarray(p)
    if np.any(pa < 0) or np.any(pa > 1):
        raise ValueError("binomial p must lie in [0, 1]")
    return _gen(source).binomial(n, p)
