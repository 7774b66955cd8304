"""Vocabulary, distributions, and the seeded randomness used by every module."""

from __future__ import annotations

import bisect
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-9


class DistError(ValueError):
    """A probability vector violates the distribution invariants."""


class SupportError(ValueError):
    """A proposal assigns zero probability where the target is positive."""


@dataclass(frozen=True)
class Vocab:
    """Ordinary tokens ``0..size-1`` followed by the reserved ids.

    EOS takes the extra distribution slot at index ``size``. MASK and SEP
    only ever appear in training inputs and PAD only in context windows.
    """

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")

    @property
    def eos_id(self) -> int:
        return self.size

    @property
    def mask_id(self) -> int:
        return self.size + 1

    @property
    def sep_id(self) -> int:
        return self.size + 2

    @property
    def pad_id(self) -> int:
        return self.size + 3

    @property
    def n_outcomes(self) -> int:
        """Length of every Dist: ordinary tokens plus EOS."""
        return self.size + 1


def check_token_seq(tokens: Sequence[int], vocab: Vocab, allow_special: bool = False) -> tuple[int, ...]:
    """Validate a token sequence and return it as a tuple.

    EOS may appear at most once and only as the last element. MASK and SEP
    are rejected unless ``allow_special`` is set (training inputs).
    """
    seq = tuple(int(t) for t in tokens)
    specials = {vocab.mask_id, vocab.sep_id}
    for pos, tok in enumerate(seq):
        if tok < 0:
            raise ValueError(f"negative token id {tok} at position {pos}")
        if tok == vocab.eos_id:
            if pos != len(seq) - 1:
                raise ValueError(f"EOS at position {pos} is not the final token")
        elif tok in specials:
            if not allow_special:
                raise ValueError(f"special token {tok} at position {pos}")
        elif tok >= vocab.size:
            raise ValueError(f"token id {tok} outside vocabulary of size {vocab.size}")
    return seq


class Dist:
    """An immutable probability vector over ``n_outcomes`` symbols.

    Instances hash by identity so they can key caches (e.g. residuals);
    compare contents with ``np.allclose(a.probs, b.probs)``.
    """

    __slots__ = ("probs", "_plist", "_cdf")

    def __init__(self, probs, *, validate: bool = True):
        arr = np.array(probs, dtype=np.float64)
        if validate:
            if arr.ndim != 1 or arr.size == 0:
                raise DistError(f"expected a non-empty 1-d vector, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DistError("non-finite probability")
            if arr.min() < 0.0:
                raise DistError(f"negative probability {arr.min()!r}")
            total = float(arr.sum())
            if abs(total - 1.0) > NORM_TOL:
                raise DistError(f"probabilities sum to {total!r}, not 1")
        arr.setflags(write=False)
        self.probs = arr
        self._plist = arr.tolist()
        self._cdf = None

    def __len__(self) -> int:
        return len(self._plist)

    def __getitem__(self, i: int) -> float:
        return self._plist[i]

    def __repr__(self) -> str:
        return f"Dist({np.array2string(self.probs, precision=4)})"

    @property
    def cdf(self) -> list[float]:
        if self._cdf is None:
            acc = 0.0
            out = []
            for x in self._plist:
                acc += x
                out.append(acc)
            self._cdf = out
        return self._cdf

    @property
    def last_support(self) -> int:
        for i in range(len(self._plist) - 1, -1, -1):
            if self._plist[i] > 0.0:
                return i
        raise DistError("empty support")

    @classmethod
    def one_hot(cls, n: int, index: int) -> Dist:
        v = np.zeros(n)
        v[index] = 1.0
        return cls(v)

    @classmethod
    def uniform(cls, n: int) -> Dist:
        return cls(np.full(n, 1.0 / n))


def softmax(logits, temperature: float = 1.0) -> Dist:
    """Tempered softmax. ``temperature == 0`` gives the argmax one-hot (lowest index on ties)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DistError("non-finite logits")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return Dist.one_hot(z.size, int(np.argmax(z)))
    z = z / temperature
    e = np.exp(z - z.max())
    return Dist(e / e.sum())


class RngStream:
    """Deterministic uniform stream keyed by ``(seed, stream_id)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence``, which is
    platform-stable. Scalar draws come from a buffer, so scalar and batched
    draws consume one and the same underlying sequence.
    """

    _BLOCK = 4096

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream_id & (2**64 - 1),))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self._buf: list[float] = []
        self._pos = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, size: int | None = None):
        """One float in [0, 1), or an array of ``size`` floats."""
        if size is None:
            if self._pos >= len(self._buf):
                self._buf = self._gen.random(self._BLOCK).tolist()
                self._pos = 0
            u = self._buf[self._pos]
            self._pos += 1
            return u
        rest = np.asarray(self._buf[self._pos:], dtype=np.float64)
        self._buf, self._pos = [], 0
        if rest.size >= size:
            self._buf = rest[size:].tolist()
            return rest[:size]
        return np.concatenate([rest, self._gen.random(size - rest.size)])


def sample_categorical(d: Dist, rng: RngStream, size: int | None = None):
    """Inverse-CDF draw over ascending index order.

    Returns the smallest ``i`` with ``u < cdf[i]``. Rounding slack at the top
    of the CDF maps to the last index with positive mass.
    """
    if not isinstance(d, Dist):
        d = Dist(d)
    cdf = d.cdf
    last = d.last_support
    if size is None:
        i = bisect.bisect_right(cdf, rng.uniform())
        return i if i <= last else last
    idx = np.searchsorted(np.asarray(cdf), rng.uniform(size), side="right")
    return np.minimum(idx, last)


def _as_vector(x) -> np.ndarray:
    if isinstance(x, Dist):
        return x.probs
    return np.asarray(x, dtype=np.float64)


def tv_distance(a, b) -> float:
    """Total variation ``0.5 * sum |a - b|``.

    Accepts two vectors (Dist or array-like) of equal length, or two
    mappings from outcome to probability; mappings are compared over the
    union of their keys with missing outcomes read as zero mass.
    """
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        if not (isinstance(a, Mapping) and isinstance(b, Mapping)):
            raise TypeError("tv_distance needs two vectors or two mappings")
        keys = set(a) | set(b)
        return 0.5 * math.fsum(abs(a.get(x, 0.0) - b.get(x, 0.0)) for x in keys)
    va, vb = _as_vector(a), _as_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"support size mismatch: {va.shape} vs {vb.shape}")
    return 0.5 * math.fsum(np.abs(va - vb).tolist())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with ``0 log 0 = 0``; raises SupportError if q misses p's support."""
    vp, vq = _as_vector(p), _as_vector(q)
    if vp.shape != vq.shape:
        raise ValueError(f"support size mismatch: {vp.shape} vs {vq.shape}")
    pos = vp > 0
    if np.any(vq[pos] <= 0):
        bad = int(np.flatnonzero(pos & (vq <= 0))[0])
        raise SupportError(f"q assigns zero mass to outcome {bad} where p > 0")
    terms = vp[pos] * (np.log(vp[pos]) - np.log(vq[pos]))
    return max(0.0, math.fsum(terms.tolist()))
