"""Block-draft speculative decoding with token-wise rejection sampling.

Each cycle drafts a block of ``k`` tokens from the verified prefix, then walks
the block left to right. Position ``i`` is accepted with probability
``min(1, p(y)/q(y))`` where ``p`` is the target conditional on the corrected
prefix so far and ``q`` is the proposal dist recorded for that position. A
rejected position is replaced by a draw from the normalized residual
``max(0, p - q)`` and the walk continues with the next draft token; a cycle
only stops early on EOS or when ``max_new`` is reached.

Continuing after a rejection is exact whenever the proposal at position ``i``
is independent of what was emitted at earlier positions given the draft
history, which holds for the factorized drafter (dists depend on the prefix
only) and for the sequential drafter verified against the conditional it
actually sampled from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .core import Dist, RngStream, SupportError, sample_categorical
from .models import (
    DrafterParams,
    TargetParams,
    draft_block_factorized,
    draft_block_sequential,
    target_next_dist,
)

# 1 - gamma below this means the residual branch has (numerically) zero probability.
RESIDUAL_EPS = 1e-15


class DegenerateResidualError(RuntimeError):
    """The residual was requested although p == q, so rejection cannot happen."""


def accept_prob(p_tok, q_tok):
    """``min(1, p_tok / q_tok)``; works elementwise on arrays."""
    if np.ndim(q_tok) == 0:
        if q_tok <= 0.0:
            raise SupportError(f"draft token has proposal probability {q_tok!r}")
        r = p_tok / q_tok
        return 1.0 if r >= 1.0 else r
    q_arr = np.asarray(q_tok, dtype=np.float64)
    if np.any(q_arr <= 0.0):
        raise SupportError("draft token with zero proposal probability")
    return np.minimum(1.0, np.asarray(p_tok, dtype=np.float64) / q_arr)


def residual_dist(p: Dist, q: Dist) -> Dist:
    """Normalized positive part of ``p - min(p, q)``; mass only where ``p > q``."""
    pv, qv = p.probs, q.probs
    if pv.shape != qv.shape:
        raise ValueError(f"support size mismatch: {pv.shape} vs {qv.shape}")
    excess = np.maximum(pv - qv, 0.0)
    gap = float(excess.sum())
    if gap <= RESIDUAL_EPS:
        raise DegenerateResidualError("p equals q: the rejection branch is never taken")
    return Dist(excess / gap)


_residual_cached = lru_cache(maxsize=1 << 16)(residual_dist)


def verify_position(p: Dist, q: Dist, draft_token, rng: RngStream):
    """Accept ``draft_token`` with ``accept_prob`` or replace it from the residual.

    Returns ``(token, accepted)``. Passing an integer array of draft tokens
    runs that many independent trials and returns two arrays.
    """
    if np.ndim(draft_token) == 0:
        tok = int(draft_token)
        if rng.uniform() < accept_prob(p[tok], q[tok]):
            return tok, True
        return int(sample_categorical(_residual_cached(p, q), rng)), False

    toks = np.asarray(draft_token, dtype=np.int64)
    alpha = accept_prob(p.probs[toks], q.probs[toks])
    accepted = rng.uniform(toks.size) < alpha
    out = toks.copy()
    rejected = ~accepted
    n_rej = int(rejected.sum())
    if n_rej:
        out[rejected] = sample_categorical(residual_dist(p, q), rng, size=n_rej)
    return out, accepted


@dataclass
class CycleRecord:
    prefix_len_before: int
    k: int
    accepted_flags: list[bool]
    resample_positions: list[int]  # 1-based offsets within the block
    emitted: tuple[int, ...]
    ended_with_eos: bool = False
    truncated: bool = False

    @property
    def accepted(self) -> int:
        return sum(self.accepted_flags[: len(self.emitted)])

    def to_dict(self) -> dict:
        return {
            "prefix_len_before": self.prefix_len_before,
            "k": self.k,
            "accepted_flags": list(self.accepted_flags),
            "resample_positions": list(self.resample_positions),
            "emitted": list(self.emitted),
            "ended_with_eos": self.ended_with_eos,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CycleRecord:
        return cls(
            prefix_len_before=int(d["prefix_len_before"]),
            k=int(d["k"]),
            accepted_flags=[bool(x) for x in d["accepted_flags"]],
            resample_positions=[int(x) for x in d["resample_positions"]],
            emitted=tuple(int(x) for x in d["emitted"]),
            ended_with_eos=bool(d["ended_with_eos"]),
            truncated=bool(d.get("truncated", False)),
        )


@dataclass
class DecodeTrace:
    prompt: tuple[int, ...]
    cycles: list[CycleRecord] = field(default_factory=list)
    output: tuple[int, ...] = ()
    seed: int = 0
    stream_id: int = 0
    k: int = 1
    temperature: float = 1.0
    drafter_kind: str = "factorized"

    @property
    def new_tokens(self) -> tuple[int, ...]:
        return self.output[len(self.prompt):]


Observer = Callable[[int, Dist, Dist], None]


def decode(
    target: TargetParams,
    drafter: DrafterParams | TargetParams,
    prompt: Sequence[int],
    k: int,
    max_new: int,
    seed: int = 0,
    *,
    temperature: float = 1.0,
    stream_id: int = 0,
    rng: RngStream | None = None,
    sample_order: Sequence[int] | None = None,
    observer: Observer | None = None,
) -> DecodeTrace:
    """Run draft-then-verify cycles until EOS or ``max_new`` new tokens.

    A ``DrafterParams`` drafter proposes factorized blocks; a
    ``TargetParams``-shaped drafter runs the sequential baseline. ``observer``
    is called as ``observer(depth, p, q)`` at every verified position.
    """
    if k < 1:
        raise ValueError(f"block size must be >= 1, got {k}")
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    if target.vocab != drafter.vocab:
        raise ValueError("target and drafter vocabularies differ")
    factorized = isinstance(drafter, DrafterParams)
    if factorized and k > drafter.max_offset:
        raise ValueError(f"block size {k} exceeds drafter max_offset {drafter.max_offset}")
    prompt = tuple(int(t) for t in prompt)
    eos = target.vocab.eos_id
    if eos in prompt:
        raise ValueError("prompt must not contain EOS")
    if rng is None:
        rng = RngStream(seed, stream_id)

    prefix = list(prompt)
    trace = DecodeTrace(
        prompt=prompt,
        seed=rng.seed,
        stream_id=rng.stream_id,
        k=k,
        temperature=temperature,
        drafter_kind="factorized" if factorized else "sequential",
    )
    n_new = 0
    done = False
    while not done:
        j = len(prefix)
        if factorized:
            block = draft_block_factorized(drafter, prefix, k, rng, temperature, sample_order)
        else:
            block = draft_block_sequential(drafter, prefix, k, rng, temperature)
        flags = [False] * k
        resampled = []
        ended = truncated = False
        for i in range(k):
            if n_new == max_new:
                truncated = True
                break
            p = target_next_dist(target, prefix, temperature)
            q = block.dists[i]
            if observer is not None:
                observer(i + 1, p, q)
            tok, ok = verify_position(p, q, block.tokens[i], rng)
            prefix.append(tok)
            n_new += 1
            flags[i] = ok
            if not ok:
                resampled.append(i + 1)
            if tok == eos:
                ended = True
                break
        trace.cycles.append(CycleRecord(j, k, flags, resampled, tuple(prefix[j:]), ended, truncated))
        done = ended or n_new == max_new
    trace.output = tuple(prefix)
    return trace


def decode_baseline_ar(
    target: TargetParams,
    prompt: Sequence[int],
    max_new: int,
    seed: int = 0,
    *,
    temperature: float = 1.0,
    stream_id: int = 0,
    rng: RngStream | None = None,
) -> tuple[int, ...]:
    """Plain ancestral sampling from the target; stops after EOS or ``max_new`` tokens."""
    if rng is None:
        rng = RngStream(seed, stream_id)
    eos = target.vocab.eos_id
    prefix = [int(t) for t in prompt]
    for _ in range(max_new):
        tok = sample_categorical(target_next_dist(target, prefix, temperature), rng)
        prefix.append(tok)
        if tok == eos:
            break
    return tuple(prefix)
