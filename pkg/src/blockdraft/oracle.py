"""Brute-force ground truth for the losslessness claims.

``exact_onestep_output_dist`` composes the law of a single verify step from
the engine's own acceptance and residual formulas, so a mistake in either
shows up as a mismatch with the target. ``exact_joint_law_ar`` enumerates
the target's sequence law directly; ``empirical_sequence_law`` is the
Monte Carlo side that runs the real decoder.
"""

from __future__ import annotations

import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dist, RngStream, SupportError, kl_divergence
from .engine import RESIDUAL_EPS, accept_prob, decode, residual_dist
from .models import DrafterParams, TargetParams

ENUM_BUDGET = 10**6
MC_CHUNK = 50_000

SeqLaw = dict  # continuation tuple -> probability


class OracleBudgetError(ValueError):
    """Exact enumeration would exceed the configured sequence budget."""


def exact_onestep_output_dist(p: Dist, q: Dist) -> Dist:
    """Law of the token emitted by one verify step with draft ``Y ~ q``.

    Accepted mass at ``a`` is ``q(a) * accept_prob(p(a), q(a))``; the
    remaining mass is spread by the residual. When nothing is ever rejected
    the residual is not consulted.
    """
    if len(p) != len(q):
        raise ValueError(f"support size mismatch: {len(p)} vs {len(q)}")
    for a in range(len(p)):
        if p[a] > 0.0 and q[a] <= 0.0:
            raise SupportError(f"q assigns zero mass to outcome {a} where p > 0")
    accepted = np.array([q[a] * accept_prob(p[a], q[a]) if q[a] > 0.0 else 0.0 for a in range(len(q))])
    reject = 1.0 - math.fsum(accepted.tolist())
    if reject <= RESIDUAL_EPS:
        return Dist(accepted)
    return Dist(accepted + reject * residual_dist(p, q).probs)


def exact_joint_law_ar(
    target: TargetParams,
    prompt: Sequence[int],
    max_len: int,
    temperature: float = 1.0,
    budget: int = ENUM_BUDGET,
) -> SeqLaw:
    """Probability of every continuation of ``prompt`` of at most ``max_len`` tokens.

    EOS ends a continuation; a continuation reaching ``max_len`` without EOS
    is its own terminal outcome, matching how the decoder truncates.
    """
    n = target.vocab.n_outcomes
    if n**max_len > budget:
        raise OracleBudgetError(f"{n}^{max_len} continuations exceed budget {budget}")
    eos = target.vocab.eos_id
    law: SeqLaw = {}
    prompt = list(prompt)

    def walk(tail: list[int], prob: float):
        if len(tail) == max_len:
            law[tuple(tail)] = prob
            return
        d = target.dist_at(target.window(prompt + tail), temperature)
        for tok in range(n):
            pt = d[tok]
            if pt == 0.0:
                continue
            if tok == eos:
                law[tuple(tail) + (eos,)] = prob * pt
            else:
                walk(tail + [tok], prob * pt)

    walk([], 1.0)
    return dict(sorted(law.items()))


def _decode_chunk(args) -> Counter:
    target, drafter, prompt, k, max_len, n, seed, chunk, temperature = args
    rng = RngStream(seed, chunk)
    counts: Counter = Counter()
    start = len(prompt)
    for _ in range(n):
        out = decode(target, drafter, prompt, k, max_len, rng=rng, temperature=temperature).output
        counts[out[start:]] += 1
    return counts


def worker_count() -> int:
    cap = os.environ.get("DEER_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def empirical_sequence_law(
    target: TargetParams,
    drafter: DrafterParams | TargetParams,
    prompt: Sequence[int],
    k: int,
    max_len: int,
    n: int,
    seed: int,
    temperature: float = 1.0,
    workers: int | None = None,
) -> SeqLaw:
    """Frequencies of decoded continuations over ``n`` independent runs.

    Runs are split into fixed chunks, chunk ``c`` drawing from stream
    ``(seed, c)``, so the result does not depend on the worker count.
    """
    prompt = tuple(prompt)
    jobs = []
    for c, start in enumerate(range(0, n, MC_CHUNK)):
        jobs.append((target, drafter, prompt, k, max_len, min(MC_CHUNK, n - start), seed, c, temperature))
    workers = worker_count() if workers is None else workers
    total: Counter = Counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            for counts in pool.map(_decode_chunk, jobs):
                total.update(counts)
    else:
        for job in jobs:
            total.update(_decode_chunk(job))
    return {seq: cnt / n for seq, cnt in sorted(total.items())}


empirical_joint_law_deer = empirical_sequence_law


@dataclass
class KLProfile:
    mean: list[float]
    stderr: list[float]
    count: list[int]

    @property
    def k(self) -> int:
        return len(self.mean)


def kl_by_depth(
    target: TargetParams,
    drafter: DrafterParams | TargetParams,
    prompts: Sequence[Sequence[int]],
    k: int,
    n: int,
    seed: int,
    temperature: float = 1.0,
    max_new: int | None = None,
) -> KLProfile:
    """Mean KL(target at the corrected prefix || proposal actually used), per block depth.

    Samples come from ``n`` decode runs (prompts used round-robin) of up to
    ``max_new`` tokens each; every verified position contributes one term.
    A factorized ``DrafterParams`` contributes its prefix-only dist, a
    sequential drafter its dist grown on its own drafts.
    """
    max_new = 4 * k if max_new is None else max_new
    sums = [[] for _ in range(k)]

    def observe(depth: int, p: Dist, q: Dist):
        sums[depth - 1].append(kl_divergence(p, q))

    rng = RngStream(seed, 0)
    for r in range(n):
        decode(target, drafter, prompts[r % len(prompts)], k, max_new, rng=rng,
               temperature=temperature, observer=observe)
    mean, se, cnt = [], [], []
    for vals in sums:
        if not vals:
            mean.append(float("nan"))
            se.append(float("nan"))
            cnt.append(0)
            continue
        arr = np.array(vals)
        mean.append(float(arr.mean()))
        se.append(float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0)
        cnt.append(int(arr.size))
    return KLProfile(mean, se, cnt)
