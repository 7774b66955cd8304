"""Acceptance-length metrics and the speedup proxy computed from decode traces."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from ..engine import CycleRecord, DecodeTrace

DEFAULT_DRAFTER_COST = 0.1
DEFAULT_LONG_THRESHOLD = 8
PROXY_NOTE = "cost-model proxy: emitted / (verifier_calls + drafter_cost * drafter_calls); not wall-clock"


def verifier_calls(cycle: CycleRecord) -> int:
    """One pass per cycle, plus one for every correction that is followed by another verified position.

    A correction invalidates the parallel pass conditioned on the draft, so
    the positions after it need a fresh target forward.
    """
    n = len(cycle.emitted)
    return 1 + sum(1 for r in cycle.resample_positions if r < n)


def drafter_calls(cycle: CycleRecord, kind: str) -> int:
    return 1 if kind == "factorized" else cycle.k


@dataclass
class MetricsReport:
    tau: float
    speedup_proxy: float
    accept_len_hist: dict[int, int]
    max_accepted: int
    long_block_fraction: float
    long_threshold: int = DEFAULT_LONG_THRESHOLD
    drafter_cost: float = DEFAULT_DRAFTER_COST
    n_traces: int = 0
    n_cycles: int = 0
    n_truncated: int = 0
    emitted_tokens: int = 0
    verifier_calls: int = 0
    drafter_calls: int = 0
    k: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "tau": self.tau,
            "speedup_proxy": self.speedup_proxy,
            "speedup_proxy_note": PROXY_NOTE,
            "accept_len_hist": {str(n): c for n, c in sorted(self.accept_len_hist.items())},
            "max_accepted": self.max_accepted,
            "long_block_fraction": self.long_block_fraction,
            "long_threshold": self.long_threshold,
            "drafter_cost": self.drafter_cost,
            "n_traces": self.n_traces,
            "n_cycles": self.n_cycles,
            "n_truncated": self.n_truncated,
            "emitted_tokens": self.emitted_tokens,
            "verifier_calls": self.verifier_calls,
            "drafter_calls": self.drafter_calls,
            "k": list(self.k),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(
            tau=d["tau"],
            speedup_proxy=d["speedup_proxy"],
            accept_len_hist={int(n): int(c) for n, c in d["accept_len_hist"].items()},
            max_accepted=d["max_accepted"],
            long_block_fraction=d["long_block_fraction"],
            long_threshold=d["long_threshold"],
            drafter_cost=d["drafter_cost"],
            n_traces=d["n_traces"],
            n_cycles=d["n_cycles"],
            n_truncated=d["n_truncated"],
            emitted_tokens=d["emitted_tokens"],
            verifier_calls=d["verifier_calls"],
            drafter_calls=d["drafter_calls"],
            k=list(d["k"]),
        )


def tau_from_hist(hist: dict[int, int]) -> float:
    total = sum(hist.values())
    return sum(n * c for n, c in hist.items()) / total


def compute_metrics(
    traces: Sequence[DecodeTrace],
    long_threshold: int = DEFAULT_LONG_THRESHOLD,
    drafter_cost: float = DEFAULT_DRAFTER_COST,
) -> MetricsReport:
    """Aggregate accepted counts over every cycle of every trace.

    Truncated cycles count towards tau, the histogram and the long-block
    share, but not towards ``max_accepted``.
    """
    if not traces:
        raise ValueError("no traces to aggregate")
    hist: Counter = Counter()
    max_acc = 0
    n_trunc = emitted = v_calls = d_calls = 0
    ks = set()
    for tr in traces:
        for c in tr.cycles:
            a = c.accepted
            hist[a] += 1
            ks.add(c.k)
            if c.truncated:
                n_trunc += 1
            else:
                max_acc = max(max_acc, a)
            emitted += len(c.emitted)
            v_calls += verifier_calls(c)
            d_calls += drafter_calls(c, tr.drafter_kind)
    n_cycles = sum(hist.values())
    if n_cycles == 0:
        raise ValueError("traces contain no cycles")
    long_cycles = sum(c for n, c in hist.items() if n >= long_threshold)
    return MetricsReport(
        tau=tau_from_hist(hist),
        speedup_proxy=emitted / (v_calls + drafter_cost * d_calls),
        accept_len_hist=dict(sorted(hist.items())),
        max_accepted=max_acc,
        long_block_fraction=long_cycles / n_cycles,
        long_threshold=long_threshold,
        drafter_cost=drafter_cost,
        n_traces=len(traces),
        n_cycles=n_cycles,
        n_truncated=n_trunc,
        emitted_tokens=emitted,
        verifier_calls=v_calls,
        drafter_calls=d_calls,
        k=sorted(ks),
    )
