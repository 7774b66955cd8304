from __future__ import annotations

import numpy as np
import pytest

from blockdraft import Dist, Vocab
from blockdraft.models import DrafterParams, TargetParams

_CRITERIA: list[str] = []


def random_dist(g: np.random.Generator, n: int, zeros: bool = False) -> Dist:
    """Dirichlet draw; with ``zeros`` some entries are knocked out before renormalizing."""
    v = g.dirichlet(np.ones(n))
    if zeros:
        keep = g.random(n) < 0.6
        keep[g.integers(n)] = True
        v = np.where(keep, v, 0.0)
    return Dist(v / v.sum())


def random_pair(g: np.random.Generator, n: int) -> tuple[Dist, Dist]:
    """(p, q) with q of full support and p possibly sparse."""
    return random_dist(g, n, zeros=bool(g.integers(2))), random_dist(g, n)


def unigram_target(vocab: Vocab, logits, order: int = 1) -> TargetParams:
    return TargetParams(vocab, order, {}, np.asarray(logits, dtype=float))


def unigram_drafter(vocab: Vocab, logits, max_offset: int, order: int = 1) -> DrafterParams:
    return DrafterParams(vocab, order, max_offset, {}, np.asarray(logits, dtype=float))


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""

    def check(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


def materialize(drafter: DrafterParams, keys) -> DrafterParams:
    """Copy of ``drafter`` with every key in ``keys`` stored explicitly."""
    table = {k: np.array(v) for k, v in drafter.table.items()}
    for key in keys:
        table.setdefault(key, np.array(drafter.row(*key)))
    return DrafterParams(drafter.vocab, drafter.order, drafter.max_offset, table, drafter.default_logits)


def gradient_rel_error(drafter: DrafterParams, ex, loss_fn, grad_fn, h: float = 1e-5) -> float:
    """Largest coordinate gap between analytic and central-difference gradients,
    relative to the largest gradient magnitude over the touched rows."""
    grads = grad_fn(drafter, ex)
    base = materialize(drafter, grads)
    worst, scale = 0.0, 0.0
    for key, g in grads.items():
        for j in range(g.size):
            vals = []
            for sign in (1.0, -1.0):
                bumped = materialize(base, ())
                row = np.array(bumped.table[key])
                row[j] += sign * h
                bumped.table[key] = row
                vals.append(loss_fn(bumped, ex))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(fd - g[j]))
            scale = max(scale, abs(fd), abs(g[j]))
    return worst / scale if scale > 0 else worst


def random_grad_case(g: np.random.Generator, stage: int):
    """A small drafter (some rows left on the default) and a matching example."""
    from blockdraft.models import random_drafter
    from blockdraft.training import RefineExample, refine_weights, stage1_example

    vocab = Vocab(int(g.integers(2, 6)))
    order = int(g.integers(1, 3))
    max_offset = 4
    dr = random_drafter(vocab, order, max_offset, g, scale=2.0)
    kept = {k: v for k, v in dr.table.items() if g.random() < 0.7}
    dr = DrafterParams(vocab, order, max_offset, kept, g.normal(size=vocab.n_outcomes))
    L = int(g.integers(2, 9))
    answer = tuple(int(x) for x in g.integers(0, vocab.size, size=L))
    if g.random() < 0.3:
        answer = answer[:-1] + (vocab.eos_id,)
    if stage == 1:
        lq = int(g.integers(1, L))
        span = min(L - lq, max_offset)
        masked = list(g.random(span) < 0.7)
        masked[int(g.integers(span))] = True
        ex = stage1_example(answer[: lq + span], lq, vocab, float(1.0 - g.random()), masked)
    else:
        R = int(g.integers(1, min(max_offset, L - 1) + 1))
        alpha = float(g.choice([1.0, 1.01, 1.02, 1.05, 1.5]))
        ex = RefineExample(answer, R, refine_weights(alpha, R), alpha)
    return dr, ex
