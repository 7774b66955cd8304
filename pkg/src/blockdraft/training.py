"""Teacher-data synthesis and the two drafter alignment objectives.

Stage I (continuation distillation): cut a teacher answer at a random point,
insert SEP, mask each continuation token with probability ``t`` and score
``-(1/t) * sum log q(true token | prefix window, offset)`` over the masked
positions.

Stage II (suffix refinement): mask exactly the last ``R`` tokens and weight
position ``i`` (1-based from the boundary) by ``alpha ** (R - i)``, so the
positions right after the prefix dominate.

Both losses are weighted softmax cross-entropies over drafter rows keyed
``(window, offset)``, which gives the analytic gradient
``w * (softmax(row) - onehot(y))`` per touched row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import RngStream, Vocab
from .engine import decode_baseline_ar
from .models import DrafterParams, TargetParams

log = logging.getLogger(__name__)

RowKey = tuple[tuple[int, ...], int]


class OffsetOverflowError(ValueError):
    """A masked position lies deeper than the drafter's max_offset."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class TrainingExample:
    full: tuple[int, ...]
    prefix_len: int
    noised: tuple[int, ...]
    t: float
    mask_id: int
    sep_inserted: bool = True

    @property
    def masked_offsets(self) -> list[int]:
        """1-based offsets (from the boundary) of the masked continuation tokens."""
        start = self.prefix_len + (1 if self.sep_inserted else 0)
        return [i - start + 1 for i in range(start, len(self.noised)) if self.noised[i] == self.mask_id]


@dataclass
class RefineExample:
    full: tuple[int, ...]
    R: int
    weights: tuple[float, ...]
    alpha: float
    sep_inserted: bool = False

    @property
    def boundary(self) -> int:
        return len(self.full) - self.R


def refine_weights(alpha: float, R: int) -> tuple[float, ...]:
    """``w_i = alpha ** (R - i)`` for ``i = 1..R``, built as ``w_R = 1, w_i = alpha * w_{i+1}``."""
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    w = [1.0]
    for _ in range(R - 1):
        w.append(w[-1] * alpha)
    return tuple(reversed(w))


def synthesize_teacher_corpus(
    target: TargetParams,
    n: int,
    max_len: int,
    rng: RngStream,
    temperature: float = 1.0,
    prompt: Sequence[int] = (),
) -> list[tuple[int, ...]]:
    """``n`` answers sampled from the target after ``prompt``; each ends in EOS or has ``max_len`` tokens."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    start = len(prompt)
    return [
        decode_baseline_ar(target, prompt, max_len, rng=rng, temperature=temperature)[start:]
        for _ in range(n)
    ]


def stage1_example(
    answer: Sequence[int],
    prefix_len: int,
    vocab: Vocab,
    t: float = 1.0,
    masked: Sequence[bool] | None = None,
) -> TrainingExample:
    """Build a Stage I example with an explicit cut point and mask pattern."""
    full = tuple(answer)
    if not 1 <= prefix_len < len(full):
        raise ValueError(f"prefix_len {prefix_len} outside 1..{len(full) - 1}")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"mask level t must lie in (0, 1], got {t}")
    suffix = full[prefix_len:]
    if masked is None:
        masked = [True] * len(suffix)
    if len(masked) != len(suffix):
        raise ValueError("mask pattern length differs from the continuation length")
    noised = full[:prefix_len] + (vocab.sep_id,) + tuple(
        vocab.mask_id if m else tok for m, tok in zip(masked, suffix)
    )
    return TrainingExample(full, prefix_len, noised, t, vocab.mask_id)


def make_stage1_example(
    answer: Sequence[int],
    rng: RngStream,
    vocab: Vocab,
    t_mode: str = "one",
    max_span: int | None = None,
) -> TrainingExample:
    """Random cut ``l_q ~ Uniform{1..L-1}``, SEP at the cut, each continuation token masked w.p. ``t``.

    ``t`` is 1 for ``t_mode="one"`` and ``Uniform(0, 1]`` for ``"uniform"``.
    ``max_span`` keeps only that many continuation tokens after the cut.
    """
    full = tuple(answer)
    L = len(full)
    if L < 2:
        raise ValueError(f"answer of length {L} is too short for a Stage I example")
    lq = 1 + int(rng.uniform() * (L - 1))
    if t_mode == "one":
        t = 1.0
    elif t_mode == "uniform":
        t = 1.0 - rng.uniform()
    else:
        raise ValueError(f"unknown t_mode {t_mode!r}")
    if max_span is not None:
        full = full[: lq + max_span]
    masked = [rng.uniform() < t for _ in range(len(full) - lq)]
    return stage1_example(full, lq, vocab, t, masked)


def make_stage2_example(
    answer: Sequence[int],
    rng: RngStream,
    vocab: Vocab,
    alpha: float,
    r_max: int,
    sep: bool = False,
) -> RefineExample:
    """Mask the last ``R ~ Uniform{1..min(r_max, L-1)}`` tokens."""
    full = tuple(answer)
    L = len(full)
    if L < 2:
        raise ValueError(f"answer of length {L} is too short for a Stage II example")
    R = 1 + int(rng.uniform() * min(r_max, L - 1))
    return RefineExample(full, R, refine_weights(alpha, R), alpha, sep)


def refine_noised(ex: RefineExample, vocab: Vocab) -> tuple[int, ...]:
    head = ex.full[: ex.boundary] + ((vocab.sep_id,) if ex.sep_inserted else ())
    return head + (vocab.mask_id,) * ex.R


def _terms(drafter: DrafterParams, ex) -> list[tuple[RowKey, int, float]]:
    """``((window, offset), true token, weight)`` for every scored position."""
    if isinstance(ex, TrainingExample):
        ctx = drafter.window(ex.full[: ex.prefix_len])
        out = []
        for d in ex.masked_offsets:
            if d > drafter.max_offset:
                raise OffsetOverflowError(
                    f"masked offset {d} exceeds drafter max_offset {drafter.max_offset}"
                )
            out.append(((ctx, d), ex.full[ex.prefix_len + d - 1], 1.0 / ex.t))
        return out
    if isinstance(ex, RefineExample):
        if ex.R > drafter.max_offset:
            raise OffsetOverflowError(f"R = {ex.R} exceeds drafter max_offset {drafter.max_offset}")
        b = ex.boundary
        ctx = drafter.window(ex.full[:b])
        return [((ctx, i), ex.full[b + i - 1], ex.weights[i - 1]) for i in range(1, ex.R + 1)]
    raise TypeError(f"not a training example: {type(ex).__name__}")


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - math.log(float(np.exp(z).sum()))


def _check_stage(ex, stage: int | None) -> None:
    if stage is None:
        return
    want = TrainingExample if stage == 1 else RefineExample
    if stage not in (1, 2) or not isinstance(ex, want):
        raise ValueError(f"example of type {type(ex).__name__} does not match stage {stage}")


def _xent(drafter: DrafterParams, terms) -> float:
    total = 0.0
    for (ctx, d), y, w in terms:
        total -= w * float(_log_softmax(drafter.row(ctx, d))[y])
    return total


def stage1_loss(drafter: DrafterParams, ex: TrainingExample) -> float:
    _check_stage(ex, 1)
    return _xent(drafter, _terms(drafter, ex))


def stage2_loss(drafter: DrafterParams, ex: RefineExample) -> float:
    _check_stage(ex, 2)
    return _xent(drafter, _terms(drafter, ex))


def example_loss(drafter: DrafterParams, ex) -> float:
    return _xent(drafter, _terms(drafter, ex))


def loss_gradient(drafter: DrafterParams, ex, stage: int | None = None) -> dict[RowKey, np.ndarray]:
    """Gradient of the example loss w.r.t. every row it reads; absent rows have zero gradient.

    A row that falls back to the default logits is differentiated as if it
    had been stored with those logits.
    """
    _check_stage(ex, stage)
    grads: dict[RowKey, np.ndarray] = {}
    for key, y, w in _terms(drafter, ex):
        row = drafter.row(*key)
        p = np.exp(_log_softmax(row))
        p[y] -= 1.0
        if key in grads:
            grads[key] += w * p
        else:
            grads[key] = w * p
    return grads


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 20
    lr: float = 1.0
    alpha: float = 1.01
    r_max: int = 8
    t_mode: str = "one"
    seed: int = 0
    batch_size: int = 32
    sep_stage2: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1 or self.r_max < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and r_max >= 1 are required")
        if self.t_mode not in ("one", "uniform"):
            raise ValueError(f"unknown t_mode {self.t_mode!r}")
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    drafter: DrafterParams
    losses: list[float]
    skipped: int = 0

    @property
    def diverged(self) -> bool:
        return any(not math.isfinite(x) for x in self.losses)


def _private_copy(drafter: DrafterParams) -> DrafterParams:
    return DrafterParams(
        drafter.vocab,
        drafter.order,
        drafter.max_offset,
        {k: np.array(v) for k, v in drafter.table.items()},
        np.array(drafter.default_logits),
    )


def train(drafter: DrafterParams, corpus: Sequence[Sequence[int]], config: TrainConfig) -> TrainResult:
    """Minibatch gradient descent on the configured stage loss.

    Answers shorter than 2 tokens and examples with nothing masked are
    skipped and counted. Raises ``TrainingDivergedError`` on a non-finite
    loss.
    """
    if config.stage == 2 and config.r_max > drafter.max_offset:
        raise OffsetOverflowError(f"r_max {config.r_max} exceeds drafter max_offset {drafter.max_offset}")
    vocab = drafter.vocab
    usable = [tuple(a) for a in corpus if len(a) >= 2]
    skipped = len(corpus) - len(usable)
    if not usable:
        raise ValueError("corpus has no answer of length >= 2")
    rng = RngStream(config.seed, 1)
    shuffler = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 2])))
    work = _private_copy(drafter)
    table = dict(work.table)
    losses: list[float] = []

    for epoch in range(config.epochs):
        order = shuffler.permutation(len(usable))
        total, count = 0.0, 0
        for b0 in range(0, len(order), config.batch_size):
            batch_grad: dict[RowKey, np.ndarray] = {}
            n_batch = 0
            for idx in order[b0 : b0 + config.batch_size]:
                answer = usable[idx]
                if config.stage == 1:
                    ex = make_stage1_example(answer, rng, vocab, config.t_mode, max_span=work.max_offset)
                else:
                    ex = make_stage2_example(answer, rng, vocab, config.alpha, config.r_max, config.sep_stage2)
                terms = _terms(work, ex)
                if not terms:
                    skipped += 1
                    continue
                loss = _xent(work, terms)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b0 // config.batch_size}")
                total += loss
                count += 1
                n_batch += 1
                for key, g in loss_gradient(work, ex).items():
                    if key in batch_grad:
                        batch_grad[key] += g
                    else:
                        batch_grad[key] = g
            if n_batch and config.lr > 0:
                step = config.lr / n_batch
                for key, g in batch_grad.items():
                    new = work.row(*key) - step * g
                    if not np.all(np.isfinite(new)):
                        raise TrainingDivergedError(f"non-finite logits at epoch {epoch}, row {key}")
                    new.setflags(write=False)
                    table[key] = new
                work.table = table
        mean = total / count if count else 0.0
        if not math.isfinite(mean):
            raise TrainingDivergedError(f"non-finite mean loss at epoch {epoch}")
        losses.append(mean)
        log.debug("stage %d epoch %d mean loss %.6f", config.stage, epoch, mean)

    out = DrafterParams(vocab, drafter.order, drafter.max_offset, table, work.default_logits)
    return TrainResult(out, losses, skipped)


def stability_verdict(losses: Sequence[float], window: int = 5) -> str:
    """``"diverged"`` on a non-finite loss or final > initial; ``"unstable"`` when the
    last ``window`` epochs never decrease; otherwise ``"stable"``."""
    if any(not math.isfinite(x) for x in losses):
        return "diverged"
    if len(losses) >= 2 and losses[-1] > losses[0]:
        return "diverged"
    if window >= 2 and len(losses) >= window:
        tail = losses[-window:]
        if all(b >= a for a, b in zip(tail, tail[1:])):
            return "unstable"
    return "stable"
