"""Tabular softmax models: the AR target, the factorized block drafter, and the
sequential AR drafter baseline.

Every model maps the last ``order`` tokens of a prefix (left-padded with
``vocab.pad_id``) to a logit row over ``vocab.n_outcomes`` symbols. The block
drafter additionally keys rows by the offset ``d`` (1-based) of the position
being proposed, so a whole block is a function of the prefix alone.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dist, RngStream, Vocab, kl_divergence, sample_categorical, softmax

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model document is malformed or inconsistent with its declared shape."""


def context_window(prefix: Sequence[int], order: int, pad_id: int) -> tuple[int, ...]:
    tail = tuple(prefix[-order:]) if prefix else ()
    if len(tail) < order:
        tail = (pad_id,) * (order - len(tail)) + tail
    return tail


def all_contexts(vocab: Vocab, order: int, padded: bool = True) -> list[tuple[int, ...]]:
    """Every window a decode can present: ordinary-token windows, plus left-padded ones."""
    out = list(itertools.product(range(vocab.size), repeat=order))
    if padded:
        for n_pad in range(1, order + 1):
            for tail in itertools.product(range(vocab.size), repeat=order - n_pad):
                out.append((vocab.pad_id,) * n_pad + tail)
    return out


def _check_row(logits, n: int, what: str) -> np.ndarray:
    row = np.array(logits, dtype=np.float64)
    if row.shape != (n,):
        raise ModelFormatError(f"{what}: expected {n} logits, got shape {row.shape}")
    if not np.all(np.isfinite(row)):
        raise ModelFormatError(f"{what}: non-finite logits")
    row.setflags(write=False)
    return row


@dataclass(eq=False)
class TargetParams:
    vocab: Vocab
    order: int
    table: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    default_logits: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        n = self.vocab.n_outcomes
        if self.default_logits is None:
            self.default_logits = np.zeros(n)
        self.default_logits = _check_row(self.default_logits, n, "default row")
        clean = {}
        for ctx, row in self.table.items():
            ctx = tuple(int(c) for c in ctx)
            if len(ctx) != self.order:
                raise ModelFormatError(f"context {ctx} has length {len(ctx)}, expected {self.order}")
            clean[ctx] = _check_row(row, n, f"row {ctx}")
        self.table = clean

    def row(self, ctx: tuple[int, ...]) -> np.ndarray:
        return self.table.get(ctx, self.default_logits)

    def dist_at(self, ctx: tuple[int, ...], temperature: float = 1.0) -> Dist:
        key = (ctx, temperature)
        d = self._cache.get(key)
        if d is None:
            d = softmax(self.row(ctx), temperature)
            self._cache[key] = d
        return d

    def window(self, prefix: Sequence[int]) -> tuple[int, ...]:
        return context_window(prefix, self.order, self.vocab.pad_id)


@dataclass(eq=False)
class DrafterParams:
    vocab: Vocab
    order: int
    max_offset: int
    table: dict[tuple[tuple[int, ...], int], np.ndarray] = field(default_factory=dict)
    default_logits: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.max_offset < 1:
            raise ValueError(f"max_offset must be >= 1, got {self.max_offset}")
        n = self.vocab.n_outcomes
        if self.default_logits is None:
            self.default_logits = np.zeros(n)
        self.default_logits = _check_row(self.default_logits, n, "default row")
        clean = {}
        for (ctx, d), row in self.table.items():
            ctx = tuple(int(c) for c in ctx)
            if len(ctx) != self.order:
                raise ModelFormatError(f"context {ctx} has length {len(ctx)}, expected {self.order}")
            if not 1 <= d <= self.max_offset:
                raise ModelFormatError(f"offset {d} outside 1..{self.max_offset}")
            clean[(ctx, int(d))] = _check_row(row, n, f"row {ctx}@{d}")
        self.table = clean

    def row(self, ctx: tuple[int, ...], offset: int) -> np.ndarray:
        return self.table.get((ctx, offset), self.default_logits)

    def dist_at(self, ctx: tuple[int, ...], offset: int, temperature: float = 1.0) -> Dist:
        key = (ctx, offset, temperature)
        d = self._cache.get(key)
        if d is None:
            d = softmax(self.row(ctx, offset), temperature)
            self._cache[key] = d
        return d

    def window(self, prefix: Sequence[int]) -> tuple[int, ...]:
        return context_window(prefix, self.order, self.vocab.pad_id)


@dataclass
class BlockProposal:
    dists: list[Dist]
    tokens: list[int]
    prefix_len: int

    @property
    def k(self) -> int:
        return len(self.tokens)


def _check_prefix(prefix: Sequence[int], vocab: Vocab) -> None:
    if vocab.eos_id in prefix:
        raise ValueError("prefix must not contain EOS")


def target_next_dist(params: TargetParams, prefix: Sequence[int], temperature: float = 1.0) -> Dist:
    _check_prefix(prefix, params.vocab)
    return params.dist_at(params.window(prefix), temperature)


def draft_block_factorized(
    params: DrafterParams,
    prefix: Sequence[int],
    k: int,
    rng: RngStream | Sequence[RngStream],
    temperature: float = 1.0,
    sample_order: Sequence[int] | None = None,
) -> BlockProposal:
    """Propose ``k`` tokens whose dists depend only on the prefix window and offset.

    ``rng`` is either one stream, consumed in ``sample_order`` (default
    left to right), or one stream per offset.
    """
    if not 1 <= k <= params.max_offset:
        raise ValueError(f"block size {k} outside 1..{params.max_offset}")
    _check_prefix(prefix, params.vocab)
    ctx = params.window(prefix)
    dists = [params.dist_at(ctx, d, temperature) for d in range(1, k + 1)]
    tokens = [0] * k
    if isinstance(rng, RngStream):
        order = range(k)
        if sample_order is not None:
            order = list(sample_order)
            if sorted(order) != list(range(k)):
                raise ValueError(f"sample_order {order} is not a permutation of 0..{k - 1}")
        for i in order:
            tokens[i] = sample_categorical(dists[i], rng)
    else:
        if len(rng) != k:
            raise ValueError(f"need {k} rng streams, got {len(rng)}")
        for i in range(k):
            tokens[i] = sample_categorical(dists[i], rng[i])
    return BlockProposal(dists, tokens, len(prefix))


def draft_block_sequential(
    params: TargetParams,
    prefix: Sequence[int],
    k: int,
    rng: RngStream,
    temperature: float = 1.0,
) -> BlockProposal:
    """Left-to-right drafting where each position conditions on the earlier drafts.

    A drafted EOS is kept in the drafter's own window; such windows fall
    back to the default row.
    """
    if k < 1:
        raise ValueError(f"block size must be >= 1, got {k}")
    _check_prefix(prefix, params.vocab)
    grown = list(prefix)
    dists, tokens = [], []
    for _ in range(k):
        d = params.dist_at(params.window(grown), temperature)
        tok = sample_categorical(d, rng)
        dists.append(d)
        tokens.append(tok)
        grown.append(tok)
    return BlockProposal(dists, tokens, len(prefix))


# -- construction helpers ---------------------------------------------------


def random_target(
    vocab: Vocab,
    order: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    eos_logit: float = 0.0,
    successor_margin: float = 0.0,
) -> TargetParams:
    """Dense target with Gaussian logits over every decode-reachable context.

    ``successor_margin`` adds a bump on token ``(last + 1) % size`` so the
    chain has a dominant path; ``eos_logit`` shifts the EOS column.
    """
    table = {}
    for ctx in all_contexts(vocab, order):
        row = scale * rng.standard_normal(vocab.n_outcomes)
        row[vocab.eos_id] += eos_logit
        last = ctx[-1]
        nxt = 0 if last == vocab.pad_id else (last + 1) % vocab.size
        row[nxt] += successor_margin
        table[ctx] = row
    default = np.zeros(vocab.n_outcomes)
    default[vocab.eos_id] = eos_logit
    return TargetParams(vocab, order, table, default)


def perturbed(target: TargetParams, eps: float, rng: np.random.Generator) -> TargetParams:
    """Mix every row's distribution with a random one: ``(1 - eps) p + eps r``, r ~ Dirichlet(1).

    The result keeps full support and stays within TV distance ``eps`` of
    the original row.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    n = target.vocab.n_outcomes

    def mix(logits):
        p = softmax(logits).probs
        r = rng.dirichlet(np.ones(n))
        return np.log((1.0 - eps) * p + eps * r)

    table = {ctx: mix(row) for ctx, row in sorted(target.table.items())}
    return TargetParams(target.vocab, target.order, table, mix(target.default_logits))


def drafter_copy_of(target: TargetParams, max_offset: int) -> DrafterParams:
    """A block drafter whose every offset repeats the target's row for the same window."""
    table = {(ctx, d): row for ctx, row in target.table.items() for d in range(1, max_offset + 1)}
    return DrafterParams(target.vocab, target.order, max_offset, table, target.default_logits)


def zero_drafter(vocab: Vocab, order: int, max_offset: int) -> DrafterParams:
    return DrafterParams(vocab, order, max_offset)


# -- serialization ----------------------------------------------------------


def _floats(row: np.ndarray) -> list[float]:
    return [float(x) for x in row]


def model_to_dict(params: TargetParams | DrafterParams) -> dict:
    if isinstance(params, DrafterParams):
        rows = [
            {"context": list(ctx), "offset": d, "logits": _floats(row)}
            for (ctx, d), row in sorted(params.table.items())
        ]
        return {
            "schema_version": FORMAT_VERSION,
            "kind": "drafter",
            "vocab_size": params.vocab.size,
            "order": params.order,
            "max_offset": params.max_offset,
            "rows": rows,
            "default_logits": _floats(params.default_logits),
        }
    rows = [{"context": list(ctx), "logits": _floats(row)} for ctx, row in sorted(params.table.items())]
    return {
        "schema_version": FORMAT_VERSION,
        "kind": "target",
        "vocab_size": params.vocab.size,
        "order": params.order,
        "rows": rows,
        "default_logits": _floats(params.default_logits),
    }


def serialize_model(params: TargetParams | DrafterParams) -> bytes:
    return (json.dumps(model_to_dict(params), indent=1) + "\n").encode()


def _require(doc: dict, key: str, kind):
    if key not in doc:
        raise ModelFormatError(f"missing field {key!r}")
    val = doc[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ModelFormatError(f"field {key!r} must be an integer")
    if kind is list and not isinstance(val, list):
        raise ModelFormatError(f"field {key!r} must be a list")
    return val


def model_from_dict(doc: dict) -> TargetParams | DrafterParams:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    kind = doc.get("kind")
    if kind not in ("target", "drafter"):
        raise ModelFormatError(f"unknown model kind {kind!r}")
    try:
        vocab = Vocab(_require(doc, "vocab_size", int))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    order = _require(doc, "order", int)
    default = _require(doc, "default_logits", list)
    rows = _require(doc, "rows", list)
    try:
        default_arr = np.array(default, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"default_logits: {exc}") from exc
    if not np.all(np.isfinite(default_arr)):
        raise ModelFormatError("default row: non-finite logits")
    table = {}
    try:
        for r in rows:
            ctx = tuple(int(c) for c in r["context"])
            logits = np.array(r["logits"], dtype=np.float64)
            if kind == "drafter":
                table[(ctx, int(r["offset"]))] = logits
            else:
                table[ctx] = logits
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad row: {exc}") from exc
    try:
        if kind == "drafter":
            return DrafterParams(vocab, order, _require(doc, "max_offset", int), table, default_arr)
        return TargetParams(vocab, order, table, default_arr)
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def deserialize_model(data: bytes | str) -> TargetParams | DrafterParams:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def model_hash(params: TargetParams | DrafterParams) -> str:
    return hashlib.sha256(serialize_model(params)).hexdigest()[:16]


def table_size(params: TargetParams | DrafterParams) -> int:
    """Number of stored logits, default row included."""
    return (len(params.table) + 1) * params.vocab.n_outcomes


def mean_kl_offset1(target: TargetParams, drafter: DrafterParams, contexts=None) -> float:
    """Mean KL(target || drafter@offset 1) over ordinary-token windows."""
    ctxs = contexts if contexts is not None else all_contexts(target.vocab, target.order, padded=False)
    return math.fsum(kl_divergence(target.dist_at(c), drafter.dist_at(c, 1)) for c in ctxs) / len(ctxs)


def mean_xent_offset1(target: TargetParams, drafter: DrafterParams, contexts=None) -> float:
    """Mean cross-entropy H(target, drafter@offset 1) over ordinary-token windows."""
    ctxs = contexts if contexts is not None else all_contexts(target.vocab, target.order, padded=False)
    total = 0.0
    for c in ctxs:
        p = target.dist_at(c).probs
        q = drafter.dist_at(c, 1).probs
        total += -float(np.dot(p, np.log(q)))
    return total / len(ctxs)


def random_drafter(
    vocab: Vocab,
    order: int,
    max_offset: int,
    rng: np.random.Generator,
    scale: float = 1.0,
) -> DrafterParams:
    """Dense block drafter with Gaussian logits for every window and offset."""
    table = {
        (ctx, d): scale * rng.standard_normal(vocab.n_outcomes)
        for ctx in all_contexts(vocab, order)
        for d in range(1, max_offset + 1)
    }
    return DrafterParams(vocab, order, max_offset, table)
