"""Versioned toy instances behind the golden experiments.

Changing any constant here changes the golden numbers; bump ``version``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..core import RngStream, Vocab
from ..models import (
    DrafterParams,
    TargetParams,
    perturbed,
    random_drafter,
    random_target,
    zero_drafter,
)
from ..training import TrainConfig, TrainResult, synthesize_teacher_corpus, train

REFERENCE_V1 = {
    "version": 1,
    "vocab_size": 6,
    "order": 1,
    "eps": 0.2,
    "k": 8,
    "target": {"seed": 11, "scale": 1.0, "eos_logit": -3.0, "successor_margin": 6.0},
    "perturb_seed": 12,
    "corpus": {"n": 2000, "max_len": 32, "seed": 13},
    "stage1": {"stage": 1, "epochs": 15, "lr": 2.0, "t_mode": "one", "seed": 14, "batch_size": 32},
    "stage2": {"stage": 2, "epochs": 10, "lr": 1.0, "alpha": 1.01, "r_max": 8, "seed": 15, "batch_size": 32},
    "prompts": [[0], [1], [2], [3], [4], [5]],
    "eval": {"n_runs": 600, "max_new": 32, "seed": 16},
}

LOSSLESS_V1 = {
    "version": 1,
    "vocab_size": 4,
    "target_order": 2,
    "drafter_order": 1,
    "max_offset": 4,
    "instance_seed": 21,
    "prompt": [0],
    "max_len": 3,
    "ks": [1, 2, 4],
    "n": 1_000_000,
    "seed": 22,
}


def merged(base: dict, override: dict | None) -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown top-level keys are rejected."""
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in out:
            raise ValueError(f"unknown instance key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key].update(val)
        else:
            out[key] = val
    return out


@dataclass
class ReferenceInstance:
    config: dict
    target: TargetParams
    sequential: TargetParams
    corpus: list[tuple[int, ...]]
    initial: DrafterParams
    stage1: TrainResult
    stage2: TrainResult

    @property
    def drafter(self) -> DrafterParams:
        return self.stage2.drafter

    @property
    def prompts(self) -> list[tuple[int, ...]]:
        return [tuple(p) for p in self.config["prompts"]]


def reference_target(cfg: dict) -> TargetParams:
    t = cfg["target"]
    return random_target(
        Vocab(cfg["vocab_size"]),
        cfg["order"],
        np.random.default_rng(t["seed"]),
        scale=t["scale"],
        eos_logit=t["eos_logit"],
        successor_margin=t["successor_margin"],
    )


@lru_cache(maxsize=8)
def _build_reference(key: str) -> ReferenceInstance:
    cfg = json.loads(key)
    target = reference_target(cfg)
    sequential = perturbed(target, cfg["eps"], np.random.default_rng(cfg["perturb_seed"]))
    c = cfg["corpus"]
    corpus = synthesize_teacher_corpus(target, c["n"], c["max_len"], RngStream(c["seed"], 0))
    initial = zero_drafter(target.vocab, cfg["order"], cfg["k"])
    s1 = train(initial, corpus, TrainConfig.from_dict(cfg["stage1"]))
    s2 = train(s1.drafter, corpus, TrainConfig.from_dict(cfg["stage2"]))
    return ReferenceInstance(cfg, target, sequential, corpus, initial, s1, s2)


def build_reference(override: dict | None = None) -> ReferenceInstance:
    """Target, ε-perturbed sequential drafter, and the Stage I + II trained block drafter.

    Built once per distinct configuration and cached for the process.
    """
    cfg = merged(REFERENCE_V1, override)
    return _build_reference(json.dumps(cfg, sort_keys=True))


@dataclass
class LosslessInstance:
    config: dict
    target: TargetParams
    drafter: DrafterParams

    @property
    def prompt(self) -> tuple[int, ...]:
        return tuple(self.config["prompt"])


def build_lossless(override: dict | None = None) -> LosslessInstance:
    """Full-support target and an unrelated random block drafter (so rejections are frequent)."""
    cfg = merged(LOSSLESS_V1, override)
    vocab = Vocab(cfg["vocab_size"])
    g = np.random.default_rng(cfg["instance_seed"])
    target = random_target(vocab, cfg["target_order"], g)
    drafter = random_drafter(vocab, cfg["drafter_order"], cfg["max_offset"], g)
    return LosslessInstance(cfg, target, drafter)
