"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), takes
``--seed`` and ``--out``, writes its artifacts into the output directory and
exits 0 on success. Failures exit 1 and emit a JSON error record on stderr
(also saved as ``error.json`` in the output directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..engine import decode
from ..models import DrafterParams, TargetParams, deserialize_model, model_hash, serialize_model, zero_drafter
from ..training import TrainConfig, stability_verdict, synthesize_teacher_corpus, train
from ..core import RngStream
from .experiments import (
    run_alpha_sweep,
    run_bench,
    run_blocksize_sweep,
    run_uncertainty_experiment,
    verify_lossless,
)
from .instances import REFERENCE_V1, build_reference
from .io import dump_json, write_csv, write_json, write_traces
from .metrics import DEFAULT_DRAFTER_COST, DEFAULT_LONG_THRESHOLD, compute_metrics

log = logging.getLogger("blockdraft")


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def _take(cfg: dict, allowed: set[str]) -> dict:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _load_model(path) -> TargetParams | DrafterParams:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    return deserialize_model(p.read_bytes())


def _models(cfg: dict):
    """Target and drafter from model files, falling back to the reference instance."""
    ref = None
    if "target" in cfg:
        target = _load_model(cfg["target"])
        if not isinstance(target, TargetParams):
            raise ConfigError("'target' must point to a target model file")
    else:
        ref = build_reference(cfg.get("instance"))
        target = ref.target
    if "drafter" in cfg:
        drafter = _load_model(cfg["drafter"])
    else:
        ref = ref or build_reference(cfg.get("instance"))
        kind = cfg.get("drafter_kind", "factorized")
        if kind not in ("factorized", "sequential"):
            raise ConfigError(f"unknown drafter_kind {kind!r}")
        drafter = ref.drafter if kind == "factorized" else ref.sequential
    return target, drafter, ref


def _hashes(target, drafter) -> tuple[str, str]:
    return model_hash(target), model_hash(drafter)


MODEL_KEYS = {"target", "drafter", "drafter_kind", "instance"}


def cmd_train(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    train_keys = set(TrainConfig.__dataclass_fields__)
    _take(cfg, train_keys | {"target", "init_drafter", "corpus", "max_offset", "instance"})
    tcfg = {k: v for k, v in cfg.items() if k in train_keys}
    if seed is not None:
        tcfg["seed"] = seed
    config = TrainConfig.from_dict(tcfg)
    if "target" in cfg:
        target = _load_model(cfg["target"])
    else:
        target = build_reference(cfg.get("instance")).target
    if "init_drafter" in cfg:
        init = _load_model(cfg["init_drafter"])
        if not isinstance(init, DrafterParams):
            raise ConfigError("'init_drafter' must point to a drafter model file")
    else:
        init = zero_drafter(target.vocab, target.order, int(cfg.get("max_offset", REFERENCE_V1["k"])))
    corpus_cfg = {"n": 2000, "max_len": 32, "seed": config.seed, **cfg.get("corpus", {})}
    corpus = synthesize_teacher_corpus(
        target, corpus_cfg["n"], corpus_cfg["max_len"], RngStream(corpus_cfg["seed"], 0)
    )
    result = train(init, corpus, config)
    paths = [out / "drafter.json", out / "loss_curve.csv", out / "train_report.json"]
    paths[0].write_bytes(serialize_model(result.drafter))
    write_csv(paths[1], ["epoch", "mean_loss"], [(e, x) for e, x in enumerate(result.losses)])
    write_json(paths[2], {
        "config": config.to_dict(),
        "corpus": corpus_cfg,
        "skipped": result.skipped,
        "verdict": stability_verdict(result.losses),
        "target_hash": model_hash(target),
        "drafter_hash": model_hash(result.drafter),
    })
    return paths


def cmd_decode(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    _take(cfg, MODEL_KEYS | {"prompt", "k", "max_new", "temperature", "seed"})
    target, drafter, _ = _models(cfg)
    seed = cfg.get("seed", 0) if seed is None else seed
    k = int(cfg.get("k", REFERENCE_V1["k"]))
    tr = decode(target, drafter, cfg.get("prompt", [0]), k, int(cfg.get("max_new", 32)), seed,
                temperature=float(cfg.get("temperature", 1.0)))
    paths = [out / "trace.jsonl", out / "decoded.json"]
    write_traces(paths[0], [tr], *_hashes(target, drafter))
    write_json(paths[1], {
        "seed": seed,
        "prompt": list(tr.prompt),
        "output": list(tr.output),
        "new_tokens": list(tr.new_tokens),
        "n_cycles": len(tr.cycles),
    })
    return paths


def cmd_bench(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    _take(cfg, MODEL_KEYS | {"prompts", "k", "max_new", "n_runs", "temperature", "seed",
                             "drafter_cost", "long_threshold"})
    target, drafter, ref = _models(cfg)
    seed = cfg.get("seed", 0) if seed is None else seed
    prompts = cfg.get("prompts") or (ref.prompts if ref else [[0]])
    traces = run_bench(target, drafter, prompts, int(cfg.get("k", REFERENCE_V1["k"])),
                       int(cfg.get("n_runs", 100)), int(cfg.get("max_new", 32)), seed,
                       float(cfg.get("temperature", 1.0)))
    m = compute_metrics(traces, int(cfg.get("long_threshold", DEFAULT_LONG_THRESHOLD)),
                        float(cfg.get("drafter_cost", DEFAULT_DRAFTER_COST)))
    paths = [out / "traces.jsonl", out / "metrics.json", out / "accept_hist.csv"]
    write_traces(paths[0], traces, *_hashes(target, drafter))
    write_json(paths[1], m.to_dict())
    write_csv(paths[2], ["length", "count"], sorted(m.accept_len_hist.items()))
    return paths


def cmd_verify_lossless(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    report = verify_lossless(cfg or None, seed=seed)
    path = write_json(out / "lossless_report.json", report)
    if not report["pass"]:
        raise CheckFailed(f"losslessness check failed; see {path}")
    return [path]


def cmd_sweep_k(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    _take(cfg, MODEL_KEYS | {"ks", "prompts", "n_runs", "max_new", "temperature", "seed", "drafter_cost"})
    target, drafter, ref = _models(cfg)
    if not isinstance(drafter, DrafterParams):
        raise ConfigError("sweep-k needs a block drafter")
    seed = cfg.get("seed", 0) if seed is None else seed
    prompts = cfg.get("prompts") or (ref.prompts if ref else [[0]])
    res = run_blocksize_sweep(target, drafter, cfg.get("ks", [1, 2, 4, 8]), prompts,
                              int(cfg.get("n_runs", 300)), int(cfg.get("max_new", 32)), seed,
                              float(cfg.get("temperature", 1.0)),
                              float(cfg.get("drafter_cost", DEFAULT_DRAFTER_COST)))
    paths = [out / "sweep_k.csv", out / "sweep_k.json"]
    write_csv(paths[0], ["k", "tau", "speedup_proxy"],
              [(r["k"], r["tau"], r["speedup_proxy"]) for r in res["rows"]])
    write_json(paths[1], {"seed": seed, **res})
    return paths


def cmd_sweep_alpha(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    _take(cfg, {"alphas", "epochs", "lr", "r_max", "batch_size", "seed", "window", "instance"})
    ref = build_reference(cfg.get("instance"))
    base = dict(ref.config["stage2"])
    for key in ("epochs", "lr", "r_max", "batch_size", "seed"):
        if key in cfg:
            base[key] = cfg[key]
    if seed is not None:
        base["seed"] = seed
    alphas = cfg.get("alphas", [1.0, 1.01, 1.02, 1.05])
    res = run_alpha_sweep(ref.stage1.drafter, ref.corpus, alphas, TrainConfig.from_dict(base),
                          int(cfg.get("window", 5)))
    paths = [out / "loss_curves.csv", out / "alpha_verdicts.json"]
    write_csv(paths[0], ["alpha", "epoch", "mean_loss"],
              [(a, e, x) for a, r in res.items() for e, x in enumerate(r["losses"])])
    write_json(paths[1], {
        "config": base,
        "verdicts": [{"alpha": a, "verdict": r["verdict"], "error": r["error"],
                      "first_loss": r["losses"][0], "final_loss": r["losses"][-1]} for a, r in res.items()],
    })
    return paths


def cmd_uncertainty(cfg: dict, seed: int | None, out: Path) -> list[Path]:
    _take(cfg, {"instance", "seed", "long_threshold"})
    seed = cfg.get("seed") if seed is None else seed
    rep = run_uncertainty_experiment(cfg.get("instance"), seed,
                                     int(cfg.get("long_threshold", DEFAULT_LONG_THRESHOLD)))
    paths = [out / "uncertainty_report.json"]
    for name, d in rep["drafters"].items():
        p = out / f"kl_{name}.csv"
        write_csv(p, ["depth", "mean_kl", "stderr"],
                  [(i + 1, m, s) for i, (m, s) in enumerate(zip(d["kl_mean"], d["kl_stderr"]))])
        paths.append(p)
    p = out / "accept_hist.csv"
    write_csv(p, ["drafter", "length", "count"],
              [(name, n, c) for name, d in rep["drafters"].items() for n, c in sorted(d["accept_len_hist"].items())])
    paths.append(p)
    for d in rep["drafters"].values():
        d["accept_len_hist"] = {str(n): c for n, c in sorted(d["accept_len_hist"].items())}
    write_json(paths[0], rep)
    return paths


COMMANDS = {
    "train": (cmd_train, "run Stage I or Stage II drafter training"),
    "decode": (cmd_decode, "decode one prompt and write its trace"),
    "bench": (cmd_bench, "decode many prompts and report acceptance metrics"),
    "verify-lossless": (cmd_verify_lossless, "compare decoded and exact sequence laws"),
    "sweep-k": (cmd_sweep_k, "tau and speedup proxy across block sizes"),
    "sweep-alpha": (cmd_sweep_alpha, "Stage II loss curves across alpha"),
    "uncertainty": (cmd_uncertainty, "KL-by-depth contrast of block vs sequential drafting"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockdraft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    return parser


def _error_record(exc: BaseException, command: str) -> dict:
    return {"command": command, "error": type(exc).__name__, "message": str(exc)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = {}
        if args.config is not None:
            if not args.config.exists():
                raise FileNotFoundError(f"config file not found: {args.config}")
            cfg = json.loads(args.config.read_text())
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
        args.out.mkdir(parents=True, exist_ok=True)
        for path in handler(cfg, args.seed, args.out):
            print(path)
    except Exception as exc:  # reported as a machine-readable record
        rec = _error_record(exc, args.command)
        sys.stderr.write(json.dumps(rec) + "\n")
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "error.json").write_text(dump_json(rec))
        except OSError:
            pass
        log.debug("command failed", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
