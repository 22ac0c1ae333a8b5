"""Batch command-line interface.

Subcommands: run-stream (full training run with metrics artifacts),
retrieve (ad-hoc corpus query), plan (ad-hoc symbolic planning), and
eval (evaluation-only pass over a checkpoint). Exit codes: 0 success
(a planning FAIL is a result, not an error), 1 runtime fault, 2
input/config fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness, prag
from .errors import (
    CheckpointVersionError,
    ConfigError,
    CorpusFormatError,
    RulesetFormatError,
)
from .numerics import make_rng
from .rsho import planning
from .system import DraeSystem, SystemConfig

log = logging.getLogger("drae")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

# system fields the loader injects from the stream section / top level
_INJECTED = {"input_dim", "classes", "embed_dim", "seed"}
_SYSTEM_KEYS = {f.name for f in fields(SystemConfig)} - _INJECTED
_STREAM_KEYS = {f.name for f in fields(harness.StreamSpec)} - {"seed"}
_TOP_KEYS = {"seed", "seeds", "out", "system", "stream"}


def _check_keys(section: dict, allowed: set, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}.{key}"
                              if path else f"unknown config key {key}",
                              path=f"{path}.{key}" if path else key)


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _check_keys(raw, _TOP_KEYS, "")
    _check_keys(raw.get("system", {}), _SYSTEM_KEYS, "system")
    _check_keys(raw.get("stream", {}), _STREAM_KEYS, "stream")
    return raw


def build_run(raw: dict, seed: int) -> tuple[DraeSystem, harness.TaskStream]:
    try:
        spec = harness.StreamSpec(seed=seed, **raw.get("stream", {}))
        stream = harness.gen_stream(spec)
        config = SystemConfig(
            seed=seed,
            input_dim=spec.input_dim,
            classes=spec.classes,
            embed_dim=spec.embed_dim,
            **raw.get("system", {}),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return DraeSystem(config, corpus=stream.corpus), stream


def _write_outputs(outdir: Path, seed: int, system: DraeSystem,
                   stream: harness.TaskStream, result: dict,
                   records: list) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "step": rec.step,
                "l_moe": rec.l_moe,
                "l_prag": rec.l_prag,
                "l_dpmm": rec.l_dpmm,
                "l_reflex": rec.l_reflex,
                "l_schema": rec.l_schema,
                "l_hyper": rec.l_hyper,
                "alpha": rec.alpha,
                "gamma": rec.gamma,
                "K": rec.num_experts,
                "cluster_count": rec.cluster_count,
                "seed": seed,
            }, sort_keys=True) + "\n")
    with open(outdir / "regret.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "comparator_loss", "cumulative_regret"])
        for t in range(len(stream)):
            writer.writerow([t, repr(result["per_step_loss"][t]),
                             repr(result["comparator_loss"][t]),
                             repr(result["cumulative_regret"][t])])
    if result["forgetting_matrix"] is not None:
        with open(outdir / "forgetting.csv", "w", encoding="utf-8",
                  newline="") as fh:
            writer = csv.writer(fh)
            for row in result["forgetting_matrix"]:
                writer.writerow([repr(v) for v in row])
    summary = {
        "slope": result["slope"],
        "forgetting": result["forgetting"],
        "stability_mean": result["stability_mean"],
        "P_T": result["path_length"],
        "final_accuracy": result["final_accuracy"],
        "num_experts": len(system.experts),
        "cluster_count": len(system.dpmm.clusters) if system.dpmm else 0,
        "seed": seed,
    }
    with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    system.save_checkpoint(outdir / "checkpoint.json")
    return summary


def _run_one_seed(raw: dict, seed: int, outdir: Path) -> dict:
    system, stream = build_run(raw, seed)
    records = []
    result = harness.run_stream(system, stream, log_writer=records.append)
    return _write_outputs(outdir, seed, system, stream, result, records)


def cmd_run_stream(args) -> int:
    raw = load_config(args.config)
    base_seed = args.seed if args.seed is not None else raw.get("seed", 0)
    seeds = raw.get("seeds", [base_seed])
    if args.seed is not None:
        seeds = [args.seed]
    out_root = Path(args.out or raw.get("out", "results"))
    if len(seeds) == 1:
        summary = _run_one_seed(raw, seeds[0], out_root)
        log.info("run complete: slope=%.3f forgetting=%.3f",
                 summary["slope"], summary["forgetting"])
        return 0
    jobs = {}
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        for s in seeds:
            jobs[s] = pool.submit(_run_one_seed, raw, s, out_root / f"seed_{s}")
    per_seed = {s: jobs[s].result() for s in sorted(seeds)}
    merged = {
        "seeds": {str(s): per_seed[s] for s in sorted(per_seed)},
        "slope": float(np.mean([v["slope"] for v in per_seed.values()])),
        "forgetting": float(np.mean([v["forgetting"]
                                     for v in per_seed.values()])),
        "stability_mean": float(np.mean([v["stability_mean"]
                                         for v in per_seed.values()])),
        "P_T": float(np.mean([v["P_T"] for v in per_seed.values()])),
    }
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(merged, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return 0


def _parse_query(args) -> np.ndarray:
    if args.query is not None:
        try:
            return np.array([float(v) for v in args.query.split(",")])
        except ValueError as exc:
            raise ConfigError(f"bad query vector: {exc}") from exc
    with open(args.query_file, "r", encoding="utf-8") as fh:
        return np.array(json.load(fh), dtype=np.float64)


def cmd_retrieve(args) -> int:
    corpus = prag.load_corpus_jsonl(args.corpus)
    q = _parse_query(args)
    result = prag.retrieve(corpus, q, args.lam)
    print(json.dumps({
        "selected": result.selected,
        "similarities": {d: result.similarities[d] for d in sorted(result.similarities)},
        "objective": result.objective,
    }, sort_keys=True))
    return 0


def cmd_plan(args) -> int:
    ruleset = planning.load_ruleset(args.ruleset)
    initial = frozenset(args.initial or [])
    rng = make_rng(args.seed)
    steps = planning.plan(ruleset, initial, args.budget, rng)
    if steps is None:
        print(json.dumps({"plan": "FAIL", "trace": []}, sort_keys=True))
        return 0
    assert planning.validate_plan(ruleset, initial, steps)
    print(json.dumps({
        "plan": [ruleset.primitive_name(i) for i in steps],
        "trace": planning.simulate_trace(ruleset, initial, steps),
        "valid": True,
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    raw = load_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    try:
        spec = harness.StreamSpec(seed=seed, **raw.get("stream", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    stream = harness.gen_stream(spec)
    try:
        system = DraeSystem.load_checkpoint(args.checkpoint,
                                            corpus=stream.corpus)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"cannot parse checkpoint: {exc}") from exc
    per_task = [system.accuracy(stream.heldout_x[i], stream.heldout_y[i])
                for i in range(spec.num_tasks)]
    stabilities = []
    prev_h, prev_sel = None, None
    for x in stream.heldout_x[0][:50]:
        h, sel = system.hidden_state(x)
        if prev_h is not None and np.linalg.norm(prev_h) > 0 \
                and np.linalg.norm(h) > 0:
            stabilities.append(prag.knowledge_stability(prev_h, h,
                                                        set(prev_sel), set(sel)))
        prev_h, prev_sel = h, sel
    print(json.dumps({
        "accuracy_per_task": per_task,
        "final_accuracy": float(np.mean(per_task)),
        "stability_mean": float(np.mean(stabilities)) if stabilities else 0.0,
    }, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drae",
        description="Lifelong mixture-of-experts experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run-stream", help="train on a configured stream")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--threads", type=int, default=1)
    run.set_defaults(func=cmd_run_stream)

    ret = sub.add_parser("retrieve", help="query a JSONL corpus")
    ret.add_argument("--corpus", required=True)
    group = ret.add_mutually_exclusive_group(required=True)
    group.add_argument("--query")
    group.add_argument("--query-file")
    ret.add_argument("--lam", type=float, default=0.3)
    ret.set_defaults(func=cmd_retrieve)

    pl = sub.add_parser("plan", help="plan over a rule-set file")
    pl.add_argument("--ruleset", required=True)
    pl.add_argument("--initial", type=int, nargs="*", default=[])
    pl.add_argument("--budget", type=int, default=2000)
    pl.add_argument("--seed", type=int, default=0)
    pl.set_defaults(func=cmd_plan)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a stream")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DRAE_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, RulesetFormatError,
            CheckpointVersionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime fault
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
