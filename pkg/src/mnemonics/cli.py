"""Command-line front end.

Verbs::

    mnemonics run CONFIG [--seed S ...] [--out DIR]
    mnemonics gradcheck [--size small|medium] [--eps EPS]
    mnemonics compare CONFIG [--strategies a,b,...] [--seeds N] [--jobs J] [--out DIR]
    mnemonics dump-embeddings RUN_DIR --phase I

Exit codes: 0 success, 1 gradient check failure, 2 invalid configuration or
arguments, 3 numerical divergence during a run, 4 missing run artifact.

When ``--out`` is omitted, output goes under ``$MNEMONICS_OUTPUT_ROOT``
(default ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch
import yaml
from pydantic import ValidationError

from . import gradcheck
from .config import ExperimentConfig, load_config
from .errors import FormatError, MnemonicsError, NumericError
from .exemplar import exemplar_drift, load_exemplars, save_exemplars
from .model import features, load_checkpoint, save_checkpoint
from .protocol import (average_accuracy, build_stream, dumps_record, forgetting_rate,
                       read_results, relabel, run_mcil, write_results)

OUTPUT_ROOT_ENV = "MNEMONICS_OUTPUT_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 1, 2, 3, 4

log = logging.getLogger("mnemonics.cli")


class UsageError(Exception):
    """Bad command-line arguments (exit 2)."""


class MissingArtifact(Exception):
    """A run directory lacks the requested files (exit 4)."""


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def _load(path: str) -> ExperimentConfig:
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- run ------------------------------------------------------------------

def run_seed(cfg: ExperimentConfig, seed: int, out: Path, base_dir: Path | None = None) -> dict:
    """One seeded run with every artifact written under ``out``."""
    cfg = ExperimentConfig.model_validate({**cfg.snapshot(), "seed": seed}).resolved()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.snapshot(), indent=2, sort_keys=True) + "\n")
    stream = build_stream(cfg, base_dir)
    results = run_mcil(cfg, stream)
    extra = {"seed": seed, "strategy": cfg.strategy}
    write_results(results, out / "results.jsonl", extra)
    (out / "timings.jsonl").write_text("".join(
        dumps_record({"phase": r.phase, "wall_time": r.wall_time}) + "\n" for r in results.records))
    # phase data in the run's internal label space, so later dumps need no stream rebuild
    relabelled, _ = relabel(stream)
    for i, (model, memory) in enumerate(zip(results.models, results.memories)):
        save_checkpoint(model, out / f"model_phase{i}.json")
        save_exemplars(memory, out / f"exemplars_phase{i}.csv")
        train = relabelled.phases[i].train
        _write_csv(out / f"data_phase{i}.csv", ["label"] + [f"f{j}" for j in range(train.width)],
                   ([int(y)] + [repr(v) for v in x] for x, y in zip(train.features.tolist(),
                                                                     train.labels.tolist())))
    return {**extra, "average_accuracy": average_accuracy(results),
            "forgetting_rate": forgetting_rate(results)}


def cmd_run(args) -> int:
    cfg = _load(args.config)
    seeds = args.seed if args.seed else [cfg.seed]
    out = Path(args.out) if args.out else _output_root() / Path(args.config).stem
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_path": str(Path(args.config).resolve()),
        "seeds": seeds,
        "output_dir": str(out.resolve()),
        "config": cfg.snapshot(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    base_dir = Path(args.config).resolve().parent
    for seed in seeds:
        summary = run_seed(cfg, seed, out / f"seed_{seed}", base_dir)
        print(f"seed {seed}: average accuracy {summary['average_accuracy']:.4f}  "
              f"forgetting {summary['forgetting_rate']:.4f}")
    print(f"results written to {out}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run_suite(args.size, args.eps)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        extra = f" steps={r.params['steps']}" if "steps" in r.params else ""
        print(f"{status} {r.name:20s} rel_err={r.error:.3e} threshold={r.threshold:.0e}{extra}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    for r in failed:
        print(f"failing case {r.name}: {json.dumps(r.params, sort_keys=True)}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# -- compare --------------------------------------------------------------

def _compare_cell(task):
    snapshot, strategy, seed, base_dir = task
    cfg = ExperimentConfig.model_validate({**snapshot, "strategy": strategy, "seed": seed})
    res = run_mcil(cfg, build_stream(cfg, Path(base_dir)))
    return {"strategy": strategy, "seed": seed, "average_accuracy": average_accuracy(res),
            "forgetting_rate": forgetting_rate(res)}


def compare(cfg: ExperimentConfig, strategies, seeds, jobs=1, base_dir: Path | None = None) -> list[dict]:
    """Paired runs for every (strategy, seed); records come back in that order."""
    snapshot = cfg.snapshot()
    tasks = [(snapshot, s, seed, str(base_dir or Path.cwd())) for s in strategies for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_compare_cell, tasks))
    return [_compare_cell(t) for t in tasks]


def summarize(records: list[dict]) -> list[dict]:
    rows = []
    for strategy in dict.fromkeys(r["strategy"] for r in records):
        acc = [r["average_accuracy"] for r in records if r["strategy"] == strategy]
        fgt = [r["forgetting_rate"] for r in records if r["strategy"] == strategy]
        sd = (lambda v: statistics.stdev(v) if len(v) > 1 else 0.0)
        rows.append({"strategy": strategy, "seeds": len(acc),
                     "average_accuracy_mean": statistics.fmean(acc), "average_accuracy_std": sd(acc),
                     "forgetting_rate_mean": statistics.fmean(fgt), "forgetting_rate_std": sd(fgt)})
    return rows


def cmd_compare(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if len(strategies) < 2:
        raise UsageError("--strategies needs at least two entries")
    if len(set(strategies)) != len(strategies):
        raise UsageError("--strategies lists a strategy twice")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    cfg = _load(args.config)
    for s in strategies:  # validate names before spending any compute
        ExperimentConfig.model_validate({**cfg.snapshot(), "strategy": s})
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    records = compare(cfg, strategies, seeds, args.jobs, Path(args.config).resolve().parent)
    table = summarize(records)
    out = Path(args.out) if args.out else _output_root() / f"{Path(args.config).stem}-compare"
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.jsonl").write_text("".join(dumps_record({"record": "seed", **r}) + "\n" for r in records)
                                      + "".join(dumps_record({"record": "summary", **t}) + "\n" for t in table))
    print(f"{'strategy':12s} {'avg accuracy':>20s} {'forgetting':>20s}")
    for t in table:
        print(f"{t['strategy']:12s} {t['average_accuracy_mean']:11.4f} ± {t['average_accuracy_std']:.4f}"
              f" {t['forgetting_rate_mean']:11.4f} ± {t['forgetting_rate_std']:.4f}")
    print(f"{len(seeds)} paired seeds; per-seed records in {out / 'compare.jsonl'}")
    return EXIT_OK


# -- dump-embeddings ------------------------------------------------------

def _seed_dir(run_dir: Path) -> Path:
    if (run_dir / "results.jsonl").exists():
        return run_dir
    subdirs = sorted(p for p in run_dir.glob("seed_*") if p.is_dir())
    if len(subdirs) == 1:
        return subdirs[0]
    if not subdirs:
        raise MissingArtifact(f"{run_dir} is not a run directory")
    raise UsageError(f"{run_dir} holds several seeds; pass one of {[p.name for p in subdirs]}")


def memory_width(memory) -> int:
    return next(iter(memory.exemplars.values())).shape[1]


def cmd_dump_embeddings(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise MissingArtifact(f"no such run directory: {run_dir}")
    run_dir = _seed_dir(run_dir)
    i = args.phase
    needed = [run_dir / f"model_phase{i}.json", run_dir / f"exemplars_phase{i}.csv",
              run_dir / f"data_phase{i}.csv"]
    missing = [p.name for p in needed if not p.exists()]
    if missing:
        raise MissingArtifact(f"phase {i} artifacts missing in {run_dir}: {', '.join(missing)}")
    model = load_checkpoint(needed[0])
    memory = load_exemplars(needed[1])
    with needed[2].open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = [int(r[0]) for r in rows]
    data = torch.tensor([[float(v) for v in r[1:]] for r in rows]) if rows else torch.zeros(0, memory_width(memory))

    out_rows = []
    with torch.no_grad():
        parts = [("data", data, labels)]
        for role, table in (("exemplar", memory.exemplars), ("exemplar-init", memory.init_snapshot)):
            for c in memory.classes:
                parts.append((role, table[c], [c] * len(table[c])))
        for role, x, ys in parts:
            if len(x) == 0:
                continue
            emb = features(model, x).tolist()
            for k, (y, e) in enumerate(zip(ys, emb)):
                out_rows.append([f"{role}-{y}-{k}" if role != "data" else f"data-{k}", y, role]
                                + [repr(v) for v in e])
    width = len(out_rows[0]) - 3 if out_rows else 0
    emb_path = run_dir / f"embeddings_phase{i}.csv"
    _write_csv(emb_path, ["id", "class", "role"] + [f"e{j}" for j in range(width)], out_rows)

    drift_path = run_dir / f"drift_phase{i}.csv"
    _write_csv(drift_path, ["class", "cosine", "euclidean"],
               ([c, repr(cos), repr(euc)] for c, (cos, euc) in exemplar_drift(memory).items()))

    phases, _ = read_results(run_dir / "results.jsonl")
    trace = next((p["mnemonics_drift_trace"] for p in phases if p["phase"] == i), [])
    curve_path = run_dir / f"drift_curve_phase{i}.csv"
    _write_csv(curve_path, ["epoch", "mean_euclidean"], ([e + 1, repr(v)] for e, v in enumerate(trace)))
    print(f"wrote {emb_path.name}, {drift_path.name}, {curve_path.name} in {run_dir}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnemonics", description="Exemplar optimization for class-incremental learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log phase progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int, action="append", help="master seed (repeatable)")
    r.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<config name>)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every gradient path")
    g.add_argument("--size", choices=sorted(gradcheck.SIZES), default="small")
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="paired-seed comparison of exemplar strategies")
    c.add_argument("config")
    c.add_argument("--strategies", default="random,herding,mnemonics")
    c.add_argument("--seeds", type=int, default=20, help="number of seeds, counted from the config seed")
    c.add_argument("--jobs", type=int, default=1, help="worker processes")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("dump-embeddings", help="write embedding and drift CSVs for one phase")
    d.add_argument("run_dir")
    d.add_argument("--phase", type=int, required=True)
    d.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return EXIT_CONFIG
    except yaml.YAMLError as exc:
        print(f"error: config is not valid YAML: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, MnemonicsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
