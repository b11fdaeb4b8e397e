"""Command-line entry point.

Subcommands:

* ``icr select`` — build a prompt artifact (icr / uniform / best-of-10) or a
  retrieval plan (kate / ambig) from a candidate pool.
* ``icr eval``   — score a prompt artifact or retrieval plan on a test file;
  ``--transfer`` evaluates a prompt under a different task.
* ``icr ablate`` — the ablation experiments (iters / bins / variants /
  distance / psi).
* ``icr cache``  — inspect or clear the response cache.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes a manifest alongside its outputs with input/output
content hashes, resolved configuration, and runtime counters; reruns with
identical inputs and a warm cache reproduce artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablations import (
    AblationReport,
    ablate_iterations,
    ablate_misconfidence_bins,
    ablate_variants,
    distance_analysis,
    psi_case_study,
)
from .artifacts import (
    PLAN_KIND,
    PROMPT_KIND,
    check_artifact_matches_task,
    demos_from_artifact,
    histogram_svg,
    load_artifact,
    plan_artifact_doc,
    plan_from_artifact,
    prompt_artifact_doc,
    write_csv,
    write_json,
)
from .backends import Backend, CachedBackend, DiskCache, HttpBackend, SyntheticBackend, SyntheticModelParams
from .baselines import RetrievalPlan, best_of_n_select, uniform_select
from .canonical import sha256_of_file
from .embeddings import provider_from_spec
from .errors import ConfigError, IcrError
from .evaluation import evaluate, transfer_evaluate
from .selection import ICRConfig, icr_select
from .tasks import Dataset, load_dataset, load_task

DEFAULT_CACHE_DIR = ".icr-cache"
METHODS = ("icr", "uniform", "best-of-10", "kate", "ambig")


def _cache_dir(args) -> Path:
    if args.cache_dir:
        return Path(args.cache_dir)
    return Path(os.environ.get("ICR_CACHE_DIR", DEFAULT_CACHE_DIR))


def _build_backend(args) -> tuple[Backend, Backend]:
    """Returns (handle used for calls, inner provider backend)."""
    if args.backend == "synthetic":
        params = SyntheticModelParams()
        if getattr(args, "synthetic_config", None):
            with open(args.synthetic_config, encoding="utf-8") as fh:
                doc = json.load(fh)
            params = SyntheticModelParams(
                bias={str(k): float(v) for k, v in doc.get("bias", {}).items()},
                alpha=float(doc.get("alpha", 4.0)),
                temperature=float(doc.get("temperature", 1.0)),
            )
        inner: Backend = SyntheticBackend(params)
    else:
        inner = HttpBackend(args.base_url, args.model)
    if getattr(args, "no_cache", False):
        return inner, inner
    return CachedBackend(inner, _cache_dir(args)), inner


def _data_format(path: str, override: str | None) -> str:
    if override:
        return override
    return "csv" if Path(path).suffix.lower() == ".csv" else "jsonl"


def _load_data(args, path: str, task, role: str) -> Dataset:
    return load_dataset(path, _data_format(path, args.data_format), task, role)


def _provider(args, spec: str | None = None):
    spec = spec or args.embeddings
    return provider_from_spec(
        spec,
        base_url=getattr(args, "base_url", None),
        model=getattr(args, "embed_model", None) or getattr(args, "model", None),
    )


def _pool_cap(args) -> int | None:
    return None if args.pool_cap <= 0 else args.pool_cap


class _Run:
    """Collects manifest bookkeeping for one command invocation."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv) if argv is not None else sys.argv[1:]
        self.started = time.monotonic()
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, dict] = {}
        self.results: dict = {}
        self.seeds: list[int] = []
        self.skipped: list[int] = []
        self.backend_identity: dict = {}

    def add_input(self, name: str, path: str | Path) -> None:
        self.inputs[name] = {"path": str(path), "sha256": sha256_of_file(path)}

    def add_output(self, name: str, path: str | Path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_of_file(path)}

    def write(self, out_dir: Path, resolved: dict, backend: Backend | None, inner: Backend | None) -> Path:
        runtime = {
            "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "duration_s": time.monotonic() - self.started,
        }
        if inner is not None:
            runtime["backend_calls"] = inner.calls
        if isinstance(backend, CachedBackend):
            runtime["cache_hits"] = backend.cache.hits
            runtime["cache_misses"] = backend.cache.misses
        manifest = {
            "command": ["icr"] + self.argv,
            "config": resolved,
            "seeds": self.seeds,
            "backend": self.backend_identity,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.results,
            "skipped_ids": sorted(set(self.skipped)),
            "runtime": runtime,
        }
        path = out_dir / "manifest.json"
        write_json(path, manifest)
        return path


def _resolved_config(args, keys) -> dict:
    return {key: getattr(args, key, None) for key in keys}


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


def cmd_select(args, argv=None) -> int:
    run = _Run(args, argv)
    task = load_task(args.task)
    run.add_input("task", args.task)
    pool = _load_data(args, args.pool, task, "train-pool")
    run.add_input("pool", args.pool)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.seeds = [args.seed]

    backend = inner = None
    if args.method in ("kate", "ambig"):
        provider = _provider(args)
        plan = RetrievalPlan(
            method=args.method,
            k=args.k if args.k else args.m,
            provider=provider,
            pool=pool.examples,
            task_name=task.name,
        )
        doc = plan_artifact_doc(task, plan, provider_spec=args.embeddings)
        artifact_path = out_dir / "plan.json"
        run.backend_identity = {"embedding_provider": provider.provider_id}
    else:
        backend, inner = _build_backend(args)
        run.backend_identity = inner.identity()
        if args.method == "icr":
            config = ICRConfig(
                m=args.m,
                n=args.n,
                iterations=args.iters,
                seed=args.seed,
                pool_cap=_pool_cap(args),
                init_mode=args.init_mode,
            )
            result = icr_select(
                backend, task, pool, config,
                skip_failures=args.skip_failures, parallelism=args.parallelism,
            )
            run.skipped.extend(result.skipped_ids)
            doc = prompt_artifact_doc(task, result.demos, config.as_dict(), result.trace)
        elif args.method == "uniform":
            demos = uniform_select(pool, args.m, args.seed, task_name=task.name)
            doc = prompt_artifact_doc(task, demos, {"m": args.m, "seed": args.seed})
        else:  # best-of-10
            if not args.validation:
                raise ConfigError("--method best-of-10 requires --validation")
            validation = _load_data(args, args.validation, task, "validation")
            run.add_input("validation", args.validation)
            demos = best_of_n_select(
                backend, task, pool, args.m, validation,
                trials=args.trials, seed=args.seed,
            )
            doc = prompt_artifact_doc(
                task, demos, {"m": args.m, "seed": args.seed, "trials": args.trials}
            )
        artifact_path = out_dir / "prompt.json"

    write_json(artifact_path, doc)
    run.add_output("artifact", artifact_path)
    run.results = {"artifact_kind": doc["kind"], "content_hash": doc["content_hash"]}
    resolved = _resolved_config(
        args, ["method", "backend", "m", "n", "iters", "pool_cap", "k", "trials", "init_mode", "embeddings"]
    )
    manifest_path = run.write(out_dir, resolved, backend, inner)
    print(f"wrote {artifact_path}")
    print(f"wrote {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args, argv=None) -> int:
    run = _Run(args, argv)
    task = load_task(args.task)
    run.add_input("task", args.task)
    doc = load_artifact(args.artifact)
    run.add_input("artifact", args.artifact)
    check_artifact_matches_task(doc, task, force=args.force)
    test = _load_data(args, args.test, task, "test")
    run.add_input("test", args.test)
    backend, inner = _build_backend(args)
    run.backend_identity = inner.identity()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if doc["kind"] == PLAN_KIND:
        provider = _provider(args, args.embeddings or doc.get("provider_spec"))
        query_provider = _provider(args, args.query_embeddings) if args.query_embeddings else None
        source = plan_from_artifact(doc, provider, query_provider)
    else:
        source = demos_from_artifact(doc)

    if args.transfer:
        if doc["kind"] != PROMPT_KIND:
            raise ConfigError("--transfer needs a prompt artifact, not a retrieval plan")
        if not args.target or not args.target_pool:
            raise ConfigError("--transfer requires --target and --target-pool")
        target_task = load_task(args.target)
        run.add_input("target_task", args.target)
        target_test = _load_data(args, args.test, target_task, "test")
        target_pool = _load_data(args, args.target_pool, target_task, "train-pool")
        run.add_input("target_pool", args.target_pool)
        label_map = None
        if args.label_map:
            with open(args.label_map, encoding="utf-8") as fh:
                label_map = {str(k): str(v) for k, v in json.load(fh).items()}
            run.add_input("label_map", args.label_map)
        transfer = transfer_evaluate(
            backend, source, target_task, target_test,
            target_pool=target_pool,
            seed=args.transfer_seed,
            label_map=label_map,
            skip_failures=args.skip_failures,
            parallelism=args.parallelism,
        )
        report = transfer.report
        report_doc = transfer.to_dict()
        extra_lines = [
            f"delta_accuracy={transfer.delta_accuracy:+.4f}",
            f"delta_macro_f1={transfer.delta_macro_f1:+.4f}",
        ]
    else:
        report = evaluate(
            backend, task, source, test,
            skip_failures=args.skip_failures,
            parallelism=args.parallelism,
            prompt_hash=doc["content_hash"],
        )
        report_doc = report.to_dict()
        extra_lines = []

    report_path = out_dir / "report.json"
    write_json(report_path, report_doc)
    csv_path = out_dir / "report.csv"
    write_csv(csv_path, report.csv_rows())
    run.add_output("report", report_path)
    run.add_output("report_csv", csv_path)
    run.results = {"accuracy": report.accuracy, "macro_f1": report.macro_f1}
    run.skipped.extend(report.skipped_ids)
    if args.transfer_seed is not None:
        run.seeds = [args.transfer_seed]
    resolved = _resolved_config(args, ["backend", "embeddings", "transfer", "force"])
    run.write(out_dir, resolved, backend, inner)
    print(f"accuracy={report.accuracy:.4f}")
    print(f"macro_f1={report.macro_f1:.4f}")
    for line in extra_lines:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablation_csv_rows(report: AblationReport) -> list[list]:
    payload = report.payload
    if report.variant == "iteration_sweep":
        rows = [["iteration", "accuracy", "macro_f1"]]
        rows += [[p["iteration"], p["accuracy"], p["macro_f1"]] for p in payload["points"]]
        return rows
    if report.variant == "misconfidence_bins":
        rows = [["bin", "seed", "bin_psi_mean", "prompt_psi_mean", "accuracy", "macro_f1"]]
        rows += [
            [r["bin"], r["seed"], r["bin_psi_mean"], r["prompt_psi_mean"], r["accuracy"], r["macro_f1"]]
            for r in payload["rows"]
        ]
        return rows
    if report.variant in ("zero_shot_init", "full_misconfidence"):
        rows = [["variant", "accuracy", "macro_f1", "delta_accuracy", "delta_macro_f1"]]
        for name, entry in payload["variants"].items():
            rows.append(
                [name, entry["accuracy"], entry["macro_f1"], entry["delta_accuracy"], entry["delta_macro_f1"]]
            )
        return rows
    if report.variant == "distance_analysis":
        rows = [["id", "distance", "zero_shot_prediction", "few_shot_prediction", "changed"]]
        rows += [
            [c["id"], c["distance"], c["zero_shot_prediction"], c["few_shot_prediction"], c["changed"]]
            for c in payload["cases"]
        ]
        return rows
    rows = [["label", "bin_low", "bin_high", "count"]]
    for label, hist in payload["psi_histograms"].items():
        edges, counts = hist["edges"], hist["counts"]
        for i, count in enumerate(counts):
            rows.append([label, edges[i], edges[i + 1], count])
    return rows


def _ablation_svgs(report: AblationReport) -> dict[str, str]:
    payload = report.payload
    if report.variant == "misconfidence_bins":
        per_bin = payload["per_bin"]
        return {
            "bins.svg": histogram_svg(
                "accuracy by misconfidence bin",
                [f"bin {r['bin']}" for r in per_bin],
                [r["accuracy_mean"] for r in per_bin],
            )
        }
    if report.variant == "distance_analysis":
        counts, edges = np.histogram(payload["distances_all"], bins=10, range=(0.0, 2.0))
        return {
            "distances.svg": histogram_svg(
                "min cosine distance to demonstrations",
                [f"{edges[i]:.1f}" for i in range(len(counts))],
                [int(c) for c in counts],
            )
        }
    if report.variant == "psi_case_study":
        svgs = {}
        for label, hist in payload["psi_histograms"].items():
            svgs[f"psi_hist_{label}.svg"] = histogram_svg(
                f"misconfidence of gold-{label} candidates",
                [f"{e:.2f}" for e in hist["edges"][:-1]],
                hist["counts"],
            )
        return svgs
    return {}


def cmd_ablate(args, argv=None) -> int:
    run = _Run(args, argv)
    task = load_task(args.task)
    run.add_input("task", args.task)
    backend, inner = _build_backend(args)
    run.backend_identity = inner.identity()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.seeds = [args.seed]
    kw = {"skip_failures": args.skip_failures, "parallelism": args.parallelism}

    pool = test = None
    if args.experiment != "distance":
        pool = _load_data(args, args.pool, task, "train-pool")
        run.add_input("pool", args.pool)
    test = _load_data(args, args.test, task, "test")
    run.add_input("test", args.test)

    if args.experiment == "iters":
        config = ICRConfig(
            m=args.m, n=args.n, iterations=1, seed=args.seed,
            pool_cap=_pool_cap(args), init_mode=args.init_mode,
        )
        reports = [ablate_iterations(backend, task, pool, test, config, args.k, **kw)]
    elif args.experiment == "bins":
        seeds = [args.seed + i for i in range(args.bin_seeds)]
        run.seeds = seeds
        reports = [
            ablate_misconfidence_bins(
                backend, task, pool, test,
                bins=args.bins, m=args.m, seeds=seeds, **kw,
            )
        ]
    elif args.experiment == "variants":
        config = ICRConfig(
            m=args.m, n=args.n, iterations=args.iters, seed=args.seed,
            pool_cap=_pool_cap(args), init_mode=args.init_mode,
        )
        reports = list(ablate_variants(backend, task, pool, test, config, **kw))
    elif args.experiment == "distance":
        doc = load_artifact(args.artifact)
        run.add_input("artifact", args.artifact)
        check_artifact_matches_task(doc, task, force=args.force)
        if doc["kind"] != PROMPT_KIND:
            raise ConfigError("distance analysis needs a prompt artifact")
        demos = demos_from_artifact(doc)
        provider = _provider(args)
        reports = [distance_analysis(backend, task, demos, test, provider, **kw)]
    else:  # psi
        config = ICRConfig(
            m=args.m, n=args.n, iterations=1, seed=args.seed,
            pool_cap=_pool_cap(args), init_mode=args.init_mode,
        )
        reports = [psi_case_study(backend, task, pool, test, config, hist_bins=args.hist_bins, **kw)]

    for report in reports:
        stem = report.variant
        json_path = out_dir / f"{stem}.json"
        write_json(json_path, report.to_dict())
        run.add_output(stem, json_path)
        csv_path = out_dir / f"{stem}.csv"
        write_csv(csv_path, _ablation_csv_rows(report))
        run.add_output(f"{stem}_csv", csv_path)
        if args.svg:
            for name, svg in _ablation_svgs(report).items():
                svg_path = out_dir / name
                svg_path.write_text(svg, encoding="utf-8")
                run.add_output(name, svg_path)
        print(f"wrote {json_path}")

    resolved = _resolved_config(
        args, ["experiment", "backend", "m", "n", "iters", "pool_cap", "bins", "bin_seeds", "k", "hist_bins"]
    )
    run.write(out_dir, resolved, backend, inner)
    return 0


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


def cmd_cache(args, argv=None) -> int:
    cache_dir = _cache_dir(args)
    if args.action == "stats":
        if not cache_dir.is_dir():
            print("entries=0 bytes=0")
            return 0
        entries, size = DiskCache(cache_dir).stats()
        print(f"entries={entries} bytes={size}")
        return 0
    # clear
    if not cache_dir.is_dir():
        print(f"cache directory {cache_dir} does not exist", file=sys.stderr)
        return 1
    if not args.yes:
        print("refusing to clear the cache without --yes", file=sys.stderr)
        return 2
    removed = DiskCache(cache_dir).clear()
    print(f"removed={removed}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("synthetic", "http"), default="synthetic")
    p.add_argument("--base-url", default=os.environ.get("ICR_BASE_URL", "https://api.openai.com"))
    p.add_argument("--model", default="gpt-3.5-turbo-instruct")
    p.add_argument("--synthetic-config", help="JSON file with bias/alpha/temperature")
    p.add_argument("--cache-dir", help=f"response cache directory (default $ICR_CACHE_DIR or ./{DEFAULT_CACHE_DIR})")
    p.add_argument("--no-cache", action="store_true", help="disable the response cache")
    p.add_argument("--parallelism", type=int, default=None, help="max concurrent backend calls")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", required=True, help="task config file (TOML or JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="icr-out", help="output directory")
    p.add_argument("--skip-failures", action="store_true",
                   help="skip failing cases/candidates and record their ids")
    p.add_argument("--data-format", choices=("jsonl", "csv"), default=None,
                   help="override data format inferred from file extension")


def _add_embedding_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embeddings", default="hashing",
                   help="embedding provider: hashing, http, or file:<path>")
    p.add_argument("--query-embeddings", default=None,
                   help="separate provider spec for query-side embeddings")
    p.add_argument("--embed-model", default=None, help="model for http embeddings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icr",
        description="Select and evaluate in-context demonstrations for classification tasks.",
    )
    parser.add_argument("--version", action="version", version=f"icr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="build a prompt artifact or retrieval plan")
    _add_common_flags(p)
    _add_backend_flags(p)
    _add_embedding_flags(p)
    p.add_argument("--pool", required=True, help="candidate pool data file")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--m", type=int, default=16, help="demonstration count")
    p.add_argument("--n", type=int, default=8, help="replacement count per iteration")
    p.add_argument("--iters", type=int, default=1, help="refinement iterations")
    p.add_argument("--pool-cap", type=int, default=500,
                   help="stratified pool cap before selection (0 disables)")
    p.add_argument("--init-mode", choices=("uniform", "stratified"), default="uniform")
    p.add_argument("--k", type=int, default=None, help="retrieval neighbor count (default m)")
    p.add_argument("--validation", help="validation data file for best-of-10")
    p.add_argument("--trials", type=int, default=10, help="best-of-10 trial count")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="evaluate an artifact on a test file")
    _add_common_flags(p)
    _add_backend_flags(p)
    _add_embedding_flags(p)
    p.set_defaults(embeddings=None)
    p.add_argument("--artifact", required=True, help="prompt artifact or retrieval plan")
    p.add_argument("--test", required=True, help="test data file")
    p.add_argument("--force", action="store_true", help="evaluate despite artifact/task mismatch")
    p.add_argument("--transfer", action="store_true", help="evaluate the prompt under --target")
    p.add_argument("--target", help="target task config for --transfer")
    p.add_argument("--target-pool", help="target-task pool for the uniform baseline")
    p.add_argument("--label-map", help="JSON file mapping source labels to target labels")
    p.add_argument("--transfer-seed", type=int, default=None,
                   help="seed for the transfer uniform baseline (default: artifact seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation experiment")
    p.add_argument("experiment", choices=("iters", "bins", "variants", "distance", "psi"))
    _add_common_flags(p)
    _add_backend_flags(p)
    _add_embedding_flags(p)
    p.add_argument("--pool", help="candidate pool data file")
    p.add_argument("--test", required=True, help="test data file")
    p.add_argument("--artifact", help="prompt artifact (distance experiment)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--pool-cap", type=int, default=500)
    p.add_argument("--init-mode", choices=("uniform", "stratified"), default="uniform")
    p.add_argument("--k", type=int, default=5, help="iteration count for the iters experiment")
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--bin-seeds", type=int, default=3, help="prompts per bin (derived seeds)")
    p.add_argument("--hist-bins", type=int, default=10)
    p.add_argument("--svg", action="store_true", help="also write SVG histograms")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cache", help="inspect or clear the response cache")
    p.add_argument("action", choices=("stats", "clear"))
    p.add_argument("--cache-dir", help="cache directory")
    p.add_argument("--yes", action="store_true", help="confirm cache clear")
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("select", "eval", "ablate"):
            _validate_args(args)
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IcrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _validate_args(args) -> None:
    if args.command == "ablate":
        if args.experiment == "distance":
            if not args.artifact:
                raise ConfigError("ablate distance requires --artifact")
        elif not args.pool:
            raise ConfigError(f"ablate {args.experiment} requires --pool")


if __name__ == "__main__":
    sys.exit(main())
