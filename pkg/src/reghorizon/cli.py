"""Command-line entry point: gen, train, sweep, analyze, bootstrap, checkgrad.

Exit codes: 0 ok, 1 usage/config error or failed self-test, 2 numeric failure,
3 insufficient data for the regression.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from . import data, gradcheck, horizon
from .errors import AnalysisError, InsufficientDataError, RegHorizonError
from .model import ModelConfig
from .trainer import RunRecord, TrainConfig, per_item_scores, run_hash, train

log = logging.getLogger("reghorizon")

EXIT_OK, EXIT_ERROR, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _load_corpus(exp: cfgmod.ExperimentConfig, corpus_path: str | None) -> data.Corpus:
    if corpus_path is None:
        return data.generate(exp.corpus)
    triples = data.import_jsonl(corpus_path)
    return data.Corpus(exp.corpus, triples, data.assign_splits(exp.corpus.seed, len(triples)))


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    exp = cfgmod.load(args.config, args.set)
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = data.generate(exp.corpus)
    path = out / "corpus.jsonl"
    data.export_jsonl(corpus.triples, path)
    _write_json(out / "corpus.manifest.json", {
        "spec": exp.corpus.to_dict(),
        "spec_hash": exp.corpus.digest(),
        "size": len(corpus.triples),
        "splits": {k: len(v) for k, v in corpus.splits.items()},
    })
    print(f"wrote {len(corpus.triples)} triples to {path} (spec {exp.corpus.digest()})")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    exp = cfgmod.load(args.config, args.set)
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(exp, args.corpus)
    record, model = train(exp.train.seed, corpus, exp.train, exp.model)
    (out / "run.jsonl").write_text(record.to_json() + "\n")
    if record.failed:
        print(f"run {record.config_hash} failed: non-finite loss", file=sys.stderr)
        return EXIT_NUMERIC
    model.save(out / "checkpoint.json", extra={"config_hash": record.config_hash})
    with open(out / "test_scores.jsonl", "w") as fh:
        for i, s in zip(corpus.splits["test"], per_item_scores(model, corpus.split("test"))):
            fh.write(json.dumps({"index": i, "score": s, "config_hash": record.config_hash}) + "\n")
    print(f"dev {record.dev_metric:.4f} test {record.test_metric:.4f} ({record.config_hash})")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


@lru_cache(maxsize=4)
def _corpus_for(spec_json: str) -> data.Corpus:
    return data.generate(data.CorpusSpec(**json.loads(spec_json)))


def _run_one(spec_json: str, model_dict: dict, train_dict: dict) -> str:
    config = TrainConfig(**train_dict)
    record, _ = train(config.seed, _corpus_for(spec_json), config, ModelConfig(**model_dict))
    return record.to_json()


def _read_records(path: Path) -> dict[str, str]:
    done: dict[str, str] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                done[json.loads(line).get("config_hash", "")] = line
    return done


def cmd_sweep(args) -> int:
    exp = cfgmod.load(args.config, args.set)
    if exp.sweep is None:
        print("config has no sweep section", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.jsonl"
    grid = horizon.expand_grid(exp.sweep)
    hashes = [run_hash(exp.corpus, exp.model, c, c.seed) for c in grid]
    done = _read_records(results)
    todo = [(h, c) for h, c in zip(hashes, grid) if h not in done]
    log.info("grid %d runs, %d already complete", len(grid), len(grid) - len(todo))
    spec_json = json.dumps(exp.corpus.to_dict(), sort_keys=True)
    model_dict = asdict(exp.model)

    with open(results, "a") as fh:
        def record(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()
            done[json.loads(line)["config_hash"]] = line

        if args.workers <= 1:
            for _, c in todo:
                record(_run_one(spec_json, model_dict, c.to_dict()))
        else:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                futures = [pool.submit(_run_one, spec_json, model_dict, c.to_dict())
                           for _, c in todo]
                for fut in as_completed(futures):
                    record(fut.result())

    # rewrite in grid order so the file is independent of completion order
    ordered = [done[h] for h in hashes if h in done]
    extra = [line for h, line in done.items() if h not in set(hashes)]
    tmp = results.with_suffix(".tmp")
    tmp.write_text("".join(line + "\n" for line in ordered + extra))
    os.replace(tmp, results)
    records = [RunRecord.from_dict(json.loads(line)) for line in ordered]
    ok = sum(not r.failed for r in records)
    print(f"{len(records)} runs recorded ({ok} succeeded) in {results}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    path = Path(args.results)
    records = horizon.records_from_jsonl(path.read_text())
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    base = None
    if args.config:
        w = cfgmod.load(args.config).train.weights
        base = {"alpha_cr": w.alpha_cr, "alpha_rd": w.alpha_rd, "alpha_t": w.alpha_t}
    selected = horizon.over_regularized_points(records)
    try:
        fit = horizon.fit_regression(selected, metric=args.metric)
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc.count} over-regularized points "
              f"(need {exc.needed})", file=sys.stderr)
        return EXIT_DATA
    except AnalysisError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    _write_json(out / "fit.json", fit.report())
    rows = horizon.collapse_export(fit, records, base=base, metric=args.metric)
    (out / "collapse.csv").write_text(horizon.collapse_csv(rows))
    manifest = {"results_hash": _file_hash(path), "n_records": len(records),
                "n_selected": len(selected), "metric": args.metric,
                "std_errors": fit.std_errors, "beta_R": fit.beta_R}
    if args.per_family:
        fams = {}
        for fam in ("alpha_cr", "alpha_rd", "alpha_t"):
            pts = [r for r in selected if horizon.family_of(r, base) in (fam, "base")]
            try:
                fams[fam] = horizon.fit_family(pts, fam, metric=args.metric)
            except AnalysisError as exc:
                fams[fam] = {"error": str(exc)}
        manifest["per_family"] = fams
    _write_json(out / "analysis.manifest.json", manifest)
    print(json.dumps(fit.report(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- bootstrap


def read_scores(path: str | Path) -> list[float]:
    scores = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        item = json.loads(line)
        scores.append(float(item["score"] if isinstance(item, dict) else item))
    return scores


def cmd_bootstrap(args) -> int:
    a, b = read_scores(args.a), read_scores(args.b)
    p = horizon.paired_bootstrap(a, b, n_resamples=args.n_resamples, seed=args.seed)
    report = {"p_value": p, "n_items": len(a), "n_resamples": args.n_resamples,
              "seed": args.seed, "mean_a": sum(a) / len(a), "mean_b": sum(b) / len(b),
              "inputs_hash": hashlib.sha256((_file_hash(Path(args.a)) + _file_hash(Path(args.b)))
                                            .encode()).hexdigest()[:16]}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- checkgrad


def cmd_checkgrad(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run_suite(include_losses=not args.primitives_only,
                                  inject_bug=args.inject_bug, seed=args.seed)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in "
          f"{time.perf_counter() - start:.1f}s")
    return EXIT_ERROR if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reghorizon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="experiment JSON file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field, e.g. train.dropout=0.1")
        p.add_argument("-o", "--out", help="output directory (default: config output_dir)")
        return p

    with_config(sub.add_parser("gen", help="generate the synthetic corpus")).set_defaults(
        func=cmd_gen)
    p = with_config(sub.add_parser("train", help="run one training job"))
    p.add_argument("--corpus", help="use an exported corpus JSONL instead of generating")
    p.set_defaults(func=cmd_train)
    p = with_config(sub.add_parser("sweep", help="run the hyperparameter grid (resumable)"))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="fit the total-regularization model to sweep results")
    p.add_argument("results")
    p.add_argument("-o", "--out")
    p.add_argument("--config", help="experiment config whose weights define the base point")
    p.add_argument("--metric", default="dev_metric", choices=["dev_metric", "test_metric"])
    p.add_argument("--per-family", action="store_true", help="also fit each alpha family alone")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bootstrap", help="paired bootstrap significance of A over B")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--n-resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=int(os.environ.get(cfgmod.SEED_ENV) or 0))
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("checkgrad", help="finite-difference self-test")
    p.add_argument("--inject-bug", action="store_true", help="add a primitive with a wrong gradient")
    p.add_argument("--primitives-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_checkgrad)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegHorizonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
