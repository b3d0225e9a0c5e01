"""Command-line entry point: ``raprank attack|baseline|evaluate|oracle``.

Every command writes into ``--out`` only after its computation has finished,
by staging files in a temporary directory and renaming them into place.
Exit codes: 0 success, 2 configuration error, 3 optimizer failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from importlib import metadata
from pathlib import Path
from typing import Callable

import numpy as np

from raprank import attack as attack_mod
from raprank import baselines, bayes_oracle, evaluation
from raprank.domain import (Dataset, Domain, SchemaError, build_domain, ingest_csv, load_bin_edges,
                            save_bin_edges, split_holdout)
from raprank.optimizer import OptimizerAbort, OptimizerConfig
from raprank.queries import (AnswerVector, QueryWorkload, all_k_way_marginals, eval_workload,
                             load_cnf_workload, published_answers)

log = logging.getLogger("raprank")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(SchemaError):
    pass


# ---------------------------------------------------------------- file output

def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def commit_outputs(out_dir: str | Path, writers: dict[str, Callable[[Path], None]] | Callable[[Path], None],
                   manifest: dict | None = None) -> list[Path]:
    """Stage every output in a temp directory, then rename each into ``out_dir``.

    ``writers`` maps a file name to a function writing that file, or is a
    single function that fills the staging directory.  When a manifest is
    given it is written last, with a sha256 for each output.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        if callable(writers):
            writers(stage)
        else:
            for name, write in writers.items():
                write(stage / name)
        staged = sorted(p for p in stage.rglob("*") if p.is_file())
        if manifest is not None:
            manifest = dict(manifest)
            manifest["outputs"] = {p.relative_to(stage).as_posix(): _sha256(p) for p in staged}
            (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            staged.append(stage / "manifest.json")
        final = []
        for p in staged:
            dest = out / p.relative_to(stage)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(p, dest)
            final.append(dest)
        return final
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _manifest(command: str, args: argparse.Namespace, **extra) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    return {"command": command, "version": _version(), "flags": flags, **extra}


# ---------------------------------------------------------------- inputs

def _require(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag}: {path} does not exist")
    return p


def _load_schema(path: str | None) -> Domain:
    return build_domain(_require(path, "--schema"))


def _load_data(path: str, domain: Domain, edges_path: str | None, flag: str = "--data") -> Dataset:
    edges = load_bin_edges(_require(edges_path, "--bin-edges")) if edges_path else None
    return ingest_csv(_require(path, flag), domain, bin_edges=edges)


def _parse_assignment(text: str, flag: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{flag}: expected NAME=VALUE, got {text!r}")
    name, value = text.split("=", 1)
    if not name or not value:
        raise ConfigError(f"{flag}: expected NAME=VALUE, got {text!r}")
    return name.strip(), value.strip()


def _load_workload(path: str, domain: Domain) -> QueryWorkload:
    W = load_cnf_workload(_require(path, "--workload"), domain)
    if W.m == 0:
        raise ConfigError("--workload: workload has no queries")
    return W


def _parse_init(text: str) -> tuple[str, str | None]:
    if text == "uniform":
        return "uniform", None
    if text.startswith("dataset:") and len(text) > len("dataset:"):
        return "dataset", text[len("dataset:"):]
    raise ConfigError(f"--init: expected 'uniform' or 'dataset:<path>', got {text!r}")


def _edge_writer(data: Dataset):
    return (lambda p: save_bin_edges(data.bin_edges, p)) if data.bin_edges else None


# ---------------------------------------------------------------- commands

def cmd_attack(args: argparse.Namespace) -> int:
    domain = _load_schema(args.schema)
    W = _load_workload(args.workload, domain)
    data = None
    if args.answers:
        answers = AnswerVector.from_csv(_require(args.answers, "--answers"))
        if len(answers) != W.m:
            raise ConfigError(f"--answers: {len(answers)} answers but the workload has {W.m} queries")
        source = "answers file"
    elif args.data:
        data = _load_data(args.data, domain, args.bin_edges)
        if data.n == 0:
            raise ConfigError("--data: no rows")
        answers = eval_workload(W, data)
        source = "computed from data"
    else:
        try:
            answers = published_answers(_require(args.workload, "--workload"), W)
        except SchemaError as exc:
            raise ConfigError(f"no --data or --answers given, and the workload has no usable counts ({exc})") from None
        source = "published counts"

    init, seed_path = _parse_init(args.init)
    seed_data = None
    if seed_path:
        edges = args.bin_edges or None
        if edges is None and data is not None and data.bin_edges:
            seed_data = ingest_csv(_require(seed_path, "--init"), domain, bin_edges=data.bin_edges)
        else:
            seed_data = _load_data(seed_path, domain, edges, "--init")

    opt = OptimizerConfig(lr=args.lr, max_epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    cfg = attack_mod.AttackConfig(runs=args.runs, draws=args.draws, optimizer=opt, init=init,
                                  n_rows=args.rows, seed=args.seed)
    jobs = args.jobs if args.jobs is not None else attack_mod.default_jobs()
    ranking = attack_mod.rap_rank(W, answers, cfg, seed_data=seed_data, jobs=jobs)

    prov = ranking.provenance
    writers = {"ranking.csv": ranking.to_csv, "answers.csv": answers.to_csv}
    if data is not None and _edge_writer(data):
        writers["bin_edges.json"] = _edge_writer(data)
    manifest = _manifest("attack", args, jobs=jobs, answers_source=source, queries=W.m,
                         attack_config=asdict(cfg), n_rows=prov["n_rows"],
                         runs_effective=prov["runs_effective"], run_metadata=prov["run_metadata"],
                         ranking_length=len(ranking))
    commit_outputs(args.out, writers, manifest)
    print(f"ranking of {len(ranking)} rows from {prov['runs_effective']}/{cfg.runs} runs -> {args.out}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    domain = _load_schema(args.schema)
    data = _load_data(args.data, domain, args.bin_edges)
    rng = np.random.default_rng(args.seed)
    writers: dict[str, Callable[[Path], None]] = {}
    extra: dict = {}

    if args.mode == "holdout":
        target, holdout = split_holdout(data, rng)
        writers["ranking_holdout.csv"] = baselines.baseline_ranking(holdout).to_csv
        writers["target.csv"] = target.to_csv
        writers["holdout.csv"] = holdout.to_csv
        extra = {"target_rows": target.n, "holdout_rows": holdout.n}

    elif args.mode == "hierarchy":
        if not args.target:
            raise ConfigError("--target COL=LABEL is required in hierarchy mode")
        col, label = _parse_assignment(args.target, "--target")
        if col not in domain.names:
            raise ConfigError(f"--target: unknown level {col!r}")
        if label not in domain.attributes[domain.attr_index(col)].labels:
            raise ConfigError(f"--target: level {col!r} has no unit {label!r}")
        # coarse-to-fine order comes from the schema; without one, from --levels
        order = list(domain.hierarchy)
        if args.levels:
            requested = [s.strip() for s in args.levels.split(",") if s.strip()]
        else:
            if col not in order:
                raise ConfigError(f"--target: {col!r} is not in the schema hierarchy; pass --levels")
            requested = [baselines.NATIONAL] + order[:order.index(col) + 1]
        for lvl in requested:
            if lvl != baselines.NATIONAL and lvl not in domain.names:
                raise ConfigError(f"--levels: unknown level {lvl!r}")
        if not order:
            order = [lvl for lvl in requested if lvl != baselines.NATIONAL]
        if col not in order:
            order.append(col)
        order = order[:order.index(col) + 1]
        for lvl in requested:
            if lvl != baselines.NATIONAL and lvl not in order:
                raise ConfigError(f"--levels: level {lvl!r} is not coarser than or equal to {col!r}")
        levels, target = baselines.hierarchy_baselines(data, order, {col: label}, rng)
        for lvl in requested:
            writers[f"ranking_{lvl}.csv"] = baselines.baseline_ranking(levels[lvl]).to_csv
        writers["target.csv"] = target.to_csv
        extra = {"levels": {lvl: levels[lvl].n for lvl in requested}, "target_rows": target.n}

    else:  # augment
        if not args.attr:
            raise ConfigError("--attr is required in augment mode")
        domain.attr_index(args.attr)
        if args.aux:
            aux = _load_data(args.aux, domain, args.bin_edges, "--aux")
            target = data
        else:
            target, aux = split_holdout(data, rng)
            writers["target.csv"] = target.to_csv
        augmented = baselines.augment_attribute(aux, target, args.attr, rng)
        writers["ranking_augmented.csv"] = baselines.baseline_ranking(augmented).to_csv
        extra = {"aux_rows": aux.n, "target_rows": target.n}

    if _edge_writer(data):
        writers["bin_edges.json"] = _edge_writer(data)
    commit_outputs(args.out, writers, _manifest("baseline", args, **extra))
    print(f"{args.mode} baseline: {', '.join(n for n in writers if n.startswith('ranking'))} -> {args.out}")
    return EXIT_OK


def _split_id(text: str, flag: str) -> tuple[str | None, str]:
    if "=" in text:
        return _parse_assignment(text, flag)
    return None, text


def cmd_evaluate(args: argparse.Namespace) -> int:
    domain = _load_schema(args.schema)
    if not args.target:
        raise ConfigError("--target is required")
    if not args.ranking:
        raise ConfigError("at least one --ranking is required")

    targets: dict[str, Dataset] = {}
    for item in args.target:
        tid, path = _split_id(item, "--target")
        tid = tid or Path(path).stem
        if tid in targets:
            raise ConfigError(f"--target: duplicate id {tid!r}")
        targets[tid] = _load_data(path, domain, args.bin_edges, "--target")
    holdouts: dict[str, Dataset] = {}
    for item in args.holdout or []:
        tid, path = _split_id(item, "--holdout")
        if tid is None:
            if len(targets) != 1:
                raise ConfigError("--holdout needs TARGET_ID=PATH when several targets are given")
            tid = next(iter(targets))
        if tid not in targets:
            raise ConfigError(f"--holdout: unknown target id {tid!r}")
        holdouts[tid] = _load_data(path, domain, args.bin_edges, "--holdout")
    if args.u_rule == "holdout":
        missing = [t for t in targets if t not in holdouts]
        if missing:
            raise ConfigError(f"--u-rule holdout: no --holdout for target(s) {missing}")

    curves = []
    by_method: dict[str, list[evaluation.MatchRateCurve]] = {}
    for item in args.ranking:
        name, path = _parse_assignment(item, "--ranking")
        method, _, tid = name.partition("@")
        if not tid:
            if len(targets) != 1:
                raise ConfigError(f"--ranking {name!r}: use METHOD@TARGET_ID=PATH with several targets")
            tid = next(iter(targets))
        if tid not in targets:
            raise ConfigError(f"--ranking {name!r}: unknown target id {tid!r}")
        ranking = attack_mod.ConfidenceRanking.from_csv(_require(path, "--ranking"), domain)
        target = targets[tid]
        u = evaluation.effective_u(target, holdouts.get(tid) if args.u_rule == "holdout" else None)
        curve = evaluation.match_rate_curve(ranking, target, u, method, tid)
        curves.append(curve)
        by_method.setdefault(method, []).append(curve)

    report = curves
    if args.average:
        grid = evaluation.default_grid(args.grid_points)
        report = [evaluation.average_curves(cs, grid, method) for method, cs in by_method.items()]

    summary = [evaluation.curve_summary(c) for c in report]
    commit_outputs(args.out, lambda stage: evaluation.emit_report(report, stage, title=args.title),
                   _manifest("evaluate", args, summary=summary))
    for s in summary:
        print(f"{s['method']} [{s['dataset']}]: match rate {s['at_half']:.3f} at k/u=0.5, "
              f"{s['at_one']:.3f} at k/u=1")
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--dims: expected comma-separated integers, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise ConfigError("--dims: cardinalities must be >= 1")
    return dims


def cmd_oracle(args: argparse.Namespace) -> int:
    dims = _parse_dims(args.dims)
    domain = Domain.from_cardinalities(dims)
    prior = bayes_oracle.DatasetPrior.uniform(domain, args.n)
    W = all_k_way_marginals(domain, args.k) if args.k > 0 else QueryWorkload(domain, [])

    if args.chi:
        key, value = _parse_assignment(args.chi, "--chi")
        if key != "row":
            raise ConfigError(f"--chi: only 'row=<labels>' is supported, got {key!r}")
        labels = [s.strip() for s in value.split(",")]
        if len(labels) != domain.d:
            raise ConfigError(f"--chi: row has {len(labels)} values, domain has {domain.d} attributes")
        try:
            row = [a.index(lab) for a, lab in zip(domain.attributes, labels)]
        except SchemaError as exc:
            raise ConfigError(f"--chi: {exc}") from None
    else:
        row = [c - 1 for c in dims]
    chi = bayes_oracle.contains_row(row)
    lhs, rhs, gap = bayes_oracle.verify_identity(prior, W, chi)

    # reference-ranking comparison on one dataset drawn from the prior
    rng = np.random.default_rng(args.seed)
    pick = int(rng.choice(len(prior.support), p=prior.probs))
    truth = prior.dataset(pick)
    observed = eval_workload(W, truth) if W.m else AnswerVector(np.zeros(0))
    post = bayes_oracle.exact_posterior(prior, W, observed)
    reference = bayes_oracle.posterior_membership_ranking(prior, W, observed)
    comparison: dict = {"true_rows": [list(map(int, r)) for r in truth.rows],
                        "identifiable": bool(np.isclose(post.max(), 1.0)),
                        "posterior_top": [list(map(int, r)) for r in reference.rows[:truth.u_unique]]}
    if W.m:
        cfg = attack_mod.AttackConfig(runs=args.runs, n_rows=args.n, seed=args.seed)
        ranking = attack_mod.rap_rank(W, observed, cfg)
        top_attack = {tuple(map(int, r)) for r in ranking.rows[:truth.u_unique]}
        top_ref = {tuple(map(int, r)) for r in reference.rows[:truth.u_unique]}
        comparison["attack_top"] = sorted(list(r) for r in top_attack)
        comparison["top_sets_agree"] = top_attack == top_ref

    report = {"instance": {"dims": list(dims), "n": args.n, "k": args.k, "queries": W.m,
                           "datasets": len(prior.support), "chi": {"both_contain_row": list(map(int, row))},
                           "seed": args.seed},
              "lhs": lhs, "rhs": rhs, "gap": gap, "comparison": comparison}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        commit_outputs(args.out, {"oracle.json": lambda p: p.write_text(text + "\n")})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raprank", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attack", help="reconstruct rows from aggregate answers and rank them")
    a.add_argument("--schema", required=True)
    a.add_argument("--workload", required=True)
    a.add_argument("--data", help="private data; answers are computed from it")
    a.add_argument("--answers", help="answer CSV (query_id,value) supplied instead of --data")
    a.add_argument("--bin-edges", help="JSON bin edges for numeric columns")
    a.add_argument("--init", default="uniform", help="'uniform' or 'dataset:<path>'")
    a.add_argument("--runs", type=int, default=100, help="independent projection runs K")
    a.add_argument("--draws", type=int, default=1, help="rounding draws per run")
    a.add_argument("--rows", type=int, default=None,
                   help="relaxed rows N' (default 1000, or the seed dataset size)")
    a.add_argument("--epochs", type=int, default=1000)
    a.add_argument("--lr", type=float, default=0.1)
    a.add_argument("--batch-size", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--jobs", type=int, default=None, help="worker processes (default $RECON_JOBS or 1)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("baseline", help="rank rows of auxiliary data by frequency")
    b.add_argument("--schema", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--mode", choices=["holdout", "hierarchy", "augment"], required=True)
    b.add_argument("--levels", help="comma-separated levels for hierarchy mode (may include 'national')")
    b.add_argument("--target", help="COL=LABEL naming the unit under attack (hierarchy mode)")
    b.add_argument("--attr", help="attribute to resample (augment mode)")
    b.add_argument("--aux", help="auxiliary data for augment mode (default: holdout half of --data)")
    b.add_argument("--bin-edges")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("evaluate", help="match-rate curves and report")
    e.add_argument("--schema", required=True)
    e.add_argument("--ranking", action="append", help="METHOD[@TARGET_ID]=PATH; repeatable")
    e.add_argument("--target", action="append", help="[ID=]PATH; repeatable")
    e.add_argument("--holdout", action="append", help="[TARGET_ID=]PATH; repeatable")
    e.add_argument("--u-rule", choices=["target", "holdout"], default="target",
                   help="'holdout' uses u = min(u, unique holdout rows)")
    e.add_argument("--average", action="store_true", help="average curves per method across targets")
    e.add_argument("--grid-points", type=int, default=100)
    e.add_argument("--bin-edges")
    e.add_argument("--title")
    e.add_argument("--seed", type=int, default=0, help="recorded for reproducibility; evaluation is exact")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle", help="exhaustive posterior identity check on a tiny domain")
    o.add_argument("--dims", default="2,2", help="attribute cardinalities")
    o.add_argument("--n", type=int, default=2, help="dataset size")
    o.add_argument("--k", type=int, default=1, help="marginal order of the workload (0 for none)")
    o.add_argument("--chi", help="row=<labels>: both datasets contain this row")
    o.add_argument("--runs", type=int, default=20, help="attack runs for the ranking comparison")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OptimizerAbort as exc:
        print(f"error: optimizer aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
