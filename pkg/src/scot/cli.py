"""Command-line entry point: gencity, train, diagnose, eval and gradcheck."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (content_hash, file_hash, git_describe, read_manifest, read_matrix, read_params,
                        write_manifest, write_matrix, write_params)
from .citydata import gen_twin_cities, load_city, read_truth, write_city, write_truth
from .encoder import EncoderParams, encode
from .errors import ArtifactNotFound, InputError, ScotError
from .evaluation import matching_metrics, ridge_fit, transfer_metrics
from .hub import hub_usage_diagnostics
from .sinkhorn import coupling_diagnostics
from .trainer import (GRADCHECK_COMPONENTS, TrainConfig, gradcheck, gradcheck_failures, parse_config_text,
                      train_multi, train_single)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise InputError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(rows, header, fh=None):
    w = csv.writer(fh or sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _fmt(x):
    return format(float(x), ".6g")


def cmd_gencity(args):
    out = _prepare_out(args.out, args.force)
    truth = gen_twin_cities(args.seed, args.ns, args.nt, noise_sigma=args.noise, drop_frac=args.drop)
    write_city(truth.source, out / "source")
    write_city(truth.target, out / "target")
    write_truth(truth, out / "truth.csv")
    matched = int(truth.matched.sum())
    print(f"wrote {out}: source n={truth.source.n}, target n={truth.target.n}, matched={matched}")
    return 0


def _load_config(path):
    if path is None:
        return TrainConfig()
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFound(f"config file {path} does not exist")
    return TrainConfig.from_overrides(parse_config_text(path.read_text()))


def cmd_train(args):
    config = _load_config(args.config)
    if args.seed is not None:
        config = TrainConfig.from_overrides({"seed": args.seed}, base=config)
    if args.mode == "single" and len(args.source) != 1:
        raise InputError(f"single mode takes exactly one --source, got {len(args.source)}")
    sources = [load_city(p, f"source{i}") for i, p in enumerate(args.source)]
    target = load_city(args.target, "target")
    out = _prepare_out(args.out, args.force)
    started = _now()

    if args.mode == "single":
        result = train_single(sources[0], target, config)
        write_matrix(result.couplings[0].P, out / "P.csv")
        couplings = ["P.csv"]
    else:
        result = train_multi(sources, target, config)
        couplings = []
        for i, c in enumerate(result.couplings):
            name = f"Pi_{i}.csv"
            write_matrix(c.P, out / name)
            couplings.append(name)
        write_matrix(np.array(result.hub_mass), out / "hub_mass.csv")
        write_matrix(np.array(result.b_history), out / "hub_prior.csv")

    result.record.to_csv(out / "record.csv")
    result.record.timing_to_csv(out / "timing.csv")
    write_params(result.parameter_blocks(), out / "params.bin")

    deterministic = {
        "command": "train",
        "mode": args.mode,
        "config": asdict(config),
        "sources": [str(p) for p in args.source],
        "target": str(args.target),
    }
    manifest = dict(deterministic)
    manifest.update(
        version=__version__,
        seed=config.seed,
        out=str(out),
        couplings=couplings,
        git_describe=git_describe(),
        started=started,
        finished=_now(),
        run_hash=content_hash(deterministic),
        record_sha256=file_hash(out / "record.csv"),
        params_sha256=file_hash(out / "params.bin"),
    )
    write_manifest(manifest, out / "manifest.json")
    last = result.record.rows[-1]
    print(f"trained {args.mode} for {config.epochs} epochs; final total={_fmt(last['total'])}; wrote {out}")
    return 0


def _diag_rows(name, P):
    d = coupling_diagnostics(P)
    return [name, _fmt(d["q_max"]), _fmt(d["q_ent_normalized"]), _fmt(d["total_mass"]),
            int(np.sum(d["zero_rows"])), int(np.sum(d["zero_cols"]))]


def cmd_diagnose(args):
    if args.hub:
        if args.run is None:
            raise InputError("--hub needs --run <dir>")
        manifest = read_manifest(args.run)
        if manifest.get("mode") != "multi":
            raise InputError(f"run {args.run} is not a multi-source run")
        rows = []
        for name in manifest["couplings"]:
            P = read_matrix(Path(args.run) / name)
            h = hub_usage_diagnostics(P)
            d = coupling_diagnostics(P)
            rows.append([name, _fmt(d["q_max"]), _fmt(d["q_ent_normalized"]), _fmt(d["total_mass"]),
                         _fmt(h["normalized_entropy"]), _fmt(h["effective_count"])])
        _emit(rows, ["coupling", "q_max", "q_ent_norm", "total_mass", "usage_entropy_norm", "effective_K"])
        return 0
    paths = [Path(args.coupling)] if args.coupling else []
    if args.run and not paths:
        manifest = read_manifest(args.run)
        paths = [Path(args.run) / n for n in manifest["couplings"]]
    if not paths:
        raise InputError("diagnose needs --coupling <csv> or --run <dir>")
    _emit([_diag_rows(p.name, read_matrix(p)) for p in paths],
          ["coupling", "q_max", "q_ent_norm", "total_mass", "zero_rows", "zero_cols"])
    return 0


def run_embeddings(run_dir):
    """Rebuild final embeddings of a run from its parameters and city directories."""
    manifest = read_manifest(run_dir)
    blocks = read_params(Path(run_dir) / "params.bin")
    leak = manifest["config"]["leak"]
    dirs = list(manifest["sources"]) + [manifest["target"]]
    cities = [load_city(p) for p in dirs]
    zs = []
    for i, g in enumerate(cities):
        if f"H0_{i}" not in blocks:
            raise ArtifactNotFound(f"params.bin has no block H0_{i}")
        zs.append(encode(EncoderParams(blocks[f"H0_{i}"], blocks[f"W_{i}"], leak), g))
    return manifest, cities, zs


def cmd_eval(args):
    manifest, cities, zs = run_embeddings(args.run)
    sources, target = cities[:-1], cities[-1]
    tasks = args.task or sorted(target.labels)
    rows = []
    for task in tasks:
        missing = [g.city_id for g in cities if task not in g.labels]
        if missing:
            raise InputError(f"task {task!r} has no labels in {', '.join(missing)}")
        Z = np.vstack(zs[:-1])
        y = np.concatenate([g.labels[task] for g in sources])
        model = ridge_fit(Z, y, alpha=args.alpha)
        m = transfer_metrics(model, zs[-1], target.labels[task])
        rows.append([task, _fmt(m["mae"]), _fmt(m["mape"]), m["mape_excluded"]])
    _emit(rows, ["task", "mae", "mape", "mape_excluded"])
    if args.truth:
        if manifest["mode"] != "single":
            raise InputError("--truth matching is defined for single-source runs only")
        P = read_matrix(Path(args.run) / "P.csv")
        mm = matching_metrics(P, read_truth(args.truth))
        _emit([[_fmt(mm["top1_acc"]), _fmt(mm["mean_true_mass_ratio"]), mm["ties"], mm["n_matched"]]],
              ["top1_acc", "true_mass_lift", "ties", "n_matched"])
    return 0


def cmd_gradcheck(args):
    report = gradcheck(args.component, seed=args.seed, zero=args.zero)
    rows = [[comp, block, format(err, ".3e")] for comp, blocks in report.items() for block, err in blocks.items()]
    _emit(rows, ["component", "block", "rel_error"])
    failed = gradcheck_failures(report, args.threshold)
    if failed:
        print(f"gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors: exit 1 rather than argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="scot", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gencity", help="generate a synthetic twin-city pair with ground truth")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ns", type=int, default=20)
    g.add_argument("--nt", type=int, default=20)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--drop", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gencity)

    t = sub.add_parser("train", help="train single-source or hub alignment")
    t.add_argument("--mode", choices=("single", "multi"), default="single")
    t.add_argument("--source", nargs="+", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--config", help="flat key=value file overriding defaults")
    t.add_argument("--seed", type=int, help="shortcut for seed=<n> in the config")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("diagnose", help="coupling sharpness and hub usage diagnostics")
    d.add_argument("--coupling")
    d.add_argument("--run")
    d.add_argument("--hub", action="store_true")
    d.set_defaults(func=cmd_diagnose)

    e = sub.add_parser("eval", help="ridge transfer MAE/MAPE and optional matching accuracy")
    e.add_argument("--run", required=True)
    e.add_argument("--task", action="append")
    e.add_argument("--alpha", type=float, default=1.0)
    e.add_argument("--truth")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    c.add_argument("--component", default="all", choices=("all",) + GRADCHECK_COMPONENTS)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--zero", action="store_true", help="evaluate at all-zero inputs")
    c.add_argument("--threshold", type=float, default=1e-3)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    raw = os.environ.get("SCOT_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"SCOT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"SCOT_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ScotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
