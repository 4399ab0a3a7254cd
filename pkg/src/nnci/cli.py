"""Command-line entry point.

``nnci run`` executes a whole experiment from a YAML config. The other
subcommands expose one pipeline stage each over files::

    nnci generate  -> dataset CSV
    nnci features  -> ybar0/ybar1 CSV
    nnci train     -> model checkpoint (+ history CSV)
    nnci evaluate  -> per-row effects CSV and error metrics
    nnci profile   -> performance-profile CSV
    nnci stats     -> FAR / Finner rank-report CSV
    nnci report    -> markdown summary of profile and rank-report files
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import CsvSchema, DataFormatError, SyntheticConfig, generate_synthetic, load_csv, save_csv
from .evalstats import (PerformanceMatrix, performance_profile, rank_report, read_profiles_csv,
                        write_profiles_csv, write_rank_report_csv)
from .experiment import ConfigError, load_config, read_commented_csv, run
from .losses import LossConfig
from .metrics import epsilon_ate, epsilon_pehe
from .models import ArchConfig, build, estimate_effects, load_model, save_model
from .neighbors import DistanceMetric, nnci_features, nnci_features_subsampled
from .train import Scaler, TrainConfig, fit, standardize

log = logging.getLogger("nnci")


class CliError(Exception):
    pass


def _schema(args) -> CsvSchema:
    cov = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    return CsvSchema(treatment=args.treatment, outcome=args.outcome, covariates=cov,
                     mu0=args.mu0, mu1=args.mu1, delimiter=args.delimiter)


def _add_schema_args(p):
    g = p.add_argument_group("CSV schema")
    g.add_argument("--treatment", default="t", help="treatment column (default: t)")
    g.add_argument("--outcome", default="y", help="factual outcome column (default: y)")
    g.add_argument("--covariates", default=None,
                   help="comma-separated covariate columns (default: all other columns)")
    g.add_argument("--mu0", default="mu0")
    g.add_argument("--mu1", default="mu1")
    g.add_argument("--delimiter", default=",")


def _file_hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- subcommands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    ds = generate_synthetic(SyntheticConfig(args.n, args.sigma_z0, args.sigma_z1, args.seed))
    save_csv(ds, args.out)
    print(f"wrote {ds.n} rows to {args.out}")
    return 0


def cmd_features(args) -> int:
    schema = _schema(args)
    ref = load_csv(args.data, schema)
    query = load_csv(args.query, schema) if args.query else ref
    exclude = args.exclude_self if args.exclude_self is not None else args.query is None
    if args.raw_scale:
        qX, rds = query.X, ref
    else:
        scaler = Scaler.fit(ref)
        qX, rds = scaler.transform_X(query.X), ref.replace(X=scaler.transform_X(ref.X))
    if args.subsample:
        feats = nnci_features_subsampled(qX, rds, args.k, args.metric, args.subsample, args.seed,
                                         exclude_self=exclude)
    else:
        feats = nnci_features(qX, rds, args.k, args.metric, exclude_self=exclude)
    feats.to_csv(args.out)
    print(f"wrote features for {len(feats)} rows to {args.out}")
    return 0


def _load_section(path, key):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh) or {}
    return d.get(key, {}) or {}


def cmd_train(args) -> int:
    train = load_csv(args.data, _schema(args))
    nn = not args.baseline
    scaler, train_s = standardize(train)
    loss_cfg = LossConfig(**_load_section(args.config, "loss"))
    train_kw = _load_section(args.config, "train")
    train_kw.update({k: v for k, v in (("max_epochs", args.max_epochs), ("seed", args.seed)) if v is not None})
    train_cfg = TrainConfig(**train_kw)
    arch = ArchConfig(family=args.family, use_neighbor_features=nn, **_load_section(args.config, "arch"))
    feats = nnci_features(train_s.X, train_s, args.k, args.metric, exclude_self=True) if nn else None
    model = build(arch, train.d, seed=args.seed or 0)
    _, history = fit(model, train_s, feats, loss_cfg, train_cfg)
    if args.history:
        history.to_csv(args.history)
    extra = {"scaler": scaler.to_dict(), "k": args.k,
             "metric": DistanceMetric.parse(args.metric).value if nn else None,
             "loss": loss_cfg.to_dict(), "train": train_cfg.to_dict()}
    extra["config_hash"] = _file_hash(arch.to_dict(), extra)
    save_model(model, args.out, extra)
    print(f"saved {arch.family} model ({'neighbor' if nn else 'baseline'} variant) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model, extra = load_model(args.model)
    schema = _schema(args)
    train = load_csv(args.train, schema)
    test = load_csv(args.test, schema)
    scaler = Scaler.from_dict(extra["scaler"])
    test_X = scaler.transform_X(test.X)
    feats = None
    if model.arch.use_neighbor_features:
        ref = scaler.transform(train)
        feats = nnci_features(test_X, ref, int(extra["k"]), extra["metric"], exclude_self=False)
    _, ite_s = estimate_effects(model, test_X, feats)
    ite = scaler.inverse_effect(ite_s)
    result = {"n": test.n, "ate_hat": float(np.mean(ite))}
    if test.has_ground_truth:
        result.update(eps_ate=epsilon_ate(test.mu1, test.mu0, ite),
                      eps_pehe=epsilon_pehe(test.mu1, test.mu0, ite))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash={extra.get('config_hash', '')}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", "ite_hat"] + (["true_ite"] if test.has_ground_truth else []))
            for i, v in enumerate(ite):
                row = [i, repr(float(v))]
                if test.has_ground_truth:
                    row.append(repr(float(test.mu1[i] - test.mu0[i])))
                wr.writerow(row)
    print(json.dumps(result, indent=2))
    return 0


def _matrix(path, metric: str):
    """Performance matrix from a long scores.csv or a wide problem x model CSV."""
    rows, chash = read_commented_csv(path)
    if not rows:
        raise CliError(f"{path}: no data rows")
    cols = list(rows[0].keys())
    if "model" in cols and "realization" in cols:
        if metric not in cols:
            raise CliError(f"{path}: no column {metric!r}")
        return PerformanceMatrix.from_long(rows, "realization", "model", metric), chash
    problem_col, models = cols[0], cols[1:]
    scores = [[float(r[m]) for m in models] for r in rows]
    return PerformanceMatrix(np.array(scores), tuple(models), tuple(r[problem_col] for r in rows)), chash


def cmd_profile(args) -> int:
    m, chash = _matrix(args.scores, args.metric)
    curves = performance_profile(m, n_points=args.points)
    write_profiles_csv(curves, args.out, f"config_hash={chash or _file_hash(str(args.scores))}")
    print(f"wrote profiles for {m.n_models} models over {m.n_problems} problems to {args.out}")
    return 0


def cmd_stats(args) -> int:
    m, chash = _matrix(args.scores, args.metric)
    rep = rank_report(m, args.alpha)
    write_rank_report_csv(rep, args.out, f"config_hash={chash or _file_hash(str(args.scores))}")
    print(f"FAR statistic {rep.statistic:.6g}, p = {rep.p_value:.6g}; control: {rep.control}")
    for mid, far, p, decision in rep.rows():
        print(f"  {mid:32s} {far:10.2f}  {'-' if p is None else f'{p:.6f}':>10s}  {decision or '-'}")
    return 0


def _hash_of(path) -> str:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return first.split("config_hash=", 1)[1].strip() if "config_hash=" in first else ""


def cmd_report(args) -> int:
    profiles = list(args.profiles or [])
    ranks = list(args.ranks or [])
    if args.run_dir:
        d = Path(args.run_dir)
        profiles += sorted(str(p) for p in d.glob("profile_*.csv"))
        ranks += sorted(str(p) for p in d.glob("ranks_*.csv"))
    if not profiles and not ranks:
        raise CliError("nothing to report: pass --run-dir or --profiles/--ranks")
    hashes = {p: _hash_of(p) for p in profiles + ranks}
    distinct = set(hashes.values())
    if len(distinct) > 1:
        detail = ", ".join(f"{Path(p).name}={h or '?'}" for p, h in hashes.items())
        raise CliError(f"refusing to mix files from different configurations: {detail}")
    lines = ["# Experiment report", "", f"config hash: `{distinct.pop() if distinct else ''}`", ""]
    for path in ranks:
        rows, _ = read_commented_csv(path)
        lines += [f"## Rank test: {Path(path).stem}", "", "| Model | FAR | p_F-value | H0 |",
                  "|---|---:|---:|---|"]
        lines += [f"| {r['Model']} | {r['FAR']} | {r['p_F-value']} | {r['H0']} |" for r in rows]
        lines.append("")
    for path in profiles:
        curves = read_profiles_csv(path)
        lines += [f"## Performance profile: {Path(path).stem}", "",
                  "| Model | rho(tau=1) | rho at median tau | tau where rho = 1 |", "|---|---:|---:|---:|"]
        for c in curves:
            mid = len(c.tau) // 2
            full = c.tau[np.argmax(c.rho >= 1.0)] if np.any(c.rho >= 1.0) else float("nan")
            lines.append(f"| {c.model_id} | {c.rho[0]:.3f} | {c.rho[mid]:.3f} | {full:.4g} |")
        lines.append("")
    Path(args.out).write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def _parse_override(s: str):
    if "=" not in s:
        raise CliError(f"--set expects key=value, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), yaml.safe_load(v)


def cmd_run(args) -> int:
    overrides = dict(_parse_override(s) for s in args.set or [])
    for key, val in (("output_dir", args.output_dir), ("seed", args.seed), ("k", args.k),
                     ("dataset.realizations", args.realizations), ("dataset.n", args.n)):
        if val is not None:
            overrides[key] = val
    if args.allow_many:
        overrides["allow_many_realizations"] = True
    cfg = load_config(args.config, overrides)
    meta = run(cfg, workers=args.workers)
    n_fail = len(meta["failures"])
    print(f"config hash {meta['config_hash']}; artifacts in {cfg.output_dir}"
          + (f"; {n_fail} failure(s), see failures.csv" if n_fail else ""))
    return 1 if n_fail else 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnci", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a full experiment from a YAML config")
    s.add_argument("--config", "-c", help="YAML config file (defaults apply to missing keys)")
    s.add_argument("--output-dir", "-o")
    s.add_argument("--seed", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--realizations", type=int)
    s.add_argument("--n", type=int, help="synthetic sample size")
    s.add_argument("--workers", type=int, help="parallel realizations (processes)")
    s.add_argument("--allow-many", action="store_true",
                   help="permit more than 50 synthetic realizations")
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.max_epochs=50")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("generate", help="write a synthetic dataset CSV")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma-z0", type=float, default=3.0)
    s.add_argument("--sigma-z1", type=float, default=5.0)
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("features", help="compute neighbor outcome features")
    s.add_argument("--data", required=True, help="reference dataset CSV")
    s.add_argument("--query", help="query rows CSV (default: the reference rows)")
    s.add_argument("--k", type=int, default=11)
    s.add_argument("--metric", default="euclidean", choices=[m.value for m in DistanceMetric])
    s.add_argument("--exclude-self", dest="exclude_self", action="store_true", default=None,
                   help="a row may not be its own neighbor (default when --query is absent)")
    s.add_argument("--include-self", dest="exclude_self", action="store_false")
    s.add_argument("--raw-scale", action="store_true", help="search on unstandardized covariates")
    s.add_argument("--subsample", type=int, help="per-group reference sample size m")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", "-o", required=True)
    _add_schema_args(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train one model on a training CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--family", choices=["dragonnet", "tarnet", "nednet"], default="dragonnet")
    s.add_argument("--baseline", action="store_true", help="train without neighbor features")
    s.add_argument("--metric", default="euclidean", choices=[m.value for m in DistanceMetric])
    s.add_argument("--k", type=int, default=11)
    s.add_argument("--config", help="YAML file with optional loss/train/arch sections")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--history", help="write the per-epoch history CSV here")
    s.add_argument("--out", "-o", required=True)
    _add_schema_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="estimate effects on a test CSV with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--train", required=True, help="training CSV (neighbor reference set)")
    s.add_argument("--test", required=True)
    s.add_argument("--out", "-o")
    _add_schema_args(s)
    s.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("profile", cmd_profile, "performance profiles from scores"),
                                 ("stats", cmd_stats, "FAR test and Finner post-hoc from scores")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--scores", required=True,
                       help="scores.csv (long) or a wide CSV: problem column then one column per model")
        s.add_argument("--metric", default="eps_pehe", help="score column of a long file")
        s.add_argument("--out", "-o", required=True)
        if name == "profile":
            s.add_argument("--points", type=int, default=200)
        else:
            s.add_argument("--alpha", type=float, default=0.05)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="combine profile and rank-report CSVs into markdown")
    s.add_argument("--run-dir")
    s.add_argument("--profiles", nargs="*")
    s.add_argument("--ranks", nargs="*")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"nnci {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
