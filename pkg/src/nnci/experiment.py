"""Multi-realization experiments: config, seeding, pipeline and artifacts.

Seeds
-----
Every random stream is derived from the master seed by a counter scheme:
``numpy.random.SeedSequence([master, realization, stream]).generate_state(1)[0]``
with stream ids ``data=0, split=1, init=2, train=3, subsample=4``. Models in the
same realization share the split, the initialization seed and the training
seed, so baselines and neighbor variants see identical data and budgets.
"""
from __future__ import annotations

import copy
import csv
import glob as globmod
import hashlib
import json
import logging
import os
import platform
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .data import CsvSchema, SyntheticConfig, generate_synthetic, load_csv, split
from .evalstats import (PerformanceMatrix, performance_profile, rank_report, write_profiles_csv,
                        write_rank_report_csv, ZERO_SHIFT)
from .losses import LossConfig
from .metrics import epsilon_ate, epsilon_pehe
from .models import FAMILIES, ArchConfig, build, estimate_effects, model_label
from .neighbors import DistanceMetric, nnci_features, nnci_features_subsampled
from .train import TrainConfig, fit, standardize

__all__ = [
    "DEFAULT_CONFIG",
    "ModelSpec",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "config_hash",
    "derive_seed",
    "run",
    "SCORE_COLUMNS",
]

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "split": 1, "init": 2, "train": 3, "subsample": 4}
SCORE_COLUMNS = ["realization", "model", "eps_ate", "eps_pehe", "sqrt_eps_pehe"]
METRIC_COLUMNS = ("eps_ate", "eps_pehe")
REALIZATION_CAP = 50

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "dataset": {
        "kind": "synthetic",
        "n": 2500,
        "realizations": 10,
        "sigma_z0": 3.0,
        "sigma_z1": 5.0,
        "glob": None,
        "schema": {"treatment": "t", "outcome": "y", "covariates": None, "mu0": "mu0", "mu1": "mu1",
                   "delimiter": ","},
    },
    "split_fraction": 0.9,
    "k": 11,
    "exclude_self": True,
    "standardize_covariates": True,
    "subsample": None,
    "models": [
        {"family": "dragonnet", "nn_variant": False},
        {"family": "dragonnet", "nn_variant": True, "metric": "euclidean"},
        {"family": "dragonnet", "nn_variant": True, "metric": "manhattan"},
        {"family": "dragonnet", "nn_variant": True, "metric": "chebyshev"},
    ],
    "loss": {"alpha": 1.0, "beta": 1.0, "epsilon_init": 0.0, "g_clip": 0.01, "propensity_loss": "bce"},
    "train": TrainConfig().to_dict(),
    "arch": {"rep_layers": [200, 200, 200], "head_layers": [100, 100], "head_l2": 0.01,
             "init_scheme": "glorot-uniform"},
    "alpha_sig": 0.05,
    "allow_many_realizations": False,
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "schema":
            out[k] = _merge(base[k], v, f"{path}{k}.")
        elif k == "schema" and isinstance(v, dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ModelSpec:
    family: str
    nn_variant: bool = True
    metric: Optional[str] = "euclidean"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.nn_variant:
            object.__setattr__(self, "metric", DistanceMetric.parse(self.metric or "euclidean").value)
        else:
            object.__setattr__(self, "metric", None)

    @property
    def label(self) -> str:
        return model_label(self.family, self.nn_variant, self.metric)


@dataclass
class ExperimentConfig:
    raw: dict
    models: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Optional[dict] = None) -> "ExperimentConfig":
        merged = _merge(DEFAULT_CONFIG, d or {})
        models = []
        for m in merged["models"]:
            if not isinstance(m, dict):
                raise ConfigError("each model entry must be a mapping")
            unknown = set(m) - {"family", "nn_variant", "metric"}
            if unknown:
                raise ConfigError(f"unknown model keys {sorted(unknown)}")
            models.append(ModelSpec(m["family"], bool(m.get("nn_variant", True)), m.get("metric")))
        if not models:
            raise ConfigError("at least one model is required")
        labels = [m.label for m in models]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate models in the model list")
        ds = merged["dataset"]
        if ds["kind"] not in ("synthetic", "csv"):
            raise ConfigError("dataset.kind must be 'synthetic' or 'csv'")
        if ds["kind"] == "synthetic":
            if int(ds["realizations"]) < 1:
                raise ConfigError("dataset.realizations must be at least 1")
            if int(ds["realizations"]) > REALIZATION_CAP and not merged["allow_many_realizations"]:
                raise ConfigError(f"more than {REALIZATION_CAP} synthetic realizations requested; "
                                  "set allow_many_realizations (or pass --allow-many) to confirm")
        elif not ds.get("glob"):
            raise ConfigError("dataset.glob is required for csv datasets")
        if int(merged["k"]) < 1:
            raise ConfigError("k must be at least 1")
        if not 0 < float(merged["split_fraction"]) < 1:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")
        # validate nested sections eagerly so errors surface before any training
        try:
            LossConfig(**merged["loss"])
            TrainConfig(**merged["train"])
            ArchConfig(family="dragonnet", **merged["arch"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(merged, models)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(**self.raw["loss"])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.raw["train"], "seed": int(seed)})

    def arch(self, spec: ModelSpec) -> ArchConfig:
        return ArchConfig(family=spec.family, use_neighbor_features=spec.nn_variant, **self.raw["arch"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def problems(self) -> list:
        """Realization ids paired with their source (synthetic index or file path)."""
        ds = self.raw["dataset"]
        if ds["kind"] == "synthetic":
            return [(r, None) for r in range(int(ds["realizations"]))]
        files = sorted(globmod.glob(ds["glob"]))
        if not files:
            raise ConfigError(f"no files match {ds['glob']!r}")
        return list(enumerate(files))

    def hash(self) -> str:
        return config_hash(self.raw)


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    d = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = d
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


def config_hash(raw: dict) -> str:
    # output_dir and workers do not change results
    relevant = {k: v for k, v in raw.items() if k not in ("output_dir", "workers")}
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(master: int, realization: int, stream: str) -> int:
    ss = np.random.SeedSequence([int(master), int(realization), STREAMS[stream]])
    return int(ss.generate_state(1)[0])


# -- one realization --------------------------------------------------------------

def _load_problem(cfg: ExperimentConfig, r: int, source):
    ds_cfg = cfg.raw["dataset"]
    if ds_cfg["kind"] == "synthetic":
        return generate_synthetic(SyntheticConfig(
            n=int(ds_cfg["n"]), sigma_z0=float(ds_cfg["sigma_z0"]), sigma_z1=float(ds_cfg["sigma_z1"]),
            seed=derive_seed(cfg.raw["seed"], r, "data")))
    schema = CsvSchema(**{**ds_cfg["schema"], "require_ground_truth": True})
    return load_csv(source, schema)


def _features(cfg: ExperimentConfig, train_s, test_s, metric: str, r: int):
    k = int(cfg.raw["k"])
    m = cfg.raw.get("subsample")
    exclude = bool(cfg.raw["exclude_self"])
    if m:
        seed = derive_seed(cfg.raw["seed"], r, "subsample")
        f_tr = nnci_features_subsampled(train_s.X, train_s, k, metric, int(m), seed, exclude_self=exclude)
        f_te = nnci_features_subsampled(test_s.X, train_s, k, metric, int(m), seed)
    else:
        f_tr = nnci_features(train_s.X, train_s, k, metric, exclude_self=exclude)
        f_te = nnci_features(test_s.X, train_s, k, metric, exclude_self=False)
    return f_tr, f_te


def run_realization(cfg: ExperimentConfig, r: int, source=None) -> dict:
    """Train and score every configured model on realization ``r``.

    Failures are caught per model and returned, never raised.
    """
    out = {"realization": r, "rows": [], "failures": [], "source": None if source is None else str(source)}
    master = cfg.raw["seed"]
    try:
        ds = _load_problem(cfg, r, source)
        if not ds.has_ground_truth:
            raise ValueError("dataset has no mu0/mu1 ground truth")
        train, test = split(ds, float(cfg.raw["split_fraction"]), derive_seed(master, r, "split"))
        scaler, train_s = standardize(train)
        test_s = scaler.transform(test)
        if not cfg.raw["standardize_covariates"]:
            # neighbor search and networks on raw covariates, outcomes still scaled
            train_s = train_s.replace(X=train.X)
            test_s = test_s.replace(X=test.X)
    except Exception as exc:  # noqa: BLE001 - recorded, run continues
        out["failures"].append({"realization": r, "model": "*", "stage": "data",
                                "error": f"{type(exc).__name__}: {exc}"})
        return out
    features = {}
    for spec in cfg.models:
        stage = "features"
        try:
            feats_tr = feats_te = None
            if spec.nn_variant:
                if spec.metric not in features:
                    features[spec.metric] = _features(cfg, train_s, test_s, spec.metric, r)
                feats_tr, feats_te = features[spec.metric]
            stage = "train"
            model = build(cfg.arch(spec), train_s.d, seed=derive_seed(master, r, "init"))
            fit(model, train_s, feats_tr, cfg.loss, cfg.train_config(derive_seed(master, r, "train")))
            stage = "evaluate"
            _, ite_s = estimate_effects(model, test_s.X, feats_te)
            ite = scaler.inverse_effect(ite_s)
            e_ate = epsilon_ate(test.mu1, test.mu0, ite)
            e_pehe = epsilon_pehe(test.mu1, test.mu0, ite)
            out["rows"].append({"realization": r, "model": spec.label, "eps_ate": e_ate,
                                "eps_pehe": e_pehe, "sqrt_eps_pehe": float(np.sqrt(e_pehe))})
        except Exception as exc:  # noqa: BLE001
            log.warning("realization %d, %s failed at %s: %s", r, spec.label, stage, exc)
            out["failures"].append({"realization": r, "model": spec.label, "stage": stage,
                                    "error": f"{type(exc).__name__}: {exc}",
                                    "trace": traceback.format_exc(limit=3)})
    return out


# -- artifacts ------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_scores_csv(rows, path, chash: str) -> None:
    lines = [f"# config_hash={chash}", ",".join(SCORE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in SCORE_COLUMNS))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_commented_csv(path):
    """Rows of a CSV written by this package, plus its ``config_hash`` (or None)."""
    chash = None
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if "config_hash=" in line:
                chash = line.split("config_hash=", 1)[1].strip()
            continue
        body.append(line)
    return list(csv.DictReader(body)), chash


def comparison_blocks(cfg: ExperimentConfig) -> dict:
    """Family -> model labels (baseline plus its neighbor variants), plus ``all``."""
    blocks = {}
    for spec in cfg.models:
        blocks.setdefault(spec.family, []).append(spec.label)
    blocks = {k: v for k, v in blocks.items() if len(v) >= 2}
    labels = [s.label for s in cfg.models]
    if len(labels) >= 2 and list(blocks.values()) != [labels]:
        blocks["all"] = labels
    return blocks


def write_analysis(rows, blocks: dict, out_dir: Path, chash: str, alpha_sig: float) -> dict:
    """Profiles and rank reports per metric and block; returns a summary for metadata."""
    summary = {}
    comment = f"config_hash={chash}"
    for metric in METRIC_COLUMNS:
        for block, labels in blocks.items():
            key = f"{metric}_{block}"
            try:
                m = PerformanceMatrix.from_long(
                    [r for r in rows if r["model"] in labels], "realization", "model", metric).select(labels)
            except (ValueError, KeyError) as exc:
                summary[key] = f"skipped: {exc}"
                continue
            if m.n_problems < 1:
                summary[key] = "skipped: no complete realizations"
                continue
            write_profiles_csv(performance_profile(m), out_dir / f"profile_{key}.csv", comment)
            if m.n_problems < 2:
                summary[key] = "profile only: rank tests need at least 2 realizations"
                continue
            rep = rank_report(m, alpha_sig)
            write_rank_report_csv(rep, out_dir / f"ranks_{key}.csv", comment)
            summary[key] = {"problems": m.n_problems, "statistic": rep.statistic, "p_value": rep.p_value,
                            "control": rep.control}
    return summary


def run(cfg: ExperimentConfig, workers: Optional[int] = None) -> dict:
    """Run the experiment and write all artifacts to ``cfg.output_dir``.

    Returns the metadata dictionary (also written to ``metadata.json``).
    """
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    problems = cfg.problems()
    workers = int(workers if workers is not None else cfg.raw.get("workers", 1) or 1)
    started = time.time()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_realization, [cfg] * len(problems),
                                    [r for r, _ in problems], [s for _, s in problems]))
    else:
        results = []
        for r, source in problems:
            log.info("realization %d/%d", r + 1, len(problems))
            results.append(run_realization(cfg, r, source))
    results.sort(key=lambda res: res["realization"])
    rows = [row for res in results for row in res["rows"]]
    failures = [f for res in results for f in res["failures"]]

    write_scores_csv(rows, out_dir / "scores.csv", chash)
    if failures:
        lines = [f"# config_hash={chash}", "realization,model,stage,error"]
        for f in failures:
            lines.append(",".join([str(f["realization"]), f["model"], f["stage"],
                                   '"' + f["error"].replace('"', "'") + '"']))
        _atomic_write(out_dir / "failures.csv", "\n".join(lines) + "\n")
    analysis = write_analysis(rows, comparison_blocks(cfg), out_dir, chash, float(cfg.raw["alpha_sig"]))
    metadata = {
        "config_hash": chash,
        "config": cfg.raw,
        "models": [s.label for s in cfg.models],
        "seed_scheme": "SeedSequence([master, realization, stream]).generate_state(1)[0]; streams "
                       + json.dumps(STREAMS),
        "seeds": {str(r): {s: derive_seed(cfg.raw["seed"], r, s) for s in STREAMS} for r, _ in problems},
        "sources": {str(res["realization"]): res["source"] for res in results if res["source"]},
        "decisions": {
            "neighbor_exclude_self_on_train": bool(cfg.raw["exclude_self"]),
            "test_features_reference": "training rows only",
            "neighbor_tie_break": "lowest reference index",
            "covariates_standardized": bool(cfg.raw["standardize_covariates"]),
            "outcome_scaling": "train mean / population std; ybar scaled with it",
            "propensity_clip_in_fluctuation": cfg.raw["loss"]["g_clip"],
            "propensity_loss": "binary cross-entropy",
            "init": cfg.raw["arch"]["init_scheme"] + ", zero biases",
            "l2_applies_to": "outcome-head hidden layers (weights only)",
            "eps_pehe": "mean squared ITE error (no root); sqrt_eps_pehe is derived",
            "profile_zero_shift": f"{ZERO_SHIFT:g} x row maximum, rows containing a zero only",
            "alpha_sig": cfg.raw["alpha_sig"],
        },
        "analysis": analysis,
        "failures": failures,
        "partial": bool(failures),
        "versions": {"nnci": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "elapsed_seconds": round(time.time() - started, 3),
    }
    _atomic_write(out_dir / "metadata.json", json.dumps(metadata, indent=2, default=str) + "\n")
    return metadata
