"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtimes are measured around the code under test, excluding the reference
oracles. The long-running criteria (4, 8, 9) are marked ``slow``.
"""
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from nnci.data import Dataset, SyntheticConfig, generate_synthetic, split
from nnci.evalstats import PerformanceMatrix, far_test, performance_profile, rank_report
from nnci.experiment import ExperimentConfig, read_commented_csv, run
from nnci.losses import LossConfig, dragonnet_objective, outcome_mse, targeted_term, total_objective
from nnci.models import ArchConfig, build, estimate_effects
from nnci.neighbors import InsufficientNeighborsError, nnci_features
from nnci.train import TrainConfig, fit, fit_two_stage, standardize
import nnci.train as train_module
from conftest import record_acceptance, small_batch, small_model
from golden import GOLDEN_AVG_RANKS, GOLDEN_FINNER, GOLDEN_MATRIX, GOLDEN_P, GOLDEN_STATISTIC
from oracles import (cdist_knn_average, central_differences, relative_error, synthetic_ate_closed_form)

METRICS = ("euclidean", "manhattan", "chebyshev")


def test_criterion_1_knn_oracle_equivalence():
    rng = np.random.default_rng(1)
    elapsed = 0.0
    mismatches = checked = 0
    for inst in range(200):
        n = int(rng.integers(2, 201))
        d = int(rng.integers(1, 11))
        k = int(rng.choice([1, 3, 11]))
        metric = METRICS[inst % 3]
        exclude = bool(inst % 2)
        X = rng.integers(-2, 3, size=(n, d)).astype(float) if inst % 4 < 2 else rng.normal(size=(n, d))
        t = rng.integers(0, 2, size=n)
        y = rng.normal(size=n)
        ds = Dataset(X=X, t=t, y=y)
        try:
            expected = [cdist_knn_average(X, X, t, y, k, metric, exclude, g) for g in (0, 1)]
        except ValueError:
            expected = None
        start = time.perf_counter()
        try:
            f = nnci_features(X, ds, k, metric, exclude_self=exclude)
            got = [f.ybar0.tolist(), f.ybar1.tolist()]
        except InsufficientNeighborsError:
            got = None
        elapsed += time.perf_counter() - start
        checked += 1
        mismatches += got != expected
    ok = mismatches == 0 and elapsed < 30
    record_acceptance(1, ok, f"{checked} instances, {mismatches} mismatches, {elapsed:.2f}s (limit 30s)")
    assert ok


def model_objective(model, X, t, y, feats, cfg):
    from nnci.losses import factual
    q0, q1, g, _ = model.forward(X, feats.ybar0, feats.ybar1)
    return total_objective(factual(q0, q1, t), y, g, t, cfg.alpha, cfg.beta, float(model.epsilon[0]),
                           cfg.g_clip) + model.penalty()


def test_criterion_2_gradient_correctness():
    cfg = LossConfig(alpha=1.0, beta=1.0)
    worst = 0.0
    start = time.perf_counter()
    for seed in range(100):
        m = small_model(seed, family=("dragonnet", "nednet")[seed % 2], nn=seed % 3 != 0)
        m.epsilon[0] = np.random.default_rng(seed).normal(scale=0.3)
        X, t, y, feats = small_batch(seed)
        if not m.arch.use_neighbor_features:
            feats_used = None
            f = lambda: model_objective_nofeat(m, X, t, y, cfg)  # noqa: E731
        else:
            feats_used = feats
            f = lambda: model_objective(m, X, t, y, feats, cfg)  # noqa: E731
        bundle = m.objective_gradients(X, t, y, feats_used, cfg)
        fd = central_differences(f, m.parameters(), h=1e-5)
        for k, v in fd.items():
            worst = max(worst, float(relative_error(bundle.grads[k], v).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 120
    record_acceptance(2, ok, f"100 models, worst relative error {worst:.2e} (limit 1e-4), {elapsed:.1f}s (limit 120s)")
    assert ok


def model_objective_nofeat(model, X, t, y, cfg):
    from nnci.losses import factual
    q0, q1, g, _ = model.forward(X)
    return total_objective(factual(q0, q1, t), y, g, t, cfg.alpha, cfg.beta, float(model.epsilon[0]),
                           cfg.g_clip) + model.penalty()


def test_criterion_3_reduction_identities():
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(50):
        n = int(rng.integers(1, 40))
        q = rng.normal(scale=3, size=n)
        y = rng.normal(scale=3, size=n)
        g = rng.uniform(0.0, 1.0, size=n)
        t = rng.integers(0, 2, size=n).astype(float)
        eps = float(rng.normal())
        alpha = float(rng.uniform(0, 3))
        failures += total_objective(q, y, g, t, alpha, 0.0, eps) != dragonnet_objective(q, y, g, t, alpha)
        failures += total_objective(q, y, g, t, 0.0, 0.0, eps) != outcome_mse(q, y)
        failures += targeted_term(y, t, q, g, 0.0) != outcome_mse(q, y)
    ok = failures == 0
    record_acceptance(3, ok, f"50 random inputs x 3 identities, {failures} non-bitwise results")
    assert ok


@pytest.mark.slow
def test_criterion_4_synthetic_ate_recovery():
    start = time.perf_counter()
    ds = generate_synthetic(SyntheticConfig(n=2500, seed=0))
    tr, te = split(ds, 0.9, seed=0)
    scaler, tr_s = standardize(tr)
    te_s = scaler.transform(te)
    f_tr = nnci_features(tr_s.X, tr_s, 11, "euclidean", exclude_self=True)
    f_te = nnci_features(te_s.X, tr_s, 11, "euclidean")
    truth = synthetic_ate_closed_form()
    errors = []
    for seed in range(5):
        m = build(ArchConfig("tarnet", use_neighbor_features=True), tr_s.d, seed=seed)
        fit(m, tr_s, f_tr, LossConfig(), TrainConfig(seed=seed))
        ate_s, _ = estimate_effects(m, te_s.X, f_te)
        errors.append(abs(float(scaler.inverse_effect(ate_s)) - truth))
    elapsed = time.perf_counter() - start
    med = statistics.median(errors)
    ok = med <= 0.10 and elapsed < 600
    record_acceptance(4, ok, f"median |eps_ATE| {med:.4f} over 5 seeds (limit 0.10; per seed "
                             f"{', '.join(f'{e:.4f}' for e in errors)}), {elapsed:.0f}s (limit 600s)")
    assert ok


def test_criterion_5_nednet_staging(monkeypatch):
    ds = generate_synthetic(SyntheticConfig(n=600, seed=5))
    _, tr = standardize(ds)
    feats = nnci_features(tr.X, tr, 11, "manhattan", exclude_self=True)
    model = build(ArchConfig("nednet"), tr.d, seed=5)
    stage1 = {}
    bundles = []
    original_reinit = train_module.reinit_heads
    original_grads = type(model).objective_gradients

    def spy_reinit(m, seed=0):
        stage1.update({k: v.copy() for k, v in m.parameters().items() if k.startswith("rep.")})
        original_reinit(m, seed)

    def spy_grads(self, *args, **kwargs):
        b = original_grads(self, *args, **kwargs)
        bundles.append({k: v for k, v in b.grads.items() if k.startswith("rep.")})
        return b

    monkeypatch.setattr(train_module, "reinit_heads", spy_reinit)
    monkeypatch.setattr(type(model), "objective_gradients", spy_grads)
    fit_two_stage(model, tr, feats, LossConfig(), TrainConfig(max_epochs=8, seed=5))
    unchanged = bool(stage1) and all(np.array_equal(v, model.parameters()[k]) for k, v in stage1.items())
    zero_slots = bool(bundles) and all(np.all(v == 0.0) for b in bundles for v in b.values())
    ok = unchanged and zero_slots
    record_acceptance(5, ok, f"representation bitwise unchanged: {unchanged}; {len(bundles)} stage-2 "
                             f"bundles with all-zero representation slots: {zero_slots}")
    assert ok


def test_criterion_6_profile_properties():
    rng = np.random.default_rng(6)
    bad = {"monotone": 0, "terminal": 0, "wins": 0, "scaling": 0}
    for i in range(500):
        P = int(rng.integers(2, 30))
        S = int(rng.integers(2, 7))
        if i % 3 == 0:
            scores = rng.integers(0, 4, size=(P, S)).astype(float)
        elif i % 3 == 1:
            scores = rng.lognormal(sigma=2.0, size=(P, S))
        else:
            scores = rng.uniform(size=(P, S)) * 10.0 ** rng.integers(-6, 6)
        m = PerformanceMatrix(scores, ())
        curves = performance_profile(m)
        wins = (scores == scores.min(axis=1, keepdims=True)).mean(axis=0)
        bad["monotone"] += any(np.any(np.diff(c.rho) < 0) for c in curves)
        bad["terminal"] += any(c.rho[-1] != 1.0 for c in curves)
        bad["wins"] += any(c.rho[0] != w for c, w in zip(curves, wins))
        factors = rng.uniform(0.001, 1000.0, size=(P, 1))
        scaled = performance_profile(PerformanceMatrix(scores * factors, ()), tau_grid=curves[0].tau)
        bad["scaling"] += any(not np.array_equal(a.rho, b.rho) for a, b in zip(curves, scaled))
    ok = not any(bad.values())
    record_acceptance(6, ok, "500 matrices, violations " + ", ".join(f"{k}={v}" for k, v in bad.items()))
    assert ok


def test_criterion_7_statistical_oracle():
    rep = rank_report(PerformanceMatrix(np.array(GOLDEN_MATRIX), ()))
    diffs = [abs(rep.statistic - GOLDEN_STATISTIC), abs(rep.p_value - GOLDEN_P)]
    diffs += [abs(a - b) for a, b in zip(rep.avg_ranks, GOLDEN_AVG_RANKS)]
    for c, (col, p_raw, p_adj) in zip(rep.comparisons, GOLDEN_FINNER):
        assert c.model_id == f"m{col}"
        diffs += [abs(c.p_raw - p_raw), abs(c.p_adjusted - p_adj)]
    col = np.random.default_rng(7).uniform(size=(10, 1))
    same = rank_report(PerformanceMatrix(np.repeat(col, 4, axis=1), ()))
    identical_ok = same.statistic == 0.0 and all(c.decision == "Fail to reject" for c in same.comparisons)
    worst = max(diffs)
    ok = worst < 1e-6 and identical_ok
    record_acceptance(7, ok, f"golden 10x4 max deviation {worst:.1e} (limit 1e-6); identical columns: "
                             f"statistic {same.statistic}, all 'Fail to reject': {identical_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_8_directional_replication(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "output_dir": str(tmp_path / "c8"),
        "seed": 8,
        "dataset": {"kind": "synthetic", "n": 2500, "realizations": 50},
        "models": [{"family": "dragonnet", "nn_variant": False},
                   {"family": "dragonnet", "nn_variant": True, "metric": "manhattan"}],
    })
    start = time.perf_counter()
    meta = run(cfg)
    elapsed = time.perf_counter() - start
    rows, _ = read_commented_csv(cfg.output_dir / "scores.csv")
    pehe = {}
    for r in rows:
        pehe.setdefault(int(r["realization"]), {})[r["model"]] = float(r["eps_pehe"])
    complete = [v for v in pehe.values() if len(v) == 2]
    wins = sum(v["NN-Dragonnet (Manhattan)"] < v["Dragonnet"] for v in complete)
    frac = wins / max(len(complete), 1)
    far = far_test(PerformanceMatrix.from_long(rows, "realization", "model", "eps_pehe"))
    ranks = dict(zip(far.model_ids, far.avg_ranks))
    ok = len(complete) == 50 and frac >= 0.60 and elapsed < 3600 and not meta["failures"]
    record_acceptance(8, ok, f"NN-Dragonnet (Manhattan) lower eps_PEHE in {wins}/{len(complete)} = {frac:.0%} "
                             f"(need >= 60%); FAR {ranks.get('NN-Dragonnet (Manhattan)', float('nan')):.2f} vs "
                             f"{ranks.get('Dragonnet', float('nan')):.2f}; {elapsed / 60:.1f} min (limit 60)")
    assert ok


@pytest.mark.slow
def test_criterion_9_end_to_end_determinism(tmp_path):
    config = tmp_path / "c9.yaml"
    config.write_text(
        "seed: 9\n"
        "dataset:\n  kind: synthetic\n  n: 500\n  realizations: 2\n"
        "train:\n  max_epochs: 10\n"
        "models:\n"
        "  - {family: dragonnet, nn_variant: false}\n"
        "  - {family: dragonnet, nn_variant: true, metric: manhattan}\n"
        "  - {family: tarnet, nn_variant: true, metric: chebyshev}\n"
        "  - {family: nednet, nn_variant: true, metric: euclidean}\n",
        encoding="utf-8")
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "nnci.cli", "run", "--config", str(config),
                               "--output-dir", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "scores.csv").read_bytes())
    ok = outputs[0] == outputs[1] and len(outputs[0].splitlines()) == 2 + 8
    record_acceptance(9, ok, f"two CLI runs, scores.csv byte-identical: {outputs[0] == outputs[1]} "
                             f"({len(outputs[0])} bytes, 8 score rows)")
    assert ok
