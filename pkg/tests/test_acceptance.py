"""Acceptance criteria 1-11; each test records one pass/fail line (see conftest)."""
import itertools
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from protomil import diffmath as dm
from protomil.datamodel import Bag, SurvivalLabel, SynthConfig, generate_synthetic_cohort
from protomil.model import ModelConfig, ProtoSurvModel
from protomil.interpret import bh_adjust, hypergeom_tail, wilcoxon_rank_sum
from protomil.prototypes import PrototypeBank, diversity_loss, topk_count
from protomil.survival import NoComparablePairs, c_index, nll_loss, survival_from_hazards
from protomil.trainer import TrainConfig, assert_no_leakage, load_config, run_cv, shuffle_labels, split_folds

from test_model import cohort_loss, micro_cohort, micro_model

# planted cohort: 60 patients x 2 slides, ~150 instances per slide, 16/8 dims, 20% censoring.
# risk is carried by the joint archetype; each modality only sees one factor of it
PLANTED = SynthConfig(d_hist=16, d_st=8, instances_per_slide_range=(140, 160),
                      risk_weights=(0.0, 8.0, 8.0, 16.0), cross_modal=True, censor_rate=0.2, seed=1)

# paper defaults with width, prototype count and step size scaled to the desk-sized cohort
SCALED = dict(d=16, d_gate=8, K_H=6, K_S=4, k_min=60, lr=3e-3, grad_accum=8, epochs_max=20, patience=5, seed=1)


# ---------------------------------------------------------------- 1


def test_gradient_correctness(verdicts):
    t0 = time.perf_counter()
    cohort = micro_cohort()
    model = micro_model()
    routes = {b.slide_id: {} for b in cohort.bags}
    cohort_loss(model, cohort, routes)
    params = model.parameters()
    res = dm.grad_check(lambda: cohort_loss(model, cohort, routes), params, rel_tol=1e-3)
    secs = time.perf_counter() - t0
    worst = max(res["max_rel_err"].values())
    n = sum(p.data.size for p in params)
    verdicts.record(1, res["passed"] and secs < 30.0,
                    f"{n} parameters, max rel err {worst:.2e} (< 1e-3), {secs:.1f}s (< 30s)")


# ---------------------------------------------------------------- 2


def test_attention_invariants(verdicts):
    cases = topk_count(100, 12, 60) == 8 and topk_count(1000, 12, 60) == 60 and topk_count(5, 12, 60) == 1
    cfg = ModelConfig(d_hist=6, d_st=4, d=8, n_heads=2, d_gate=4, K_H=12, K_S=8, k_min=60, dropout=0.0)
    model = ProtoSurvModel(cfg, seed=1)
    rng = np.random.default_rng(7)
    rows = 0
    ok = cases
    for i in range(100):
        n = int(rng.choice([1, 2, 7, 30, 100]) if i < 20 else rng.integers(1, 1100))
        side = math.isqrt(n - 1) + 1
        cells = rng.choice(side * side, size=n, replace=False)
        bag = Bag(f"P{i}", f"P{i}_S0", rng.normal(size=(n, 6)), rng.normal(size=(n, 4)),
                  np.stack([cells % side, cells // side], axis=1), SurvivalLabel(1.0, True))
        fwd = model.forward(bag, with_loss=False)
        for m, K in (("hist", 12), ("st", 8)):
            rec = fwd.records[m]
            expect = max(1, min(60, n // K))
            ok &= rec.k_im == expect
            ok &= bool(np.all(np.abs(rec.weights.sum(axis=1) - 1.0) <= 1e-9))
            ok &= bool(np.all((rec.weights > 0).sum(axis=1) == expect))
            rows += K
    verdicts.record(2, ok, f"100 bags, {rows} rows sum to 1 with support k_im; (100,12,60)->8, (1000,12,60)->60")


# ---------------------------------------------------------------- 3


def test_diversity(verdicts):
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(8, 8)))
    ortho = diversity_loss(q[:5]).item()
    same = diversity_loss(np.array([[0.6, 0.8], [0.6, 0.8]]), "supp").item()
    P = np.random.default_rng(1).normal(size=(4, 6))
    ratio = diversity_loss(P, "main").item() / diversity_loss(P, "supp").item()
    ok = ortho < 1e-12 and same == 0.5 and abs(ratio - 16.0) < 1e-9
    verdicts.record(3, ok, f"orthonormal {ortho:.1e}, identical pair {same}, main/supp ratio {ratio:.6f} (K^2=16)")


# ---------------------------------------------------------------- 4


def test_survival_math(verdicts):
    out = survival_from_hazards(np.full(4, 0.5))
    exact = np.array_equal(out.surv.data, [0.5, 0.25, 0.125, 0.0625])
    unc = nll_loss([out], [1], [False], 0.4).item()
    cen = nll_loss([out], [1], [True], 0.4).item()
    worked = abs(unc - (-math.log(0.25))) < 1e-9 and abs(cen - 0.6 * -math.log(0.25)) < 1e-9
    outs = [survival_from_hazards(np.full(4, 0.3)), survival_from_hazards(np.full(4, 0.6))]
    lu, lc = -math.log(0.7 * 0.3), -math.log(0.4 ** 3)
    a0 = nll_loss(outs, [1, 2], [False, True], 0.0).item()
    a1 = nll_loss(outs, [1, 2], [False, True], 1.0).item()
    ends = abs(a0 - (lu + lc)) < 1e-9 and abs(a1 - lu) < 1e-9
    verdicts.record(4, exact and worked and ends,
                    f"survival exact={exact}, NLL {unc:.5f}/{cen:.5f}, alpha endpoints {a0:.5f}/{a1:.5f}")


# ---------------------------------------------------------------- 5


def _brute_c(risks, times, censored):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(risks)), 2):
        if censored[i] or not times[i] < times[j]:
            continue
        den += 1
        num += 1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0
    return num / den


def test_c_index_oracle(verdicts):
    rng = np.random.default_rng(11)
    done = mismatches = 0
    while done < 200:
        n = int(rng.integers(2, 51))
        risks = np.round(rng.normal(size=n), 1)
        times = rng.integers(1, 25, size=n).astype(float)
        cens = rng.random(n) < 0.3
        try:
            got = c_index(risks, times, cens)
        except NoComparablePairs:
            continue
        mismatches += got != _brute_c(risks, times, cens)
        done += 1
    verdicts.record(5, mismatches == 0, f"{done} random sets (n<=50), {mismatches} mismatches vs enumeration")


# ---------------------------------------------------------------- 6


def test_ema_contraction(verdicts):
    b = PrototypeBank(8, 16, rng=np.random.default_rng(0), ema_beta=0.95)
    target = np.random.default_rng(1).normal(size=(8, 16))
    ratios = []
    for _ in range(20):
        before = np.linalg.norm(b.P.data - target)
        b.ema_update(target)
        ratios.append(np.linalg.norm(b.P.data - target) / before)
    worst = max(abs(r - 0.95) for r in ratios)
    verdicts.record(6, worst <= 1e-12, f"20 steps, max |ratio - 0.95| = {worst:.1e}")


# ---------------------------------------------------------------- 7


def test_statistics_oracles(verdicts):
    N, K, n, k = 10, 5, 4, 4
    enum = Fraction(sum(1 for d in itertools.combinations(range(N), n) if sum(x < K for x in d) >= k),
                    math.comb(N, n))
    p_hyp = hypergeom_tail(N, K, n, k)
    _, p_w = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6], method="exact")
    bh = bh_adjust([0.01, 0.02, 0.03])
    ok = (enum == Fraction(5, 210) and abs(p_hyp - 5 / 210) <= 1e-12 and abs(p_w - 0.1) <= 1e-12
          and np.allclose(bh, 0.03, rtol=0, atol=1e-15))
    verdicts.record(7, ok, f"hypergeom {p_hyp:.12f} (5/210), Wilcoxon {p_w}, BH {bh.tolist()}")


# ---------------------------------------------------------------- 8, 9


@pytest.fixture(scope="module")
def planted():
    return generate_synthetic_cohort(PLANTED)


@pytest.fixture(scope="module")
def full_run(planted):
    t0 = time.perf_counter()
    s = run_cv(planted, TrainConfig(**SCALED))
    return s, time.perf_counter() - t0


def test_planted_signal(verdicts, planted, full_run):
    full, t_full = full_run
    t0 = time.perf_counter()
    shuffled = run_cv(shuffle_labels(planted, 1), TrainConfig(**SCALED))
    secs = t_full + time.perf_counter() - t0
    ok = full.mean >= 0.75 and shuffled.mean <= 0.58 and secs < 600
    verdicts.record(8, ok, f"full {full.mean:.4f} +/- {full.std:.4f} (>= 0.75), "
                           f"shuffled {shuffled.mean:.4f} (<= 0.58), {secs:.0f}s (< 600s)")


def test_ablation_ordering(verdicts, planted, full_run):
    full, _ = full_run
    scores = {a: run_cv(planted, TrainConfig(**SCALED, ablation=frozenset({a}))).mean
              for a in ("no_prototypes", "hist_only", "st_only")}
    ok = all(v < full.mean for v in scores.values())
    detail = ", ".join(f"{a} {v:.4f}" for a, v in scores.items())
    verdicts.record(9, ok, f"full {full.mean:.4f} vs {detail} (each must be lower)")


# ---------------------------------------------------------------- 10


def test_determinism_and_leakage(verdicts, planted, tmp_path):
    cfg = TrainConfig(**dict(SCALED, epochs_max=2))
    run_cv(planted, cfg, tmp_path / "a")
    run_cv(planted, cfg, tmp_path / "b")
    same = (tmp_path / "a" / "metrics.txt").read_bytes() == (tmp_path / "b" / "metrics.txt").read_bytes()
    folds = split_folds(planted, 5, 1)
    for tr, va in folds:
        assert_no_leakage(planted.subset(tr), planted.subset(va))
    covered = sorted(p for _, va in folds for p in va) == planted.patient_ids
    verdicts.record(10, same and covered, f"metrics byte-identical={same}, 5 folds disjoint and covering")


# ---------------------------------------------------------------- 11


def test_default_config(verdicts, tmp_path):
    expected = dict(blend_alpha=0.1, k_min=60, ema_beta=0.95, lambda_div=0.2, nll_alpha=0.4, lr=1e-4,
                    weight_decay=5e-5, epochs_max=50, patience=10, grad_accum=32, K_H=12, K_S=8,
                    dropout=0.25, d=512, d_gate=256)
    path = tmp_path / "defaults.txt"
    path.write_text(TrainConfig().to_text())
    loaded = load_config(path)
    bad = {k: getattr(loaded, k) for k, v in expected.items() if getattr(loaded, k) != v}
    verdicts.record(11, not bad and loaded == TrainConfig(), f"15 defaults exact after file round trip; off: {bad}")
