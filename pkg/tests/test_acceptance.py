"""Acceptance battery.

Each test prints one ``[PASS]`` / ``[FAIL]`` line for its criterion, then
asserts.  Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""
import math
import sys
import time

import numpy as np
import pytest

from tipsfuse import tensor as T
from tipsfuse.backbone import PodState, cosine_matrix, pod_gamma
from tipsfuse.features import assign_splits, build_group_index, fit_apply_normalization, generate_synthetic, reference_names
from tipsfuse.heads import nll_loss, risk_score
from tipsfuse.interpret import attribute_patient, integrated_gradients
from tipsfuse.metrics import (
    chi2_sf,
    concordance_index,
    dice_jaccard,
    km_curve,
    logrank,
    mae_rmse,
    mean_brier,
    median_risk_stratify,
)
from tipsfuse.model import Layout, ModelConfig, TipsFuseModel
from tipsfuse.ot import OtConfig, lp_oracle, sinkhorn
from tipsfuse.semiseg import ConfidenceSchedule, confidence_threshold, ema_update, weighted_dice
from tipsfuse.tensor import Adam, Tensor
from tipsfuse.training import TrainConfig, evaluate, ortho_loss, param_checksum, predict, staged_train

from _toys import toy_inputs, toy_model, toy_total_loss


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        return ok
    return emit


# 1 -----------------------------------------------------------------------

def test_c01_gradient_oracle(verdict):
    model = toy_model()
    inp = toy_inputs()
    # dropout is off in eval mode and plans are held at their forward values
    plans = model.forward(inp)[0].plans
    t0 = time.perf_counter()
    err = T.finite_difference_check(lambda: toy_total_loss(model, inp, plans), model.parameters())
    secs = time.perf_counter() - t0
    ok = err < 1e-4 and secs < 30
    verdict(1, ok, f"max rel err {err:.2e} (< 1e-4) over {model.num_parameters()} params in {secs:.1f}s (< 30s)")
    assert ok


# 2 -----------------------------------------------------------------------

def test_c02_ot_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_gap, worst_marg, below = 0.0, 0.0, 0
    for _ in range(50):
        n, m = rng.integers(1, 5, size=2)
        C = rng.random((n, m))
        mu, nu = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        p = sinkhorn(C, mu, nu, OtConfig(epsilon=0.01))
        exact = lp_oracle(C, mu, nu).cost
        # a feasible plan can only undercut the optimum by summation rounding
        below += p.cost < exact - 1e-12
        worst_gap = max(worst_gap, (p.cost - exact) / exact)
        worst_marg = max(worst_marg, p.marginal_error())
    secs = time.perf_counter() - t0
    ok = below == 0 and worst_gap < 0.05 and worst_marg <= 1e-6 and secs < 10
    verdict(2, ok, f"50 instances: {below} below LP, worst gap {worst_gap:.3%} (< 5%), "
                   f"marginal err {worst_marg:.1e} (<= 1e-6), {secs:.2f}s (< 10s)")
    assert ok


# 3 -----------------------------------------------------------------------

def test_c03_pod_analytics(verdict):
    st = PodState(total=10)
    S = np.random.default_rng(0).normal(size=(6, 6))
    pod_gamma(st, S)
    st.t = st.total
    g_end = pod_gamma(st, S)

    fixture = PodState(total=5, max0=0.9, mu0=0.1, sigma0=0.2, ema_max=0.9)
    S0 = np.full((2, 2), 0.1)
    S0[0, 0] = 0.9  # keeps the EMA of max(S) at max_0
    g0 = pod_gamma(fixture, S0)

    rng = np.random.default_rng(0)
    A = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
    B = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
    start = cosine_matrix(A, B).data
    top = start >= np.percentile(start, 90)
    before = np.abs(start[top]).mean()
    pod = PodState(total=200)
    opt = Adam([A, B], lr=1e-2, weight_decay=0.0)
    for _ in range(200):
        with T.Tape() as tape:
            loss, _ = ortho_loss(A, B, pod)
        opt.step(tape.backward(loss, [A, B]))
        pod.t += 1
    after = np.abs(cosine_matrix(A, B).data[top]).mean()
    drop = 1 - after / before

    ok = g_end == 1.0 and abs(g0 - math.exp(-4)) <= 1e-12 and drop >= 0.5
    verdict(3, ok, f"gamma_T={g_end!r}, |gamma_0 - e^-4|={abs(g0 - math.exp(-4)):.1e}, "
                   f"top-10% mean |cos| {before:.3f} -> {after:.3f} ({drop:.0%} drop, >= 50%)")
    assert ok


# 4 -----------------------------------------------------------------------

def test_c04_survival_loss_fixtures(verdict):
    errs = [abs(nll_loss(Tensor([[0.5, 0.5]]), 1, c).item() - math.log(2)) for c in (0, 1)]
    risk = risk_score([[0.5, 0.5]])
    ok = max(errs) <= 1e-9 and risk == -0.75
    verdict(4, ok, f"|nll - ln2| = {errs[0]:.1e}/{errs[1]:.1e} (c=0/1), risk = {risk!r}")
    assert ok


# 5 -----------------------------------------------------------------------

def test_c05_metric_fixtures(verdict):
    cidx = (concordance_index([3, 2, 1], [1, 2, 3], [0, 0, 0]) == 1.0
            and concordance_index([1, 2, 3], [1, 2, 3], [0, 0, 0]) == 0.0
            and concordance_index([3, 1, 2], [1, 2, 3], [0, 1, 0]) == 1.0)
    km = km_curve([1, 2, 3], [1, 0, 1])
    km_ok = km.at(1) == 2 / 3 and km.at(3) == 0.0
    p = chi2_sf(3.841, 1)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        a, b = rng.random((8, 8)) < rng.random(), rng.random((8, 8)) < rng.random()
        d, j = dice_jaccard(a, b)
        worst = max(worst, abs(d - 2 * j / (1 + j)))
    mbs = mean_brier([[0.8, 0.1]], [2], [0])
    ok = cidx and km_ok and abs(p - 0.05) <= 1e-3 and worst <= 1e-12 and mbs == 0.025
    verdict(5, ok, f"C-index fixtures {'exact' if cidx else 'WRONG'}, KM {'exact' if km_ok else 'WRONG'}, "
                   f"p(3.841)={p:.5f}, Dice identity err {worst:.1e}, "
                   f"mBS={mbs!r} ({'exact' if mbs == 0.025 else 'required exactly 0.025'})")
    assert ok


# 6, 7, 11 ----------------------------------------------------------------

def _end_to_end():
    t0 = time.perf_counter()
    ds, _ = generate_synthetic(0, 300)
    assign_splits(ds, seed=0)
    fit_apply_normalization(ds)
    model = TipsFuseModel(ModelConfig(d=32), Layout.from_dataset(ds), seed=0)
    res = staged_train(ds, model, TrainConfig(20, 20, 20))
    test = ds.split("test")
    preds = predict(model, test)
    metrics = evaluate(model, test, res.bins_os, res.bins_ohe, preds=preds)
    t = np.array([r.outcomes.t_os for r in test])
    ev = 1 - np.array([r.outcomes.c_os for r in test])
    high, low = median_risk_stratify(preds.risk_os)
    metrics["logrank_p"] = logrank(t[high], ev[high], t[low], ev[low]).p_value
    mean_post = np.mean([r.outcomes.ppg_post for r in ds.split("train")])
    metrics["baseline_mae"] = mae_rmse([mean_post] * len(test), [r.outcomes.ppg_post for r in test])[0]
    return res, metrics, time.perf_counter() - t0


@pytest.fixture(scope="module")
def e2e_runs():
    return _end_to_end(), _end_to_end()


def test_c06_end_to_end(verdict, e2e_runs):
    _, m, secs = e2e_runs[0]
    ok = (m["cindex_os"] >= 0.80 and m["cindex_ohe"] >= 0.75 and m["mae_ppg"] < m["baseline_mae"]
          and m["logrank_p"] < 0.05 and secs < 600)
    verdict(6, ok, f"test C_os={m['cindex_os']:.4f} (>= 0.80), C_ohe={m['cindex_ohe']:.4f} (>= 0.75), "
                   f"MAE {m['mae_ppg']:.3f} vs mean baseline {m['baseline_mae']:.3f}, "
                   f"log-rank p={m['logrank_p']:.2e} (< 0.05), {secs:.0f}s (< 600s)")
    assert ok


def test_c07_backbone_frozen_in_stage_two(verdict, e2e_runs):
    res, _, _ = e2e_runs[0]
    sums = res.stage_checksums
    final = param_checksum(res.model.backbone.parameters() + res.model.surv.parameters())
    ok = sums["I"] == sums["II-a"] == sums["II-b"] == final
    verdict(7, ok, f"backbone+surv sha256 after I / II-a / II-b / final: "
                   f"{' / '.join(s[:12] for s in (sums['I'], sums['II-a'], sums['II-b'], final))}")
    assert ok


# 8 -----------------------------------------------------------------------

def test_c08_semi_supervised_suite(verdict):
    P = np.array([[1.0, 0.0], [0.0, 0.0]])
    Y = np.array([[1.0, 1.0], [0.0, 0.0]])
    wd = weighted_dice(P, Y, alpha=2 / 3)
    s = ConfidenceSchedule(total=1000)
    ends = (confidence_threshold(s, 0), confidence_threshold(s, 1000))
    teacher, student, m = np.array([3.0, -1.0, 0.25]), np.array([0.5, 2.0, -4.0]), 0.99
    cur, worst = teacher.copy(), 0.0
    for k in range(1, 101):
        cur = ema_update(cur, student, m)
        worst = max(worst, float(np.abs(cur - (student + m ** k * (teacher - student))).max()))
    ok = abs(wd - 1 / 6) <= 1e-9 and ends == (0.8, 0.95) and worst <= 1e-12
    verdict(8, ok, f"2x2 weighted dice = {wd:.12f} (target 1/6 = {1 / 6:.12f}), "
                   f"schedule ends {ends}, EMA closed-form err {worst:.1e}")
    assert ok


# 9 -----------------------------------------------------------------------

def test_c09_integrated_gradients(verdict):
    w = np.array([[0.5, -2.0, 3.0, 0.25, -0.75, 1.25]])
    x = np.array([[1.5, 0.2, -0.4, 2.0, 1.0, -3.0]])
    (attr,), _, _ = integrated_gradients(lambda v: T.sum_all(T.elemwise_mul(v, Tensor(w))), [x], steps=256)
    lin_err = float(np.abs(attr - w * x).max())

    model = toy_model()
    inp = toy_inputs()
    residuals = {t: attribute_patient(model, inp, t, steps=256).residual for t in ("risk", "ppg", "ohe")}
    ok = lin_err <= 1e-12 and max(residuals.values()) <= 1e-3
    verdict(9, ok, f"linear surrogate err {lin_err:.1e}; completeness residual at 256 steps "
                   + ", ".join(f"{k}={v:.2e}" for k, v in residuals.items()) + " (<= 1e-3)")
    assert ok


# 10 ----------------------------------------------------------------------

def test_c10_group_hierarchy(verdict):
    gi = build_group_index(reference_names())
    counts = (len(gi.names), gi.n_groups, len(gi.by_filter), len(gi.by_class))
    ok = counts == (1595, 103, 17, 7)
    verdict(10, ok, f"{counts[0]} names -> {gi.summary()}")
    assert ok


# 11 ----------------------------------------------------------------------

def test_c11_determinism(verdict, e2e_runs):
    (r1, m1, _), (r2, m2, _) = e2e_runs
    same_log = [r.cells() for r in r1.log] == [r.cells() for r in r2.log]
    same_metrics = m1 == m2
    same_params = param_checksum(r1.model.parameters()) == param_checksum(r2.model.parameters())
    ok = same_log and same_metrics and same_params
    verdict(11, ok, f"two seeded runs: log {'identical' if same_log else 'DIFFERS'}, "
                    f"metrics {'identical' if same_metrics else 'DIFFER'}, "
                    f"parameters {'identical' if same_params else 'DIFFER'}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
