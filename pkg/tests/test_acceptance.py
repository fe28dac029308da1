"""Acceptance criteria, one group of tests per criterion.

Each test carries ``@pytest.mark.criterion(n)``; conftest prints one
PASS/FAIL line per criterion at the end of the session.  The Monte Carlo
criteria share one run of 5000 replicates at n = 1000 with a seed fixed
before any result was seen.
"""

import math
from dataclasses import replace
from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecetrial.analysis_set import Selector, build_ece, build_restricted, build_strata
from ecetrial.dataset import Dataset
from ecetrial.design import ZKey, compile_schedule, parse_design
from ecetrial.errors import PositivityError
from ecetrial.estimators import (
    estimate_aipw,
    estimate_aps,
    estimate_ipw,
    estimate_ps,
    estimate_saipw,
    estimate_sipw,
)
from ecetrial.simulation import (
    SimulationConfig,
    bundled_config,
    bundled_design_text,
    generate_trial,
    naive_limit_oracle,
    run_monte_carlo,
)
from ecetrial.variance import contrast_inference, cov_sipw
from ecetrial.working_model import (
    CovariateSpec,
    center_model,
    constant_model,
    fit_anhecova,
    fit_linear,
)
from helpers import DESIGN3, d1_dataset, design_text, random_dataset

criterion = pytest.mark.criterion

PAIRS = [("2", "1"), ("3", "1"), ("4", "1")]
ROBUST = ("ipw", "sipw", "saipw", "ps", "aps")
MC_SEED = 20240501
MC_RUNS = 5000


def note(record_property, text):
    record_property("note", text)


# ---------------------------------------------------------------------------
# 1. design compilation


SIMPLIFY_DECIMALS = {
    ("1", "1", "1"): ("0.50", "0.25", "0.25"),
    ("1", "1", "2"): ("0.50", "0.375", "0.125"),
    ("1", "0", "1"): ("0.50", "0.50", "0"),
    ("1", "0", "2"): ("0.50", "0.50", "0"),
    ("0", "1", "1"): ("0.50", "0", "0.50"),
    ("0", "1", "2"): ("0.50", "0", "0.50"),
}

SIMULATION_DECIMALS = {
    ("1", "1"): ("0.50", "0.20", "0.30", "0"),
    ("1", "0"): ("0.50", "0.50", "0", "0"),
    ("2", "1"): ("0.50", "0.15", "0.15", "0.20"),
    ("2", "0"): ("0.50", "0.50", "0", "0"),
    ("3", "1"): ("0.50", "0.20", "0", "0.30"),
    ("3", "0"): ("0.50", "0.50", "0", "0"),
}


@criterion(1)
def test_c01_simplify_table():
    sched = compile_schedule(parse_design(bundled_design_text("simplify")))
    for (hs, da, ew), decimals in SIMPLIFY_DECIMALS.items():
        got = sched.rows[ZKey.of({"HS": hs, "DA": da, "EW": ew})].tolist()
        assert got == [float(Decimal(p)) for p in decimals]


@criterion(1)
def test_c01_simulation_table():
    sched = compile_schedule(parse_design(bundled_design_text("simulation")))
    for (ew, sub), decimals in SIMULATION_DECIMALS.items():
        got = sched.rows[ZKey.of({"EW": ew, "sub": sub})].tolist()
        assert got == [float(Decimal(p)) for p in decimals]


# ---------------------------------------------------------------------------
# 2. strata


EXPECTED_STRATA = {
    ("2", "1"): [(0.15, 0.5), (0.2, 0.5), (0.5, 0.5)],
    ("3", "1"): [(0.15, 0.5), (0.3, 0.5)],
    ("4", "1"): [(0.2, 0.5), (0.3, 0.5)],
}


@criterion(2)
@pytest.mark.parametrize("pair", PAIRS)
def test_c02_strata(pair):
    data = generate_trial(5000, MC_SEED)
    strata = build_strata(build_ece(data, *pair))
    assert strata.keys == EXPECTED_STRATA[pair]
    assert len(strata.strata) == {"2": 3, "3": 2, "4": 2}[pair[0]]


# ---------------------------------------------------------------------------
# 3. oracle estimands


ORACLE_M = 10_000_000
ORACLE_SEED = 7
REFERENCE_TRUTH = {("2", "1"): 3.000, ("3", "1"): 1.145, ("4", "1"): -0.886}


@pytest.fixture(scope="module")
def truths():
    from ecetrial.simulation import true_contrast_oracle

    return {p: true_contrast_oracle(*p, M=ORACLE_M, seed=ORACLE_SEED) for p in PAIRS}


@criterion(3)
@pytest.mark.parametrize("pair", PAIRS)
def test_c03_oracle(truths, pair, record_property):
    note(record_property, f"truth {truths[pair]:.4f} vs reference {REFERENCE_TRUTH[pair]}")
    assert abs(truths[pair] - REFERENCE_TRUTH[pair]) <= 0.01


# ---------------------------------------------------------------------------
# 4-8. Monte Carlo at n = 1000


@pytest.fixture(scope="module")
def mc(truths):
    cfg = bundled_config()
    cfg = replace(
        cfg,
        runs=MC_RUNS,
        n=1000,
        seed=MC_SEED,
        methods=("naive",) + ROBUST,
        truths={f"{j},{k}": truths[(j, k)] for j, k in PAIRS},
        threads=1,
    )
    return run_monte_carlo(cfg)


NAIVE_BIAS = {("2", "1"): -0.230, ("3", "1"): -0.189, ("4", "1"): -0.206}


@criterion(4)
@pytest.mark.parametrize("pair", PAIRS)
def test_c04_naive_bias(mc, pair, record_property):
    s = mc.get(pair, "naive")
    note(record_property, f"bias {s.bias:.4f} (reference {NAIVE_BIAS[pair]}), CP {s.cp:.3f}")
    assert s.n_ok >= 1000
    assert abs(s.bias - NAIVE_BIAS[pair]) <= 0.03
    if pair == ("2", "1"):
        assert s.cp <= 0.85


@criterion(4)
def test_c04_naive_bias_matches_its_limit(mc, truths):
    # the naive estimator converges to the unweighted ECE arm-mean difference
    limit = naive_limit_oracle("2", "1", M=2_000_000, seed=ORACLE_SEED)
    s = mc.get(("2", "1"), "naive")
    assert abs(s.bias - (limit - truths[("2", "1")])) <= 4 * s.sd / math.sqrt(s.n_ok) + 0.01


@criterion(5)
@pytest.mark.parametrize("method", ROBUST)
def test_c05_unbiased(mc, method, record_property):
    biases = [mc.get(p, method).bias for p in PAIRS]
    note(record_property, "bias " + ", ".join(f"{b:+.4f}" for b in biases))
    assert all(mc.get(p, method).n_ok >= 1000 for p in PAIRS)
    assert max(abs(b) for b in biases) <= 0.02


@criterion(6)
@pytest.mark.parametrize("method", ROBUST)
def test_c06_coverage(mc, method, record_property):
    cps = [mc.get(p, method).cp for p in PAIRS]
    note(record_property, "CP " + ", ".join(f"{c:.3f}" for c in cps))
    assert all(0.93 <= c <= 0.965 for c in cps)


@criterion(7)
@pytest.mark.parametrize("method", ("naive",) + ROBUST)
def test_c07_se_consistency(mc, method, record_property):
    ratios = [mc.get(p, method).mean_se / mc.get(p, method).sd for p in PAIRS]
    note(record_property, "SE/SD " + ", ".join(f"{r:.3f}" for r in ratios))
    assert all(0.95 <= r <= 1.05 for r in ratios)


@criterion(8)
def test_c08_saipw_vs_sipw(mc, record_property):
    ratio = mc.get(("3", "1"), "saipw").sd / mc.get(("3", "1"), "sipw").sd
    note(record_property, f"SD ratio {ratio:.3f} (reference {0.198 / 0.246:.3f})")
    assert abs(ratio - 0.198 / 0.246) <= 0.04


@criterion(8)
def test_c08_ipw_vs_sipw(mc, record_property):
    ratio = mc.get(("3", "1"), "ipw").sd / mc.get(("3", "1"), "sipw").sd
    note(record_property, f"SD ratio {ratio:.3f} (reference {0.550 / 0.246:.3f})")
    assert abs(ratio - 0.550 / 0.246) <= 0.15


@criterion(8)
@pytest.mark.parametrize("pair", PAIRS)
def test_c08_aps_no_worse_than_ps(mc, pair, record_property):
    aps, ps = mc.get(pair, "aps").sd, mc.get(pair, "ps").sd
    note(record_property, f"SD aps {aps:.3f}, ps {ps:.3f}")
    assert aps <= ps + 0.01


# ---------------------------------------------------------------------------
# 9. exact identities


def _close(a, b, scale=1.0):
    return a == pytest.approx(b, rel=1e-10, abs=1e-10 * scale)


@criterion(9)
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-100, 100, allow_nan=False))
def test_c09_identities(seed, shift):
    data = random_dataset(np.random.default_rng(seed))
    aset = build_ece(data, "j", "k")
    strata = build_strata(aset)
    scale = 1.0 + float(np.max(np.abs(data.outcome)))
    zero_j, zero_k = constant_model("j"), constant_model("k")

    ipw, sipw = estimate_ipw(aset, data), estimate_sipw(aset, data)
    ps = estimate_ps(aset, data, strata)

    spec0 = CovariateSpec()
    sm_j = fit_anhecova(aset, "j", spec0, data, strata)
    sm_k = fit_anhecova(aset, "k", spec0, data, strata)
    assert _close(estimate_saipw(aset, data, sm_j, sm_k).theta, ps.theta, scale)

    assert _close(estimate_aipw(aset, data, zero_j, zero_k).theta, ipw.theta, scale)
    assert _close(estimate_saipw(aset, data, zero_j, zero_k).theta, sipw.theta, scale)
    assert _close(estimate_aps(aset, data, strata, zero_j, zero_k).theta, ps.theta, scale)

    spec = CovariateSpec(("x",))
    cj = center_model(fit_linear(aset, "j", spec, data), aset, "j", data, strata)
    ck = center_model(fit_linear(aset, "k", spec, data), aset, "k", data, strata)
    a = estimate_aipw(aset, data, cj, ck).theta
    assert _close(estimate_saipw(aset, data, cj, ck).theta, a, scale)
    assert _close(estimate_aps(aset, data, strata, cj, ck).theta, a, scale)

    moved = replace(data, outcome=data.outcome + shift, _cache={})
    c2 = estimate_sipw(build_ece(moved, "j", "k"), moved).contrast
    assert _close(c2, sipw.contrast, scale + abs(shift))


# ---------------------------------------------------------------------------
# 10. degenerate strata


@criterion(10)
def test_c10_degenerate_strata(truths, record_property):
    cfg = SimulationConfig(
        runs=5000, n=500, seed=MC_SEED, methods=("ps", "ps_z"), pairs=(("2", "1"),),
        truths={"2,1": truths[("2", "1")]},
    )
    rep = run_monte_carlo(cfg)
    fz, fp = rep.get(("2", "1"), "ps_z").n_failed, rep.get(("2", "1"), "ps").n_failed
    note(record_property, f"failures: joint (EW, sub) strata {fz}/5000, pair-keyed {fp}/5000")
    assert fz > 0
    assert fp == 0


# ---------------------------------------------------------------------------
# 11. restricted analysis set


def design3_trial(n: int, rng: np.random.Generator) -> Dataset:
    """Design-3 trial; severity shifts outcomes and differs between windows.

    Y(a) = 1 + 2 sev + 1.5 [EW=2] + tau_a (1 + sev) + e with tau = (0, 1, 2),
    P(EW=1) = 1/3, P(sev | EW=1) = 0.3, P(sev | EW=2) = 0.6, so on the
    whole eligible population E Y(1) = 3 and E Y(2) = 4.5.
    """
    sched = compile_schedule(parse_design(design_text(DESIGN3)))
    ew = (rng.random(n) >= 1 / 3).astype(int)  # 0 -> EW1
    rows = np.array([sched.index_of(ZKey.of({"EW": str(e + 1)})) for e in (0, 1)])[ew]
    sev = (rng.random(n) < np.where(ew == 0, 0.3, 0.6)).astype(float)
    arm = np.empty(n, dtype=np.intp)
    sub = np.empty(n, dtype=np.intp)
    for r in np.unique(rows):
        idx = np.flatnonzero(rows == r)
        flat = sched.joint[r].ravel()
        cell = rng.choice(flat.size, size=idx.size, p=flat / flat.sum())
        arm[idx], sub[idx] = np.divmod(cell, len(sched.substudies))
    tau = np.array([0.0, 1.0, 2.0])[arm]
    y = 1 + 2 * sev + 1.5 * ew + tau * (1 + sev) + rng.normal(size=n)
    return Dataset(sched, np.arange(n), rows.astype(np.intp), arm, y, {}, {}, sub)


@criterion(11)
def test_c11_restricted_weights_exact():
    data = design3_trial(600, np.random.default_rng(0))
    aset = build_restricted(data, "1", "2", Selector.by_substudy("1"))
    ew1 = data.schedule.index_of(ZKey.of({"EW": "1"}))
    w = {int(z): (wj, wk) for z, wj, wk in zip(aset.z_index, aset.weights_j, aset.weights_k)}
    assert w[ew1] == (0.5, 0.5)
    assert w[1 - ew1] == (float(Fraction(1, 6)), float(Fraction(1, 6)))


@criterion(11)
def test_c11_restricted_positivity():
    data = design3_trial(600, np.random.default_rng(1))
    with pytest.raises(PositivityError):
        build_restricted(data, "1", "2", Selector.by_substudy("2"))


@criterion(11)
def test_c11_restricted_sipw_unbiased(record_property):
    rng = np.random.default_rng(MC_SEED)
    reps, n = 200, 10_000
    est = np.empty((reps, 3))
    cover = 0
    for r in range(reps):
        data = design3_trial(n, rng)
        aset = build_restricted(data, "1", "2", Selector.by_substudy("1"))
        e = estimate_sipw(aset, data)
        est[r] = (e.theta_jk, e.theta_kj, e.contrast)
        inf = contrast_inference(e, cov_sipw(aset, data, e))
        cover += inf.ci[0] <= -1.5 <= inf.ci[1]
    truth = np.array([3.0, 4.5, -1.5])
    mean = est.mean(axis=0)
    mcse = est.std(axis=0, ddof=1) / math.sqrt(reps)
    note(record_property, "bias " + ", ".join(f"{b:+.4f}" for b in mean - truth)
         + " (3 MC SE " + ", ".join(f"{3 * s:.4f}" for s in mcse) + f"), CP {cover / reps:.3f}")
    assert np.all(np.abs(mean - truth) <= 3 * mcse)


# ---------------------------------------------------------------------------
# 12. hand-computed fixtures


@pytest.fixture
def d1():
    data = d1_dataset()
    return data, build_ece(data, "j", "k")


@criterion(12)
def test_c12_d1_ipw_sipw_ps(d1):
    data, aset = d1
    assert estimate_ipw(aset, data).theta.tolist() == [18 / 7, 36 / 7]
    assert estimate_sipw(aset, data).theta.tolist() == [3.0, 4.5]
    assert estimate_ps(aset, data, build_strata(aset)).theta.tolist() == [23 / 7, 30 / 7]


@criterion(12)
def test_c12_d1_aipw_theta_jk(d1):
    data, aset = d1
    mj = fit_linear(aset, "j", CovariateSpec(), data)
    mk = fit_linear(aset, "k", CovariateSpec(), data)
    assert estimate_aipw(aset, data, mj, mk).theta_jk == 3.0


@criterion(12)
@pytest.mark.xfail(
    strict=True,
    reason="the target theta_kj = 4 + 8/7 is not what the AIPW formula gives on D1: "
    "arm-k outcomes 2, 4, 6 have mean 4 and weights 2, 2, 4, so the residual term is "
    "(1/7)(-4 + 0 + 8) = 4/7 and theta_kj = 32/7; 4 + 8/7 = 36/7 is the IPW value",
)
def test_c12_d1_aipw_theta_kj_target_value(d1):
    data, aset = d1
    mj = fit_linear(aset, "j", CovariateSpec(), data)
    mk = fit_linear(aset, "k", CovariateSpec(), data)
    assert estimate_aipw(aset, data, mj, mk).theta_kj == 4 + 8 / 7
