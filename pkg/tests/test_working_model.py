import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecetrial.analysis_set import build_ece, build_strata
from ecetrial.errors import InsufficientDataError
from ecetrial.simulation import generate_trial
from ecetrial.working_model import (
    CovariateSpec,
    center_model,
    check_adjustment_conditions,
    fit_anhecova,
    fit_linear,
)
from helpers import D1_DESIGN, d1_dataset, make_dataset, random_dataset

X = CovariateSpec(("x",))
NONE = CovariateSpec()


def test_intercept_only_is_arm_mean():
    data = d1_dataset()
    aset = build_ece(data, "j", "k")
    m = fit_linear(aset, "j", NONE, data)
    assert m.predict(data, aset).tolist() == [3.0] * 7
    assert m.n_used == 3


def test_exact_linear_fit():
    x = np.arange(7.0)
    rows = [(z, a, 2.0 * xi) for (z, a, _), xi in zip(
        [("a", "j", 0), ("a", "j", 0), ("a", "k", 0), ("a", "k", 0), ("b", "j", 0),
         ("b", "k", 0), ("b", "m", 0)], x)]
    data = make_dataset(D1_DESIGN, rows, {"x": x})
    aset = build_ece(data, "j", "k")
    m = fit_linear(aset, "j", X, data)
    np.testing.assert_allclose(m.coef[None], [0.0, 2.0], atol=1e-12)
    assert m.r2 == pytest.approx(1.0)


def test_collinear_design_does_not_raise():
    data = generate_trial(400, 2)
    aset = build_ece(data, "3", "1")
    m = fit_linear(aset, "3", CovariateSpec(("X_c", "X_b", "Z_sub")), data)
    assert m.rank == 3
    assert np.all(np.isfinite(m.predict(data, aset)))


def test_no_arm_records():
    data = d1_dataset()
    aset = build_ece(data, "j", "k")
    empty = aset.__class__(**{**aset.__dict__, "in_j": np.zeros(7, bool)})
    with pytest.raises(InsufficientDataError):
        fit_linear(empty, "j", NONE, data)


def test_anhecova_per_stratum_slopes():
    x = np.array([1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 2.0, 0.0])
    levels = ["a"] * 4 + ["b"] * 6
    arms = ["j", "j", "k", "k", "j", "j", "j", "k", "k", "m"]
    y = [xi if lv == "a" else -xi for xi, lv in zip(x, levels)]
    data = make_dataset(D1_DESIGN, list(zip(levels, arms, y)), {"x": x})
    aset = build_ece(data, "j", "k")
    m = fit_anhecova(aset, "j", X, data)
    np.testing.assert_allclose(m.coef[(0.5, 0.25)], [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(m.coef[(0.5, 0.5)], [0.0, 1.0], atol=1e-12)


def test_anhecova_without_covariates_gives_stratum_means():
    data = d1_dataset()
    aset = build_ece(data, "j", "k")
    m = fit_anhecova(aset, "j", NONE, data)
    assert m.predict(data, aset).tolist() == [2.0] * 4 + [5.0] * 3


def test_anhecova_one_stratum_equals_linear():
    rng = np.random.default_rng(5)
    data = random_dataset(rng, strata_probs=[(0.5, 0.5)])
    aset = build_ece(data, "j", "k")
    a = fit_anhecova(aset, "j", X, data).predict(data, aset)
    b = fit_linear(aset, "j", X, data).predict(data, aset)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_anhecova_small_stratum_falls_back():
    data = d1_dataset(x=np.arange(7.0))
    aset = build_ece(data, "j", "k")
    with pytest.warns(UserWarning, match="intercept only"):
        m = fit_anhecova(aset, "j", X, data)
    assert m.coef[(0.5, 0.25)].tolist() == [5.0, 0.0]


def test_center_offsets_hand_values():
    # stratum arm means 2 and 5, global arm mean 3
    data = d1_dataset()
    aset = build_ece(data, "j", "k")
    m = fit_linear(aset, "j", NONE, data)
    c = center_model(m, aset, "j", data)
    assert c.offsets == {(0.5, 0.5): -1.0, (0.5, 0.25): 2.0}
    again = center_model(c, aset, "j", data)
    assert again.offsets == c.offsets
    assert again.predict(data, aset).tolist() == [2.0] * 4 + [5.0] * 3


def test_centering_anhecova_gives_zero_offsets():
    data = generate_trial(800, 9)
    aset = build_ece(data, "2", "1")
    spec = CovariateSpec(("X_c", "X_b", "Z_sub"), (), True)
    m = fit_anhecova(aset, "2", spec, data)
    c = center_model(m, aset, "2", data)
    assert max(abs(v) for v in c.offsets.values()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_centered_residuals_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng)
    aset = build_ece(data, "j", "k")
    strata = build_strata(aset)
    y = data.outcome[aset.indices]
    scale = float(np.std(y)) or 1.0
    for arm, mask in (("j", aset.in_j), ("k", aset.in_k)):
        m = center_model(fit_linear(aset, arm, X, data), aset, arm, data)
        r = y - m.predict(data, aset)
        for s in strata.strata:
            pos = s.members[mask[s.members]]
            assert abs(r[pos].sum()) <= 1e-9 * scale * max(1, pos.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([-1e-3, 1e-3]), st.integers(0, 1))
def test_least_squares_minimises_rss(seed, eps, which):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng)
    aset = build_ece(data, "j", "k")
    m = fit_linear(aset, "j", X, data)
    rows = aset.indices[aset.in_j]
    D = np.column_stack([np.ones(rows.size), data.numeric["x"][rows]])
    y = data.outcome[rows]
    beta = m.coef[None]
    rss = float(np.sum((y - D @ beta) ** 2))
    b2 = beta.copy()
    b2[which] += eps
    assert float(np.sum((y - D @ b2) ** 2)) >= rss - 1e-12 * max(1.0, rss)


def test_diagnostics_vanish_for_centered_anhecova():
    data = generate_trial(1500, 11)
    aset = build_ece(data, "2", "1")
    strata = build_strata(aset)
    spec = CovariateSpec(("X_c", "X_b", "Z_sub"), (), True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mj = center_model(fit_anhecova(aset, "2", spec, data), aset, "2", data)
        mk = center_model(fit_anhecova(aset, "1", spec, data), aset, "1", data)
    d = check_adjustment_conditions(mj, mk, aset, data, strata)
    assert d.ok, d.flags


def test_misspecified_linear_fit_flags_own_covariance():
    data = generate_trial(100_000, 12)
    aset = build_ece(data, "2", "1")
    spec = CovariateSpec(("X_c", "X_b", "Z_sub"))
    mj = fit_linear(aset, "2", spec, data)
    mk = fit_linear(aset, "1", spec, data)
    d = check_adjustment_conditions(mj, mk, aset, data)
    assert any(f.startswith("gura: arm 2") for f in d.flags)
    assert max(abs(v) for v in d.own_cov["2"]) > 0.05


def test_intercept_only_diagnostics_report_stratum_means():
    data = d1_dataset()
    aset = build_ece(data, "j", "k")
    mj = fit_linear(aset, "j", NONE, data)
    mk = fit_linear(aset, "k", NONE, data)
    d = check_adjustment_conditions(mj, mk, aset, data)
    # strata are ordered by (pi_j, pi_k): (0.5, 0.25) then (0.5, 0.5)
    assert d.mean_residual["j"].tolist() == [2.0, -1.0]
    assert d.mean_residual["k"].tolist() == [2.0, -1.0]
    assert not d.ok


def test_simulation_arm1_coefficients_converge():
    data = generate_trial(200_000, 13)
    aset = build_ece(data, "2", "1")
    m = fit_linear(aset, "1", CovariateSpec(("X_c", "X_b", "Z_sub")), data)
    np.testing.assert_allclose(m.coef[None], [1.0, 1.0, 1.0, 1.0], atol=0.05)
