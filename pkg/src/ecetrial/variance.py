"""Robust covariance estimators for the paired means and contrast inference.

Each ``cov_*`` function returns an estimate of the asymptotic covariance of
sqrt(n_jk) (theta_hat - theta).  Population-level averages over the analysis
set divide by n_jk; the within-stratum sample variances and covariances
(sigma^2, tau^2, the stratum q terms and Gamma) use the unbiased m - 1
divisor.  Neither choice changes the limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri, ndtr

from .analysis_set import AnalysisSet, StrataPartition
from .dataset import Dataset
from .errors import DegenerateArmError, DegenerateVarianceError
from .estimators import PairEstimate, fsum
from .working_model import predictions

__all__ = [
    "CovarianceEstimate",
    "ContrastInference",
    "cov_naive",
    "cov_ipw",
    "cov_sipw",
    "cov_aipw",
    "cov_saipw",
    "cov_ps",
    "cov_aps",
    "contrast_inference",
    "normal_quantile",
]


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    method: str
    sigma: np.ndarray
    n: int
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.sigma, dtype=float)
        s = (s + s.T) / 2.0
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)


def _sym(a11: float, a22: float, a12: float) -> np.ndarray:
    return np.array([[a11, a12], [a12, a22]])


def _mean(a: np.ndarray, n: int) -> float:
    return fsum(a) / n


def cov_naive(aset: AnalysisSet, data: Dataset, estimate: PairEstimate) -> CovarianceEstimate:
    """n_jk times the two-sample variance of the arm means (arms independent)."""
    y = data.outcome[aset.indices]
    out = []
    for arm, m, th in ((aset.arm_j, aset.in_j, estimate.theta_jk),
                       (aset.arm_k, aset.in_k, estimate.theta_kj)):
        c = int(m.sum())
        if c < 2:
            raise DegenerateArmError(f"naive: arm {arm} has {c} observation(s)")
        s2 = fsum((y[m] - th) ** 2) / (c - 1)
        out.append(aset.n * s2 / c)
    return CovarianceEstimate("naive", _sym(out[0], out[1], 0.0), aset.n)


def cov_ipw(aset: AnalysisSet, data: Dataset, estimate: PairEstimate) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    n = aset.n
    mj, mk = aset.in_j, aset.in_k
    tj, tk = estimate.theta_jk, estimate.theta_kj
    d1 = _mean(y[mj] ** 2 / aset.weights_j[mj] ** 2, n)
    d2 = _mean(y[mk] ** 2 / aset.weights_k[mk] ** 2, n)
    return CovarianceEstimate("ipw", _sym(d1 - tj * tj, d2 - tk * tk, -tj * tk), n)


def cov_sipw(aset: AnalysisSet, data: Dataset, estimate: PairEstimate) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    n = aset.n
    mj, mk = aset.in_j, aset.in_k
    d1 = _mean((y[mj] - estimate.theta_jk) ** 2 / aset.weights_j[mj] ** 2, n)
    d2 = _mean((y[mk] - estimate.theta_kj) ** 2 / aset.weights_k[mk] ** 2, n)
    return CovarianceEstimate("sipw", _sym(d1, d2, 0.0), n)


def _wcov(n: int, mask, w, a, b) -> float:
    """(1/n) sum I a b / pi  -  (1/n^2)(sum I a / pi)(sum I b / pi)."""
    aw = a[mask] / w[mask]
    bw = b[mask] / w[mask]
    return fsum(a[mask] * bw) / n - fsum(aw) * fsum(bw) / (n * n)


def _lambda_hat(aset: AnalysisSet, y, mu_j, mu_k) -> tuple[np.ndarray, dict]:
    """Lambda correction built from the weighted q and sigma^2 terms."""
    n = aset.n
    mj, mk, wj, wk = aset.in_j, aset.in_k, aset.weights_j, aset.weights_k
    q_jk_j = _wcov(n, mj, wj, y, mu_j)
    q_kj_k = _wcov(n, mk, wk, y, mu_k)
    q_kj_j = _wcov(n, mj, wj, y, mu_k)
    q_jk_k = _wcov(n, mk, wk, y, mu_j)
    s2_jk = _wcov(n, mj, wj, mu_j, mu_j)
    s2_kj = _wcov(n, mk, wk, mu_k, mu_k)
    q_jk = 0.5 * _wcov(n, mj, wj, mu_j, mu_k) + 0.5 * _wcov(n, mk, wk, mu_j, mu_k)
    lam_jk = 2.0 * q_jk_j - s2_jk
    lam_kj = 2.0 * q_kj_k - s2_kj
    c = q_kj_j + q_jk_k - q_jk
    comps = {
        "lambda_jk": lam_jk, "lambda_kj": lam_kj, "c_jk": c,
        "q_jk_j": q_jk_j, "q_kj_k": q_kj_k, "q_kj_j": q_kj_j, "q_jk_k": q_jk_k,
        "q_jk": q_jk, "sigma2_jk": s2_jk, "sigma2_kj": s2_kj,
    }
    return _sym(lam_jk, lam_kj, c), comps


def _deltas(aset, y, mu_j, mu_k) -> tuple[float, float]:
    n = aset.n
    mj, mk = aset.in_j, aset.in_k
    return (
        _mean((y[mj] - mu_j[mj]) / aset.weights_j[mj], n),
        _mean((y[mk] - mu_k[mk]) / aset.weights_k[mk], n),
    )


def cov_aipw(
    aset: AnalysisSet, data: Dataset, model_j, model_k, estimate: PairEstimate | None = None
) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    mu_j = predictions(model_j, data, aset)
    mu_k = predictions(model_k, data, aset)
    n = aset.n
    mj, mk = aset.in_j, aset.in_k
    if not (mj.any() and mk.any()):
        raise DegenerateArmError("aipw: an arm has no observations")
    d1 = _mean((y[mj] - mu_j[mj]) ** 2 / aset.weights_j[mj] ** 2, n)
    d2 = _mean((y[mk] - mu_k[mk]) ** 2 / aset.weights_k[mk] ** 2, n)
    lam, comps = _lambda_hat(aset, y, mu_j, mu_k)
    dj, dk = _deltas(aset, y, mu_j, mu_k)
    sigma = _sym(d1, d2, 0.0) + lam - np.outer([dj, dk], [dj, dk])
    comps.update(delta_jk=dj, delta_kj=dk)
    return CovarianceEstimate("aipw", sigma, n, comps)


def cov_saipw(
    aset: AnalysisSet, data: Dataset, model_j, model_k, estimate: PairEstimate | None = None
) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    mu_j = predictions(model_j, data, aset)
    mu_k = predictions(model_k, data, aset)
    n = aset.n
    mj, mk = aset.in_j, aset.in_k
    if not (mj.any() and mk.any()):
        raise DegenerateArmError("saipw: an arm has no observations")
    dj, dk = _deltas(aset, y, mu_j, mu_k)
    d1 = _mean((y[mj] - mu_j[mj] - dj) ** 2 / aset.weights_j[mj] ** 2, n)
    d2 = _mean((y[mk] - mu_k[mk] - dk) ** 2 / aset.weights_k[mk] ** 2, n)
    lam, comps = _lambda_hat(aset, y, mu_j, mu_k)
    comps.update(delta_jk=dj, delta_kj=dk)
    return CovarianceEstimate("saipw", _sym(d1, d2, 0.0) + lam, n, comps)


def _svar(a: np.ndarray) -> float:
    m = a.size
    mean = fsum(a) / m
    return fsum((a - mean) ** 2) / (m - 1)


def _scov(a: np.ndarray, b: np.ndarray) -> float:
    m = a.size
    ma, mb = fsum(a) / m, fsum(b) / m
    return fsum((a - ma) * (b - mb)) / (m - 1)


def _ps_cells(aset: AnalysisSet, strata: StrataPartition, method: str):
    cells = []
    for s in strata.strata:
        pos = s.members
        pj = pos[aset.in_j[pos]]
        pk = pos[aset.in_k[pos]]
        for arm, m in ((aset.arm_j, pj), (aset.arm_k, pk)):
            if m.size < 2:
                raise DegenerateArmError(
                    f"{method}: stratum {s.id} (pi_j={s.pi_j}, pi_k={s.pi_k}) has {m.size} "
                    f"arm-{arm} observation(s); the variance needs at least 2"
                )
        cells.append((s, pos, pj, pk))
    return cells


def _gamma(aset: AnalysisSet, y, cells) -> np.ndarray:
    """Sample covariance matrix of the per-record stratum means (Ybar_j(S_i), Ybar_k(S_i))."""
    gj = np.empty(aset.n)
    gk = np.empty(aset.n)
    for _, pos, pj, pk in cells:
        gj[pos] = fsum(y[pj]) / pj.size
        gk[pos] = fsum(y[pk]) / pk.size
    if aset.n < 2:
        return np.zeros((2, 2))
    return _sym(_svar(gj), _svar(gk), _scov(gj, gk))


def cov_ps(
    aset: AnalysisSet, data: Dataset, strata: StrataPartition, estimate: PairEstimate | None = None
) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    cells = _ps_cells(aset, strata, "ps")
    n = aset.n
    t1, t2 = [], []
    for _, pos, pj, pk in cells:
        w = pos.size / n
        t1.append(w * _svar(y[pj]) * pos.size / pj.size)
        t2.append(w * _svar(y[pk]) * pos.size / pk.size)
    gamma = _gamma(aset, y, cells)
    sigma = _sym(math.fsum(t1), math.fsum(t2), 0.0) + gamma
    return CovarianceEstimate("ps", sigma, n, {"gamma": gamma})


def cov_aps(
    aset: AnalysisSet,
    data: Dataset,
    strata: StrataPartition,
    model_j,
    model_k,
    estimate: PairEstimate | None = None,
) -> CovarianceEstimate:
    y = data.outcome[aset.indices]
    mu_j = predictions(model_j, data, aset)
    mu_k = predictions(model_k, data, aset)
    cells = _ps_cells(aset, strata, "aps")
    n = aset.n
    acc = np.zeros((2, 2))
    parts = []
    for s, pos, pj, pk in cells:
        w = pos.size / n
        tau_j = _svar(y[pj] - mu_j[pj])
        tau_k = _svar(y[pk] - mu_k[pk])
        if pos.size >= 2:
            s2_jk = _svar(mu_j[pos])
            s2_kj = _svar(mu_k[pos])
            q_jk = _scov(mu_j[pos], mu_k[pos])
        else:
            s2_jk = s2_kj = q_jk = 0.0
        lam_jk = 2.0 * _scov(y[pj], mu_j[pj]) - s2_jk
        lam_kj = 2.0 * _scov(y[pk], mu_k[pk]) - s2_kj
        c = _scov(y[pj], mu_k[pj]) + _scov(y[pk], mu_j[pk]) - q_jk
        block = _sym(tau_j * pos.size / pj.size, tau_k * pos.size / pk.size, 0.0)
        block += _sym(lam_jk, lam_kj, c)
        acc += w * block
        parts.append({"stratum": s.id, "lambda_jk": lam_jk, "lambda_kj": lam_kj, "c_jk": c})
    gamma = _gamma(aset, y, cells)
    return CovarianceEstimate("aps", acc + gamma, n, {"gamma": gamma, "strata": parts})


# ---------------------------------------------------------------------------
# inference


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    return float(ndtri(p))


@dataclass(frozen=True)
class ContrastInference:
    contrast: tuple[float, float]
    estimate: float
    se: float
    ci: tuple[float, float]
    alpha: float
    z: float
    p_value: float
    margin: float | None = None
    noninferior: bool | None = None

    def as_dict(self) -> dict:
        return {
            "contrast": list(self.contrast),
            "estimate": self.estimate,
            "se": self.se,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "z": self.z,
            "p_value": self.p_value,
            "margin": self.margin,
            "noninferior": self.noninferior,
        }


def contrast_inference(
    estimate: PairEstimate,
    cov: CovarianceEstimate,
    c=(1.0, -1.0),
    alpha: float = 0.05,
    margin: float | None = None,
) -> ContrastInference:
    """Normal-theory inference on c' theta with SE = sqrt(c' Sigma c / n_jk).

    Non-inferiority is declared when the lower confidence bound exceeds
    ``margin``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    c = np.asarray(c, dtype=float)
    var = float(c @ cov.sigma @ c)
    if not var > 0.0:
        raise DegenerateVarianceError(f"contrast variance {var!r} is not positive")
    se = math.sqrt(var / estimate.n_jk)
    est = float(c @ estimate.theta)
    q = normal_quantile(1.0 - alpha / 2.0)
    lo, hi = est - q * se, est + q * se
    z = est / se
    p = float(2.0 * ndtr(-abs(z)))
    ni = None if margin is None else bool(lo > margin)
    return ContrastInference(
        (float(c[0]), float(c[1])), est, se, (lo, hi), alpha, z, p, margin, ni
    )
