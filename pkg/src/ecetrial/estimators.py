"""Estimators of the paired means (theta_jk, theta_kj) on the eligible population.

Every estimator reads the per-record probabilities and contribution masks
from the AnalysisSet, so restricted sets need no special handling.  Weighted
sums go through ``math.fsum``; results do not depend on record order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis_set import AnalysisSet, StrataPartition
from .dataset import Dataset
from .errors import DegenerateArmError
from .working_model import predictions

__all__ = [
    "METHODS",
    "PairEstimate",
    "estimate_naive",
    "estimate_ipw",
    "estimate_sipw",
    "estimate_aipw",
    "estimate_saipw",
    "estimate_ps",
    "estimate_aps",
]

METHODS = ("naive", "ipw", "sipw", "aipw", "saipw", "ps", "aps")


def fsum(a: np.ndarray) -> float:
    return math.fsum(a.tolist())


@dataclass(frozen=True)
class PairEstimate:
    method: str
    theta_jk: float
    theta_kj: float
    n_jk: int
    arm_j: str = "j"
    arm_k: str = "k"
    delta: tuple[float, float] | None = None
    strata: tuple[dict, ...] | None = None

    def __post_init__(self):
        if not (math.isfinite(self.theta_jk) and math.isfinite(self.theta_kj)):
            raise DegenerateArmError(f"{self.method}: non-finite estimate")
        if self.n_jk <= 0:
            raise ValueError("n_jk must be positive")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta_jk, self.theta_kj])

    @property
    def contrast(self) -> float:
        return self.theta_jk - self.theta_kj


def _check_arms(aset: AnalysisSet, method: str) -> None:
    for arm, mask in ((aset.arm_j, aset.in_j), (aset.arm_k, aset.in_k)):
        if not mask.any():
            raise DegenerateArmError(f"{method}: arm {arm} has no observations in the analysis set")


def _side(aset: AnalysisSet):
    return ((aset.in_j, aset.weights_j), (aset.in_k, aset.weights_k))


def estimate_naive(aset: AnalysisSet, data: Dataset) -> PairEstimate:
    """Unweighted arm means within the analysis set (confounded by Z in general)."""
    _check_arms(aset, "naive")
    y = data.outcome[aset.indices]
    th = [fsum(y[m]) / int(m.sum()) for m, _ in _side(aset)]
    return PairEstimate("naive", th[0], th[1], aset.n, aset.arm_j, aset.arm_k)


def estimate_ipw(aset: AnalysisSet, data: Dataset) -> PairEstimate:
    _check_arms(aset, "ipw")
    y = data.outcome[aset.indices]
    th = [fsum(y[m] / w[m]) / aset.n for m, w in _side(aset)]
    return PairEstimate("ipw", th[0], th[1], aset.n, aset.arm_j, aset.arm_k)


def estimate_sipw(aset: AnalysisSet, data: Dataset) -> PairEstimate:
    """Inverse probability weighting with weights normalised to sum to one."""
    _check_arms(aset, "sipw")
    y = data.outcome[aset.indices]
    th = [fsum(y[m] / w[m]) / fsum(1.0 / w[m]) for m, w in _side(aset)]
    return PairEstimate("sipw", th[0], th[1], aset.n, aset.arm_j, aset.arm_k)


def _augmented(aset, data, model_j, model_k, stabilized: bool, method: str) -> PairEstimate:
    _check_arms(aset, method)
    y = data.outcome[aset.indices]
    preds = (predictions(model_j, data, aset), predictions(model_k, data, aset))
    th, deltas = [], []
    for (m, w), mu in zip(_side(aset), preds):
        resid = fsum((y[m] - mu[m]) / w[m])
        delta = resid / aset.n
        scale = fsum(1.0 / w[m]) if stabilized else aset.n
        th.append(resid / scale + fsum(mu) / aset.n)
        deltas.append(delta)
    return PairEstimate(method, th[0], th[1], aset.n, aset.arm_j, aset.arm_k, tuple(deltas))


def estimate_aipw(aset: AnalysisSet, data: Dataset, model_j, model_k) -> PairEstimate:
    """IPW of the model residuals plus the model mean over the whole analysis set.

    ``delta`` records the residual term (1/n) sum I(A=j)(Y - mu_j(X))/pi_j.
    Models may be FittedModel objects or prediction arrays aligned with the set.
    """
    return _augmented(aset, data, model_j, model_k, False, "aipw")


def estimate_saipw(aset: AnalysisSet, data: Dataset, model_j, model_k) -> PairEstimate:
    return _augmented(aset, data, model_j, model_k, True, "saipw")


def _strata_cells(aset: AnalysisSet, strata: StrataPartition, method: str):
    cells = []
    for s in strata.strata:
        pos = s.members
        mj = pos[aset.in_j[pos]]
        mk = pos[aset.in_k[pos]]
        for arm, m in ((aset.arm_j, mj), (aset.arm_k, mk)):
            if m.size == 0:
                raise DegenerateArmError(
                    f"{method}: stratum {s.id} (pi_j={s.pi_j}, pi_k={s.pi_k}) has no arm-{arm} "
                    "observations"
                )
        cells.append((s, pos, mj, mk))
    return cells


def _summary(cells) -> tuple[dict, ...]:
    return tuple(
        {"id": s.id, "pi_j": s.pi_j, "pi_k": s.pi_k, "n": int(pos.size),
         "n_j": int(mj.size), "n_k": int(mk.size)}
        for s, pos, mj, mk in cells
    )


def estimate_ps(aset: AnalysisSet, data: Dataset, strata: StrataPartition) -> PairEstimate:
    """Post-stratified means: stratum arm means weighted by stratum sizes."""
    cells = _strata_cells(aset, strata, "ps")
    y = data.outcome[aset.indices]
    tj = math.fsum(pos.size * fsum(y[mj]) / mj.size for _, pos, mj, _ in cells) / aset.n
    tk = math.fsum(pos.size * fsum(y[mk]) / mk.size for _, pos, _, mk in cells) / aset.n
    return PairEstimate("ps", tj, tk, aset.n, aset.arm_j, aset.arm_k, strata=_summary(cells))


def estimate_aps(
    aset: AnalysisSet, data: Dataset, strata: StrataPartition, model_j, model_k
) -> PairEstimate:
    """Stratum-wise augmented estimator combined with stratum-size weights."""
    cells = _strata_cells(aset, strata, "aps")
    y = data.outcome[aset.indices]
    mu_j = predictions(model_j, data, aset)
    mu_k = predictions(model_k, data, aset)
    rj = math.fsum(pos.size * fsum(y[mj] - mu_j[mj]) / mj.size for _, pos, mj, _ in cells)
    rk = math.fsum(pos.size * fsum(y[mk] - mu_k[mk]) / mk.size for _, pos, _, mk in cells)
    tj = rj / aset.n + fsum(mu_j) / aset.n
    tk = rk / aset.n + fsum(mu_k) / aset.n
    return PairEstimate(
        "aps", tj, tk, aset.n, aset.arm_j, aset.arm_k,
        delta=(rj / aset.n, rk / aset.n), strata=_summary(cells),
    )
