"""Outcome working models fitted within an analysis set.

Models are only used to assist the estimators; they may be misspecified.
Two fits are provided: a single linear regression on the expanded
covariates, and the ANHECOVA fit (a separate intercept and slope block in
every post-stratum).  Both use minimum-norm least squares, so collinear
designs never raise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis_set import AnalysisSet, StrataPartition, build_strata
from .dataset import Dataset
from .errors import InsufficientDataError

__all__ = [
    "CENTER_RTOL",
    "CovariateSpec",
    "FittedModel",
    "Diagnostics",
    "fit_linear",
    "fit_anhecova",
    "center_model",
    "constant_model",
    "check_adjustment_conditions",
    "predictions",
]

CENTER_RTOL = 1e-9


@dataclass(frozen=True)
class CovariateSpec:
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    include_stratum_interactions: bool = False

    @classmethod
    def from_names(cls, names, data: Dataset, anhecova: bool = False) -> "CovariateSpec":
        """Split covariate names into numeric and categorical using the dataset."""
        num, cat = [], []
        for name in names:
            if name in data.numeric:
                num.append(name)
            elif name in data.categorical:
                cat.append(name)
            else:
                raise KeyError(f"unknown covariate {name!r}")
        return cls(tuple(num), tuple(cat), anhecova)


def _stratum_keys(aset: AnalysisSet) -> list[tuple[float, float]]:
    return list(zip(aset.weights_j.tolist(), aset.weights_k.tolist()))


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Affine predictor mu(X) for one arm, optionally with per-stratum blocks.

    ``coef`` maps a stratum key (pi_j, pi_k) to [intercept, slopes...]; the key
    ``None`` holds the global block.  ``offsets`` are the centering terms
    added per stratum key.
    """

    arm: str
    spec: CovariateSpec
    coef: dict
    offsets: dict = field(default_factory=dict)
    n_used: int = 0
    rank: int = 0
    r2: float = float("nan")

    @property
    def stratified(self) -> bool:
        return None not in self.coef

    def predict(self, data: Dataset, aset: AnalysisSet) -> np.ndarray:
        X, _ = data.covariate_matrix(self.spec.numeric, self.spec.categorical)
        X = X[aset.indices]
        if not self.stratified and not self.offsets:
            beta = self.coef[None]
            return beta[0] + X @ beta[1:]
        out = np.empty(aset.n)
        keys = np.column_stack([aset.weights_j, aset.weights_k])
        uniq, labels = np.unique(keys, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
        for h, u in enumerate(uniq):
            key = (float(u[0]), float(u[1]))
            rows = labels == h
            beta = self.coef[None] if None in self.coef else self.coef.get(key)
            if beta is None:
                raise KeyError(f"model has no block for stratum {key}")
            out[rows] = beta[0] + X[rows] @ beta[1:] + self.offsets.get(key, 0.0)
        return out


def constant_model(arm: str, value: float = 0.0) -> FittedModel:
    """mu(X) = value; the zero model turns every augmented estimator into its base form."""
    return FittedModel(arm, CovariateSpec(), {None: np.array([float(value)])})


def predictions(model, data: Dataset, aset: AnalysisSet) -> np.ndarray:
    """Model predictions over the analysis set; arrays pass through unchanged."""
    if isinstance(model, np.ndarray):
        if model.shape != (aset.n,):
            raise ValueError("prediction array must align with the analysis set")
        return model
    return model.predict(data, aset)


def _arm_mask(aset: AnalysisSet, data: Dataset, arm) -> np.ndarray:
    arm = str(arm)
    if arm == aset.arm_j:
        return aset.in_j
    if arm == aset.arm_k:
        return aset.in_k
    return data.arm[aset.indices] == data.schedule.arm_index(arm)


def _ols(D: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, int]:
    """Minimum-norm least squares; column 0 of D is the intercept.

    The intercept is then re-solved from its own score equation with exact
    summation, so an intercept-only fit returns the sample mean exactly.
    """
    beta, _, rank, _ = np.linalg.lstsq(D, y, rcond=None)
    beta[0] = math.fsum((y - D[:, 1:] @ beta[1:]).tolist()) / y.size
    return beta, int(rank)


def _r2(y: np.ndarray, fitted: np.ndarray) -> float:
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0.0:
        return 1.0 if np.allclose(y, fitted) else float("nan")
    return 1.0 - float(np.sum((y - fitted) ** 2)) / tss


def fit_linear(aset: AnalysisSet, arm, spec: CovariateSpec, data: Dataset) -> FittedModel:
    """Least squares fit with intercept on the arm's records in the analysis set."""
    if spec.include_stratum_interactions:
        return fit_anhecova(aset, arm, spec, data)
    mask = _arm_mask(aset, data, arm)
    if not mask.any():
        raise InsufficientDataError(f"no records in arm {arm} within the analysis set")
    X, _ = data.covariate_matrix(spec.numeric, spec.categorical)
    rows = aset.indices[mask]
    D = np.column_stack([np.ones(rows.size), X[rows]])
    y = data.outcome[rows]
    beta, rank = _ols(D, y)
    return FittedModel(str(arm), spec, {None: beta}, {}, int(rows.size), rank, _r2(y, D @ beta))


def fit_anhecova(
    aset: AnalysisSet,
    arm,
    spec: CovariateSpec,
    data: Dataset,
    strata: StrataPartition | None = None,
) -> FittedModel:
    """Stratum-wise least squares: mu(X) = sum_h I(S = h)(a_h + g_h'X).

    A stratum with fewer arm records than parameters falls back to its
    intercept alone; that keeps the stratum mean-residual score equation,
    which is all the centering conditions need.
    """
    strata = strata or build_strata(aset)
    spec = replace(spec, include_stratum_interactions=True)
    mask = _arm_mask(aset, data, arm)
    X, _ = data.covariate_matrix(spec.numeric, spec.categorical)
    p = X.shape[1]
    coef = {}
    rank = 0
    n_used = 0
    fitted_all, y_all = [], []
    for s in strata.strata:
        pos = s.members[mask[s.members]]
        if pos.size == 0:
            raise InsufficientDataError(
                f"stratum {s.id} (pi_j={s.pi_j}, pi_k={s.pi_k}) has no records in arm {arm}"
            )
        rows = aset.indices[pos]
        y = data.outcome[rows]
        if pos.size < 1 + p:
            if p:
                warnings.warn(
                    f"stratum {s.id} has {pos.size} arm-{arm} records for {1 + p} parameters; "
                    "fitting the intercept only",
                    stacklevel=2,
                )
            beta = np.zeros(1 + p)
            beta[0] = math.fsum(y.tolist()) / y.size
            r = 1
            fitted = np.full(y.size, beta[0])
        else:
            D = np.column_stack([np.ones(rows.size), X[rows]])
            beta, r = _ols(D, y)
            fitted = D @ beta
        coef[(s.pi_j, s.pi_k)] = beta
        rank += r
        n_used += int(pos.size)
        fitted_all.append(fitted)
        y_all.append(y)
    y_cat = np.concatenate(y_all)
    return FittedModel(
        str(arm), spec, coef, {}, n_used, rank, _r2(y_cat, np.concatenate(fitted_all))
    )


def center_model(
    model: FittedModel,
    aset: AnalysisSet,
    arm,
    data: Dataset,
    strata: StrataPartition | None = None,
) -> FittedModel:
    """Add each stratum's mean arm residual to the model (idempotent up to rounding)."""
    strata = strata or build_strata(aset)
    mask = _arm_mask(aset, data, arm)
    pred = model.predict(data, aset)
    resid = data.outcome[aset.indices] - pred
    offsets = dict(model.offsets)
    for s in strata.strata:
        pos = s.members[mask[s.members]]
        if pos.size == 0:
            raise InsufficientDataError(f"stratum {s.id} has no records in arm {arm}")
        key = (s.pi_j, s.pi_k)
        offsets[key] = offsets.get(key, 0.0) + math.fsum(resid[pos].tolist()) / pos.size
    coef = model.coef
    if not model.stratified:
        coef = {key: model.coef[None] for key in strata.keys}
    return replace(model, coef=coef, offsets=offsets)


@dataclass(frozen=True)
class Diagnostics:
    """Sample analogues of the efficiency-gain conditions, per arm.

    ``mean_residual[arm][h]``: stratum mean residual.  ``own_cov[arm][h]``:
    stratum covariance of the residual with the arm's own prediction.
    ``cross_cov[arm]``: inverse-probability weighted covariance of the
    residual with the other arm's prediction over the analysis set.
    """

    mean_residual: dict
    own_cov: dict
    cross_cov: dict
    scale: float
    tol: float
    flags: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.flags


def _cov(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - a.mean()) * (b - b.mean())))


def check_adjustment_conditions(
    model_j,
    model_k,
    aset: AnalysisSet,
    data: Dataset,
    strata: StrataPartition | None = None,
    tol: float | None = None,
) -> Diagnostics:
    strata = strata or build_strata(aset)
    y = data.outcome[aset.indices]
    mj = predictions(model_j, data, aset)
    mk = predictions(model_k, data, aset)
    pool = y[aset.in_j | aset.in_k]
    scale = float(np.std(pool)) if pool.size > 1 else 1.0
    scale = scale if scale > 0 else 1.0
    tol = CENTER_RTOL * scale if tol is None else tol

    mean_res, own, cross, flags = {}, {}, {}, []
    sides = (
        (aset.arm_j, aset.in_j, aset.weights_j, mj, mk),
        (aset.arm_k, aset.in_k, aset.weights_k, mk, mj),
    )
    for arm, mask, w, own_pred, other_pred in sides:
        res = y - own_pred
        mr, oc = [], []
        for s in strata.strata:
            pos = s.members[mask[s.members]]
            if pos.size == 0:
                mr.append(float("nan"))
                oc.append(float("nan"))
                continue
            mr.append(math.fsum(res[pos].tolist()) / pos.size)
            oc.append(_cov(res[pos], own_pred[pos]))
        inv = np.where(mask, 1.0 / w, 0.0)
        tot = inv.sum()
        r_bar = float(np.sum(inv * res) / tot)
        o_bar = float(np.sum(inv * other_pred) / tot)
        cc = float(np.sum(inv * (res - r_bar) * (other_pred - o_bar)) / tot)
        mean_res[arm], own[arm], cross[arm] = np.array(mr), np.array(oc), cc
        for h, v in enumerate(mr):
            if not abs(v) <= tol:
                flags.append(f"U: arm {arm} stratum {h} mean residual {v:.3g}")
        for h, v in enumerate(oc):
            if not abs(v) <= tol * scale:
                flags.append(f"gura: arm {arm} stratum {h} covariance {v:.3g}")
        if not abs(cc) <= tol * scale:
            flags.append(f"gura2: arm {arm} cross covariance {cc:.3g}")
    return Diagnostics(mean_res, own, cross, scale, tol, tuple(flags))
