"""Concurrently eligible analysis sets, post-strata and restricted selections.

The analysis set for arms (j, k) holds every record with pi_j(Z) > 0 and
pi_k(Z) > 0.  A restricted set keeps that population but only lets records
with g(A, R) in C contribute outcomes, re-weighting with

    pi~_j(Z) = P(A = j, g(A, R) in C | Z).

This is the unrestricted problem with the "treatment" redefined as
{A = j and selected}, so every estimator and variance formula applies
unchanged once it reads ``in_j``/``weights_j`` from the set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .dataset import Dataset
from .design import ZKey
from .errors import EmptyEceError, PositivityError

__all__ = [
    "AnalysisSet",
    "Selector",
    "Stratum",
    "StrataPartition",
    "build_ece",
    "build_restricted",
    "build_strata",
    "empirical_weights",
]


@dataclass(frozen=True)
class Selector:
    """Deterministic predicate g(A, R) in C.

    kind is "substudy" (R in ``substudies``), "arms" (A in {j, k}) or
    "pairs" (explicit (arm, sub-study) pairs).
    """

    kind: str
    substudies: frozenset = frozenset()
    pairs: frozenset = frozenset()

    @classmethod
    def by_substudy(cls, *ids) -> "Selector":
        return cls("substudy", substudies=frozenset(str(i) for i in ids))

    @classmethod
    def arms_only(cls) -> "Selector":
        return cls("arms")

    @classmethod
    def allowed_pairs(cls, pairs: Iterable[tuple]) -> "Selector":
        return cls("pairs", pairs=frozenset((str(a), str(r)) for a, r in pairs))

    @classmethod
    def parse(cls, text: str) -> "Selector":
        """Parse the CLI forms ``substudy=1``, ``substudy=1|2`` and ``arms-only``."""
        text = text.strip()
        if text == "arms-only":
            return cls.arms_only()
        if text.startswith("substudy="):
            ids = [s for s in text.split("=", 1)[1].split("|") if s]
            if ids:
                return cls.by_substudy(*ids)
        raise ValueError(f"cannot parse subset selector {text!r}")

    @property
    def uses_substudy(self) -> bool:
        return self.kind in ("substudy", "pairs")

    def describe(self) -> str:
        if self.kind == "arms":
            return "A in {j, k}"
        if self.kind == "substudy":
            return "R in {" + ", ".join(sorted(self.substudies)) + "}"
        return "(A, R) in {" + ", ".join(f"({a}, {r})" for a, r in sorted(self.pairs)) + "}"


@dataclass(frozen=True, eq=False)
class AnalysisSet:
    """Analysis set for the ordered arm pair (arm_j, arm_k).

    Arrays are aligned with ``indices`` (record indices of the eligible
    population, ascending).  ``in_j`` marks records that contribute arm-j
    outcomes; ``n`` is the size of the eligible population.
    """

    arm_j: str
    arm_k: str
    j: int
    k: int
    indices: np.ndarray
    z_index: np.ndarray
    weights_j: np.ndarray
    weights_k: np.ndarray
    in_j: np.ndarray
    in_k: np.ndarray
    selector: Selector | None = None
    selected: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def restricted(self) -> bool:
        return self.selector is not None

    @property
    def selected_indices(self) -> np.ndarray:
        """Records contributing outcomes (the restricted set when a selector is set)."""
        if self.selected is None:
            return self.indices
        return self.indices[self.selected]

    def swapped(self) -> "AnalysisSet":
        """Same set with the roles of j and k exchanged."""
        return replace(
            self,
            arm_j=self.arm_k,
            arm_k=self.arm_j,
            j=self.k,
            k=self.j,
            weights_j=self.weights_k,
            weights_k=self.weights_j,
            in_j=self.in_k,
            in_k=self.in_j,
        )


def _pair(data: Dataset, j, k) -> tuple[int, int]:
    ji, ki = data.schedule.arm_index(j), data.schedule.arm_index(k)
    if ji == ki:
        raise ValueError("arms j and k must differ")
    return ji, ki


def build_ece(data: Dataset, j, k) -> AnalysisSet:
    """All records with pi_j(Z) > 0 and pi_k(Z) > 0.

    Raises EmptyEceError when no record qualifies: the two arms are never
    concurrently available, so no randomized comparison exists.
    """
    ji, ki = _pair(data, j, k)
    probs = data.schedule.marginals[data.z_index]
    pj, pk = probs[:, ji], probs[:, ki]
    idx = np.flatnonzero((pj > 0) & (pk > 0))
    if idx.size == 0:
        raise EmptyEceError(
            f"no record is concurrently eligible for arms {data.arms[ji]} and {data.arms[ki]}"
        )
    arm = data.arm[idx]
    return AnalysisSet(
        arm_j=data.arms[ji],
        arm_k=data.arms[ki],
        j=ji,
        k=ki,
        indices=idx,
        z_index=data.z_index[idx],
        weights_j=pj[idx],
        weights_k=pk[idx],
        in_j=arm == ji,
        in_k=arm == ki,
    )


def _selection_probs(schedule, sel: Selector, ji: int, ki: int, arm: int) -> np.ndarray:
    """pi~_arm(Z) for every schedule row."""
    if sel.kind == "arms":
        return schedule.marginals[:, arm].copy() if arm in (ji, ki) else np.zeros(len(schedule.keys))
    if schedule.joint is None:
        raise ValueError("selectors over sub-study need a sub-study format design")
    if sel.kind == "substudy":
        cols = [s for s, r in enumerate(schedule.substudies) if r in sel.substudies]
    else:
        name = schedule.arms[arm]
        cols = [s for s, r in enumerate(schedule.substudies) if (name, r) in sel.pairs]
    return schedule.joint[:, arm, cols].sum(axis=1) if cols else np.zeros(len(schedule.keys))


def _record_selected(data: Dataset, sel: Selector, ji: int, ki: int, idx) -> np.ndarray:
    arm = data.arm[idx]
    if sel.kind == "arms":
        return (arm == ji) | (arm == ki)
    if data.substudy is None:
        raise ValueError("selector references the sub-study but the dataset has no sub-study column")
    subs = data.schedule.substudies
    r = data.substudy[idx]
    if sel.kind == "substudy":
        ok = np.array([s in sel.substudies for s in subs])
        return ok[r]
    names = data.arms
    return np.array([(names[a], subs[s]) in sel.pairs for a, s in zip(arm, r)], dtype=bool)


def build_restricted(data: Dataset, j, k, sel: Selector) -> AnalysisSet:
    """Analysis set whose outcomes come only from records with g(A, R) in C.

    Raises PositivityError if pi~_j(Z) or pi~_k(Z) is zero on any Z row where
    both arms are available.
    """
    ji, ki = _pair(data, j, k)
    sched = data.schedule
    if sel.uses_substudy and not sched.has_joint:
        raise ValueError("selectors over sub-study need a sub-study format design")
    tj = _selection_probs(sched, sel, ji, ki, ji)
    tk = _selection_probs(sched, sel, ji, ki, ki)
    eligible = (sched.marginals[:, ji] > 0) & (sched.marginals[:, ki] > 0)
    for r in np.flatnonzero(eligible):
        for arm, t in ((ji, tj), (ki, tk)):
            if t[r] <= 0:
                z: ZKey = sched.keys[r]
                raise PositivityError(
                    f"P(A={sched.arms[arm]}, {sel.describe()} | Z={z}) = 0 although both arms "
                    "are available",
                    zkey=z,
                    arm=sched.arms[arm],
                )
    base = build_ece(data, j, k)
    selected = _record_selected(data, sel, ji, ki, base.indices)
    return replace(
        base,
        weights_j=tj[base.z_index],
        weights_k=tk[base.z_index],
        in_j=base.in_j & selected,
        in_k=base.in_k & selected,
        selector=sel,
        selected=selected,
    )


@dataclass(frozen=True)
class Stratum:
    id: int
    pi_j: float
    pi_k: float
    members: np.ndarray
    z_index: int | None = None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class StrataPartition:
    """Post-strata of an analysis set.

    ``labels[p]`` is the stratum id of the record at position p of the
    analysis set; ``strata[h].members`` holds positions, not record indices.
    """

    strata: tuple[Stratum, ...]
    labels: np.ndarray
    by: str = "pi"

    def __len__(self) -> int:
        return len(self.strata)

    @property
    def keys(self) -> list[tuple[float, float]]:
        return [(s.pi_j, s.pi_k) for s in self.strata]


def build_strata(aset: AnalysisSet, by: str = "pi") -> StrataPartition:
    """Partition the set into cells of constant (pi_j, pi_k).

    ``by="pi"`` keys strata on the exact pair of assignment probabilities;
    ``by="z"`` keys on the full Z cell (the finer stratification).
    """
    if aset.n == 0:
        raise EmptyEceError("cannot stratify an empty analysis set")
    if by == "pi":
        keys = np.column_stack([aset.weights_j, aset.weights_k])
        uniq, labels = np.unique(keys, axis=0, return_inverse=True)
        labels = labels.reshape(-1)
        strata = tuple(
            Stratum(h, float(u[0]), float(u[1]), np.flatnonzero(labels == h))
            for h, u in enumerate(uniq)
        )
    elif by == "z":
        uniq, labels = np.unique(aset.z_index, return_inverse=True)
        labels = labels.reshape(-1)
        strata = []
        for h, z in enumerate(uniq):
            members = np.flatnonzero(labels == h)
            p = members[0]
            strata.append(
                Stratum(h, float(aset.weights_j[p]), float(aset.weights_k[p]), members, int(z))
            )
        strata = tuple(strata)
    else:
        raise ValueError(f"unknown stratification {by!r}")
    return StrataPartition(strata, labels.astype(np.intp), by)


def empirical_weights(aset: AnalysisSet, strata: StrataPartition) -> AnalysisSet:
    """Replace known probabilities with within-stratum sample proportions."""
    H = len(strata)
    n_h = np.bincount(strata.labels, minlength=H).astype(float)
    nj_h = np.bincount(strata.labels, weights=aset.in_j, minlength=H)
    nk_h = np.bincount(strata.labels, weights=aset.in_k, minlength=H)
    wj = (nj_h / n_h)[strata.labels]
    wk = (nk_h / n_h)[strata.labels]
    return replace(aset, weights_j=wj, weights_k=wk)
