"""Participant-level data bound to a compiled assignment schedule.

Records are held column-wise (one numpy array per field) so that estimators
and the Monte Carlo engine can work on whole columns; ``Dataset.records``
materialises row objects on demand.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import AssignmentSchedule, TrialDesign, ZKey, compile_schedule
from .errors import ParseError, SchemaError

__all__ = ["ParticipantRecord", "Dataset", "ColumnMap", "load_records", "parse_column_map"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParticipantRecord:
    id: str
    z: ZKey
    x: dict
    arm: str
    substudy: str | None = None
    outcome: float | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of participant records.

    ``z_index`` indexes ``schedule.keys``, ``arm`` indexes ``schedule.arms``
    and ``substudy`` (if present) indexes ``schedule.substudies``.
    """

    schedule: AssignmentSchedule
    ids: np.ndarray
    z_index: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    numeric: dict[str, np.ndarray] = field(default_factory=dict)
    categorical: dict[str, np.ndarray] = field(default_factory=dict)
    substudy: np.ndarray | None = None
    excluded_missing_outcome: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        cols = [self.z_index, self.arm, self.outcome, *self.numeric.values()]
        cols += list(self.categorical.values())
        if self.substudy is not None:
            cols.append(self.substudy)
        if any(len(c) != n for c in cols):
            raise ValueError("dataset columns have unequal lengths")
        if n and not np.all(np.isfinite(self.outcome)):
            raise ValueError("outcomes must be finite; drop missing outcomes before binding")
        for name, col in self.numeric.items():
            if n and not np.all(np.isfinite(col)):
                raise ValueError(f"covariate {name!r} has missing or non-finite values")
        pi_obs = self.schedule.marginals[self.z_index, self.arm]
        bad = np.flatnonzero(pi_obs <= 0)
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"record {self.ids[i]!r}: observed arm has zero probability "
                f"(arm {self.schedule.arms[self.arm[i]]}, z {self.schedule.keys[self.z_index[i]]})"
            )
        if self.substudy is not None:
            if self.schedule.joint is None:
                raise ValueError("sub-study column given but the design has no sub-study law")
            pj = self.schedule.joint[self.z_index, self.arm, self.substudy]
            bad = np.flatnonzero(pj <= 0)
            if bad.size:
                i = int(bad[0])
                raise ValueError(
                    f"record {self.ids[i]!r}: (arm, sub-study) pair has zero probability"
                )

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n

    @property
    def arms(self) -> tuple[str, ...]:
        return self.schedule.arms

    @property
    def probs(self) -> np.ndarray:
        """(n, J) matrix of pi_j(Z_i)."""
        return self.schedule.marginals[self.z_index]

    def arm_counts(self) -> dict[str, int]:
        counts = np.bincount(self.arm, minlength=len(self.arms))
        return {a: int(c) for a, c in zip(self.arms, counts)}

    @property
    def records(self) -> list[ParticipantRecord]:
        keys = self.schedule.keys
        subs = self.schedule.substudies
        out = []
        for i in range(self.n):
            x = {k: float(v[i]) for k, v in self.numeric.items()}
            x.update({k: str(v[i]) for k, v in self.categorical.items()})
            out.append(
                ParticipantRecord(
                    id=str(self.ids[i]),
                    z=keys[self.z_index[i]],
                    x=x,
                    arm=self.arms[self.arm[i]],
                    substudy=None if self.substudy is None else subs[self.substudy[i]],
                    outcome=float(self.outcome[i]),
                )
            )
        return out

    def covariate_matrix(
        self, numeric: Sequence[str] = (), categorical: Sequence[str] = ()
    ) -> tuple[np.ndarray, tuple[str, ...]]:
        """Expanded covariate matrix (no intercept) and its column names.

        Categorical columns are one-hot coded against their lexicographically
        first level.
        """
        key = (tuple(numeric), tuple(categorical))
        if key in self._cache:
            return self._cache[key]
        blocks, names = [], []
        for name in numeric:
            if name not in self.numeric:
                raise KeyError(f"unknown numeric covariate {name!r}")
            blocks.append(np.asarray(self.numeric[name], dtype=float)[:, None])
            names.append(name)
        for name in categorical:
            if name not in self.categorical:
                raise KeyError(f"unknown categorical covariate {name!r}")
            col = self.categorical[name]
            levels = sorted(set(col.tolist()))
            for lv in levels[1:]:
                blocks.append((col == lv).astype(float)[:, None])
                names.append(f"{name}[{lv}]")
        mat = np.hstack(blocks) if blocks else np.empty((self.n, 0))
        mat.setflags(write=False)
        self._cache[key] = (mat, tuple(names))
        return self._cache[key]


# ---------------------------------------------------------------------------
# CSV loading


@dataclass(frozen=True)
class ColumnMap:
    id: str = "id"
    arm: str = "arm"
    outcome: str = "outcome"
    substudy: str | None = None
    z_factors: Mapping[str, str] | None = None
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()


def parse_column_map(text: str) -> ColumnMap:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise SchemaError("column map: expected an object")
    allowed = {"id", "arm", "outcome", "substudy", "z_factors", "covariates"}
    unknown = doc.keys() - allowed
    if unknown:
        raise SchemaError(f"column map: unknown field(s) {sorted(unknown)}")
    missing = {"id", "arm", "outcome", "z_factors"} - doc.keys()
    if missing:
        raise SchemaError(f"column map: missing field(s) {sorted(missing)}")
    cov = doc.get("covariates", {}) or {}
    extra = cov.keys() - {"numeric", "categorical"}
    if extra:
        raise SchemaError(f"column map covariates: unknown field(s) {sorted(extra)}")
    return ColumnMap(
        id=doc["id"],
        arm=doc["arm"],
        outcome=doc["outcome"],
        substudy=doc.get("substudy"),
        z_factors=dict(doc["z_factors"]),
        numeric=tuple(cov.get("numeric", ())),
        categorical=tuple(cov.get("categorical", ())),
    )


def _float(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {line}: non-numeric {what} {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"line {line}: non-finite {what} {text!r}")
    return value


def load_records(
    text: str,
    design: TrialDesign,
    columns: ColumnMap | None = None,
    schedule: AssignmentSchedule | None = None,
) -> Dataset:
    """Read a UTF-8 CSV into a Dataset bound to ``design``.

    Rows with a blank outcome are dropped and counted in
    ``excluded_missing_outcome``.  A blank covariate cell rejects the file.
    """
    columns = columns or ColumnMap()
    schedule = schedule or compile_schedule(design)
    zmap = columns.z_factors or {name: name for name, _ in design.factors}
    if set(zmap) != {name for name, _ in design.factors}:
        raise SchemaError(f"z_factors must map exactly the design factors {design.factor_levels}")

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV document") from None
    except csv.Error as exc:
        raise ParseError(f"malformed CSV: {exc}") from None
    pos = {name: i for i, name in enumerate(header)}
    needed = [columns.id, columns.arm, columns.outcome, *zmap.values()]
    needed += [*columns.numeric, *columns.categorical]
    if columns.substudy:
        needed.append(columns.substudy)
    absent = [c for c in needed if c not in pos]
    if absent:
        raise ParseError(f"CSV header lacks column(s) {absent}")

    levels = design.factor_levels
    ids, zi, arms, ys, subs = [], [], [], [], []
    num = {c: [] for c in columns.numeric}
    cat = {c: [] for c in columns.categorical}
    excluded = 0
    try:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            cell = lambda c: row[pos[c]].strip()  # noqa: E731
            y_text = cell(columns.outcome)
            if y_text == "":
                excluded += 1
                continue
            y = _float(y_text, "outcome", line)
            zd = {}
            for factor, col in zmap.items():
                lv = cell(col)
                if lv not in levels[factor]:
                    raise ValueError(f"line {line}: unknown level {lv!r} for factor {factor}")
                zd[factor] = lv
            zkey = ZKey.of(zd)
            try:
                zi.append(schedule.index_of(zkey))
            except KeyError:
                raise ValueError(f"line {line}: Z cell {zkey} is not covered by the design") from None
            arms.append(schedule.arm_index(cell(columns.arm)))
            if columns.substudy:
                subs.append(schedule.substudy_index(cell(columns.substudy)))
            for c in columns.numeric:
                t = cell(c)
                if t == "":
                    raise ValueError(f"line {line}: missing covariate {c!r}")
                num[c].append(_float(t, f"covariate {c!r}", line))
            for c in columns.categorical:
                t = cell(c)
                if t == "":
                    raise ValueError(f"line {line}: missing covariate {c!r}")
                cat[c].append(t)
            ids.append(cell(columns.id))
            ys.append(y)
    except csv.Error as exc:
        raise ParseError(f"malformed CSV: {exc}") from None

    if excluded:
        log.info("excluded %d record(s) with missing outcome", excluded)
    return Dataset(
        schedule=schedule,
        ids=np.array(ids, dtype=object),
        z_index=np.array(zi, dtype=np.intp),
        arm=np.array(arms, dtype=np.intp),
        outcome=np.array(ys, dtype=float),
        numeric={c: np.array(v, dtype=float) for c, v in num.items()},
        categorical={c: np.array(v, dtype=object) for c, v in cat.items()},
        substudy=np.array(subs, dtype=np.intp) if columns.substudy else None,
        excluded_missing_outcome=excluded,
    )
