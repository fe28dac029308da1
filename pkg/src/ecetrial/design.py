"""Trial designs: parsing, validation and compilation to assignment probabilities.

A design lists, for every level combination of the randomization variable Z,
either the direct arm probabilities (multi-arm format) or a two-stage law:
sub-study probabilities followed by within-sub-study arm probabilities
(sub-study format).  Compilation applies the law of total probability

    P(A = j | Z) = sum_r P(R = r | Z) P(A = j | R = r, Z)

in exact rational arithmetic and rounds once, so every compiled marginal is
the correctly rounded value of the decimal inputs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Mapping

import numpy as np

from .errors import SchemaError

__all__ = [
    "WILDCARD",
    "PROB_TOL",
    "ZKey",
    "DesignRow",
    "TrialDesign",
    "AssignmentSchedule",
    "Violation",
    "DesignError",
    "parse_design",
    "serialize_design",
    "compile_schedule",
    "validate_schedule",
]

WILDCARD = "any"
PROB_TOL = 1e-12

MULTI_ARM = "multi-arm"
SUB_STUDY = "sub-study"
FORMATS = (MULTI_ARM, SUB_STUDY)


@dataclass(frozen=True)
class ZKey:
    """Level assignment of the randomization factors.

    Pairs are stored sorted by factor name so equality does not depend on the
    order in which factors were listed.
    """

    factors: tuple[tuple[str, str], ...]

    def __post_init__(self):
        pairs = tuple(sorted((str(k), str(v)) for k, v in self.factors))
        names = [k for k, _ in pairs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate factor name in ZKey {pairs}")
        object.__setattr__(self, "factors", pairs)

    @classmethod
    def of(cls, mapping: Mapping[str, object]) -> "ZKey":
        return cls(tuple((k, str(v)) for k, v in mapping.items()))

    def as_dict(self) -> dict[str, str]:
        return dict(self.factors)

    def __getitem__(self, name: str) -> str:
        return self.as_dict()[name]

    def __str__(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.factors)


@dataclass(frozen=True)
class DesignRow:
    z: ZKey
    direct_probs: dict[str, Fraction] | None = None
    substudy_probs: dict[str, Fraction] | None = None
    substudy_arm_probs: dict[str, dict[str, Fraction]] | None = None


@dataclass(frozen=True)
class TrialDesign:
    arms: tuple[str, ...]
    format: str
    factors: tuple[tuple[str, tuple[str, ...]], ...]
    rows: tuple[DesignRow, ...]

    @property
    def factor_levels(self) -> dict[str, tuple[str, ...]]:
        return dict(self.factors)

    @property
    def substudies(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for row in self.rows:
            for r in row.substudy_probs or ():
                seen.setdefault(r, None)
        return tuple(seen)

    def expand(self, z: ZKey) -> list[ZKey]:
        """Concrete ZKeys covered by a (possibly wildcarded) row key."""
        levels = self.factor_levels
        given = z.as_dict()
        names = [name for name, _ in self.factors]
        choices = [levels[n] if given[n] == WILDCARD else (given[n],) for n in names]
        return [ZKey(tuple(zip(names, combo))) for combo in itertools.product(*choices)]


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str
    zkey: ZKey | None = None
    arm: str | None = None

    def __str__(self) -> str:
        where = []
        if self.zkey is not None:
            where.append(f"z[{self.zkey}]")
        if self.arm is not None:
            where.append(f"arm {self.arm}")
        loc = " ".join(where)
        return f"{self.rule}: {self.detail}" + (f" ({loc})" if loc else "")


class DesignError(ValueError):
    """Value-level problems in a design document; carries every violation found."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


# ---------------------------------------------------------------------------
# parsing


def _prob(value, where: str) -> Fraction:
    if isinstance(value, bool):
        raise SchemaError(f"{where}: probability must be a number, got {value!r}")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, float, str)):
        try:
            return Fraction(str(value))
        except (ValueError, ZeroDivisionError):
            pass
    raise SchemaError(f"{where}: cannot read probability {value!r}")


def _check_keys(obj, required: set, optional: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = required - obj.keys()
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    unknown = obj.keys() - required - optional
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")


def _fmt(x: Fraction) -> str:
    return str(_to_json_number(x))


def _check_simplex(probs: Mapping[str, Fraction], zkey, violations, label) -> None:
    for name, p in probs.items():
        if p < 0 or p > 1:
            violations.append(
                Violation("range", f"{label} probability {_fmt(p)} outside [0, 1]", zkey, name)
            )
    total = sum(probs.values(), Fraction(0))
    if abs(float(total - 1)) > PROB_TOL:
        violations.append(Violation("row sum", f"{label} row sum {_fmt(total)} ≠ 1", zkey))


def parse_design(text: str | bytes) -> TrialDesign:
    """Parse a JSON design document.

    Raises SchemaError for structural problems (missing or unknown fields,
    wrong types) and DesignError, a ValueError, listing every value-level
    violation: probabilities outside [0, 1], maps that do not sum to one,
    undeclared arms or levels and duplicate Z cells.
    """
    try:
        doc = json.loads(text, parse_float=Fraction, parse_int=Fraction)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from exc
    _check_keys(doc, {"arms", "factors", "format", "rows"}, set(), "design")

    if not isinstance(doc["arms"], list) or not doc["arms"]:
        raise SchemaError("design.arms: expected a non-empty array")
    arms = tuple(str(a) for a in doc["arms"])
    if len(set(arms)) != len(arms):
        raise SchemaError("design.arms: duplicate arm identifiers")
    fmt = doc["format"]
    if fmt not in FORMATS:
        raise SchemaError(f"design.format: expected one of {FORMATS}, got {fmt!r}")
    if not isinstance(doc["factors"], dict) or not doc["factors"]:
        raise SchemaError("design.factors: expected a non-empty object")
    factors = []
    for name, levels in doc["factors"].items():
        if not isinstance(levels, list) or not levels:
            raise SchemaError(f"design.factors.{name}: expected a non-empty array")
        levels = tuple(str(lv) for lv in levels)
        if WILDCARD in levels:
            raise SchemaError(f"design.factors.{name}: '{WILDCARD}' is reserved")
        factors.append((str(name), levels))
    factors = tuple(factors)
    level_map = dict(factors)
    if not isinstance(doc["rows"], list) or not doc["rows"]:
        raise SchemaError("design.rows: expected a non-empty array")

    violations: list[Violation] = []
    rows = []
    for i, raw in enumerate(doc["rows"]):
        where = f"design.rows[{i}]"
        if fmt == MULTI_ARM:
            _check_keys(raw, {"z", "probs"}, set(), where)
        else:
            _check_keys(raw, {"z", "substudies"}, set(), where)
        if not isinstance(raw["z"], dict):
            raise SchemaError(f"{where}.z: expected an object")
        missing = level_map.keys() - raw["z"].keys()
        if missing:
            raise SchemaError(f"{where}.z: missing factor(s) {sorted(missing)}")
        unknown = raw["z"].keys() - level_map.keys()
        if unknown:
            raise SchemaError(f"{where}.z: unknown factor(s) {sorted(unknown)}")
        zkey = ZKey.of({k: str(v) for k, v in raw["z"].items()})
        for name, level in zkey.factors:
            if level != WILDCARD and level not in level_map[name]:
                violations.append(
                    Violation("unknown level", f"level {level!r} not declared for {name}", zkey)
                )

        if fmt == MULTI_ARM:
            if not isinstance(raw["probs"], dict):
                raise SchemaError(f"{where}.probs: expected an object")
            probs = {str(a): _prob(p, f"{where}.probs.{a}") for a, p in raw["probs"].items()}
            for a in probs:
                if a not in arms:
                    violations.append(Violation("unknown arm", f"arm {a!r} not declared", zkey, a))
            _check_simplex(probs, zkey, violations, "arm")
            rows.append(DesignRow(zkey, direct_probs=probs))
        else:
            subs = raw["substudies"]
            if not isinstance(subs, dict) or not subs:
                raise SchemaError(f"{where}.substudies: expected a non-empty object")
            sub_probs, sub_arm_probs = {}, {}
            for r, entry in subs.items():
                _check_keys(entry, {"prob", "arm_probs"}, set(), f"{where}.substudies.{r}")
                if not isinstance(entry["arm_probs"], dict):
                    raise SchemaError(f"{where}.substudies.{r}.arm_probs: expected an object")
                r = str(r)
                sub_probs[r] = _prob(entry["prob"], f"{where}.substudies.{r}.prob")
                ap = {
                    str(a): _prob(p, f"{where}.substudies.{r}.arm_probs.{a}")
                    for a, p in entry["arm_probs"].items()
                }
                for a in ap:
                    if a not in arms:
                        violations.append(
                            Violation("unknown arm", f"arm {a!r} not declared", zkey, a)
                        )
                _check_simplex(ap, zkey, violations, f"sub-study {r} arm")
                sub_arm_probs[r] = ap
            _check_simplex(sub_probs, zkey, violations, "sub-study")
            rows.append(
                DesignRow(zkey, substudy_probs=sub_probs, substudy_arm_probs=sub_arm_probs)
            )

    design = TrialDesign(arms, fmt, factors, tuple(rows))
    seen: dict[ZKey, int] = {}
    for i, row in enumerate(design.rows):
        if any(v.rule == "unknown level" and v.zkey == row.z for v in violations):
            continue
        for z in design.expand(row.z):
            if z in seen:
                violations.append(
                    Violation("duplicate ZKey", f"rows {seen[z]} and {i} both cover it", z)
                )
            else:
                seen[z] = i
    if violations:
        raise DesignError(violations)
    return design


def _to_json_number(x: Fraction):
    as_float = float(x)
    if Fraction(Decimal(repr(as_float))) == x:
        if as_float.is_integer():
            return int(as_float)
        return as_float
    return f"{x.numerator}/{x.denominator}"


def serialize_design(design: TrialDesign) -> str:
    """Inverse of parse_design; non-terminating fractions are written as "p/q"."""
    rows = []
    for row in design.rows:
        out: dict = {"z": row.z.as_dict()}
        if design.format == MULTI_ARM:
            out["probs"] = {a: _to_json_number(p) for a, p in row.direct_probs.items()}
        else:
            out["substudies"] = {
                r: {
                    "prob": _to_json_number(p),
                    "arm_probs": {
                        a: _to_json_number(q) for a, q in row.substudy_arm_probs[r].items()
                    },
                }
                for r, p in row.substudy_probs.items()
            }
        rows.append(out)
    doc = {
        "arms": list(design.arms),
        "factors": {name: list(levels) for name, levels in design.factors},
        "format": design.format,
        "rows": rows,
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# compilation


@dataclass(frozen=True, eq=False)
class AssignmentSchedule:
    """Compiled randomization law, one row per concrete ZKey.

    ``marginals[r, j]`` is pi_j(Z) for ``keys[r]``.  For sub-study designs
    ``joint[r, j, s]`` is P(A = j, R = substudies[s] | Z) and
    ``substudy_probs[r, s]`` is P(R = substudies[s] | Z).
    """

    arms: tuple[str, ...]
    keys: tuple[ZKey, ...]
    marginals: np.ndarray
    substudies: tuple[str, ...] | None = None
    joint: np.ndarray | None = None
    substudy_probs: np.ndarray | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index.update({k: i for i, k in enumerate(self.keys)})

    @property
    def rows(self) -> dict[ZKey, np.ndarray]:
        return {k: self.marginals[i] for i, k in enumerate(self.keys)}

    @property
    def has_joint(self) -> bool:
        return self.joint is not None

    def index_of(self, zkey: ZKey) -> int:
        try:
            return self._index[zkey]
        except KeyError:
            raise KeyError(f"ZKey {zkey} has no row in the schedule") from None

    def arm_index(self, arm: str) -> int:
        try:
            return self.arms.index(str(arm))
        except ValueError:
            raise ValueError(f"unknown arm {arm!r}; design arms are {self.arms}") from None

    def substudy_index(self, substudy: str) -> int:
        if self.substudies is None:
            raise ValueError("schedule has no sub-study law (multi-arm format)")
        try:
            return self.substudies.index(str(substudy))
        except ValueError:
            raise ValueError(f"unknown sub-study {substudy!r}") from None

    def pi(self, zkey: ZKey, arm: str) -> float:
        return float(self.marginals[self.index_of(zkey), self.arm_index(arm)])


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def compile_schedule(design: TrialDesign) -> AssignmentSchedule:
    """Compile a validated design into marginal (and joint) assignment probabilities.

    Raises ValueError when a compiled marginal equals one: every arm must keep
    pi_j(Z) < 1.
    """
    arms = design.arms
    jidx = {a: i for i, a in enumerate(arms)}
    keys: list[ZKey] = []
    exact: list[list[Fraction]] = []
    joint_exact: list[list[list[Fraction]]] = []
    sub_exact: list[list[Fraction]] = []
    subs = design.substudies if design.format == SUB_STUDY else None

    for row in design.rows:
        if design.format == MULTI_ARM:
            marg = [Fraction(0)] * len(arms)
            for a, p in row.direct_probs.items():
                marg[jidx[a]] = p
            jt = None
            sp = None
        else:
            jt = [[Fraction(0)] * len(subs) for _ in arms]
            sp = [Fraction(0)] * len(subs)
            for s, r in enumerate(subs):
                pr = row.substudy_probs.get(r, Fraction(0))
                sp[s] = pr
                for a, q in row.substudy_arm_probs.get(r, {}).items():
                    jt[jidx[a]][s] = pr * q
            marg = [sum(jt[j], Fraction(0)) for j in range(len(arms))]
        for z in design.expand(row.z):
            keys.append(z)
            exact.append(marg)
            if jt is not None:
                joint_exact.append(jt)
                sub_exact.append(sp)

    for z, marg in zip(keys, exact):
        for a, p in zip(arms, marg):
            if p >= 1:
                raise ValueError(f"pi_{a}({z}) = 1 violates 0 <= pi < 1")

    marginals = _readonly(np.array([[float(p) for p in m] for m in exact], dtype=float))
    joint = substudy_probs = None
    if subs is not None:
        joint = _readonly(
            np.array([[[float(p) for p in arm] for arm in jt] for jt in joint_exact], dtype=float)
        )
        substudy_probs = _readonly(
            np.array([[float(p) for p in sp] for sp in sub_exact], dtype=float)
        )
    return AssignmentSchedule(
        arms=arms,
        keys=tuple(keys),
        marginals=marginals,
        substudies=subs,
        joint=joint,
        substudy_probs=substudy_probs,
    )


def validate_schedule(schedule: AssignmentSchedule) -> list[Violation]:
    """Check every AssignmentSchedule invariant; an empty list means valid."""
    out: list[Violation] = []
    for r, z in enumerate(schedule.keys):
        row = schedule.marginals[r]
        for j, a in enumerate(schedule.arms):
            p = row[j]
            if not (0.0 <= p <= 1.0):
                out.append(Violation("range", f"pi = {p!r} outside [0, 1]", z, a))
            elif p >= 1.0:
                out.append(Violation("pi < 1", f"pi = {p!r}", z, a))
        total = float(np.sum(row))
        if abs(total - 1.0) > PROB_TOL:
            out.append(Violation("row sum", f"marginals sum to {total!r}", z))
        if schedule.joint is not None:
            jt = schedule.joint[r]
            jtot = float(np.sum(jt))
            if abs(jtot - 1.0) > PROB_TOL:
                out.append(Violation("joint row sum", f"joint sums to {jtot!r}", z))
            for j, a in enumerate(schedule.arms):
                m = float(np.sum(jt[j]))
                if abs(m - row[j]) > PROB_TOL:
                    out.append(
                        Violation(
                            "marginal consistency",
                            f"joint marginal {m!r} differs from stored {row[j]!r}",
                            z,
                            a,
                        )
                    )
    return out
