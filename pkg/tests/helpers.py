"""Small builders shared by the test modules."""

from __future__ import annotations

import json

import numpy as np

from ecetrial.dataset import Dataset
from ecetrial.design import ZKey, compile_schedule, parse_design

D1_DESIGN = {
    "arms": ["j", "k", "m"],
    "factors": {"Z": ["a", "b"]},
    "format": "multi-arm",
    "rows": [
        {"z": {"Z": "a"}, "probs": {"j": 0.5, "k": 0.5}},
        {"z": {"Z": "b"}, "probs": {"j": 0.5, "k": 0.25, "m": 0.25}},
    ],
}

# (Z level, arm, outcome)
D1_ROWS = [
    ("a", "j", 1.0), ("a", "j", 3.0), ("a", "k", 2.0), ("a", "k", 4.0),
    ("b", "j", 5.0), ("b", "k", 6.0), ("b", "m", 0.0),
]

DESIGN3 = {
    "arms": ["1", "2", "3"],
    "factors": {"EW": ["1", "2"]},
    "format": "sub-study",
    "rows": [
        {"z": {"EW": "1"}, "substudies": {
            "1": {"prob": 1, "arm_probs": {"1": 0.5, "2": 0.5}}}},
        {"z": {"EW": "2"}, "substudies": {
            "1": {"prob": "1/3", "arm_probs": {"1": 0.5, "2": 0.5}},
            "2": {"prob": "2/3", "arm_probs": {"1": 0.5, "3": 0.5}}}},
    ],
}


def design_text(doc: dict) -> str:
    return json.dumps(doc)


def make_dataset(design_doc, rows, numeric=None, substudy=None, factor="Z"):
    """Dataset from (level, arm, outcome) rows of a one-factor design."""
    sched = compile_schedule(parse_design(design_text(design_doc)))
    zi = np.array([sched.index_of(ZKey.of({factor: z})) for z, _, _ in rows], dtype=np.intp)
    arm = np.array([sched.arm_index(a) for _, a, _ in rows], dtype=np.intp)
    y = np.array([v for _, _, v in rows], dtype=float)
    num = {k: np.asarray(v, dtype=float) for k, v in (numeric or {}).items()}
    sub = None
    if substudy is not None:
        sub = np.array([sched.substudy_index(s) for s in substudy], dtype=np.intp)
    return Dataset(sched, np.arange(len(rows)), zi, arm, y, num, {}, sub)


def d1_dataset(x=None):
    numeric = {"x": x} if x is not None else None
    return make_dataset(D1_DESIGN, D1_ROWS, numeric)


def random_dataset(rng: np.random.Generator, n_per_cell=(2, 6), strata_probs=None):
    """A small random two-arm dataset with 2 or 3 pi-strata and one covariate.

    Every stratum-arm cell gets at least ``n_per_cell[0]`` records.
    """
    strata_probs = strata_probs or [(0.5, 0.5), (0.5, 0.25), (0.2, 0.6)]
    h = int(rng.integers(min(2, len(strata_probs)), len(strata_probs) + 1))
    probs = strata_probs[:h]
    levels = [f"s{i}" for i in range(h)]
    rows = []
    for lv, (pj, pk) in zip(levels, probs):
        p = {"j": pj, "k": pk}
        rest = round(1.0 - pj - pk, 12)
        if rest > 0:
            p["m"] = rest
        rows.append({"z": {"Z": lv}, "probs": p})
    doc = {"arms": ["j", "k", "m"], "factors": {"Z": levels}, "format": "multi-arm", "rows": rows}
    recs = []
    for lv, (pj, pk) in zip(levels, probs):
        for arm in ("j", "k"):
            for _ in range(int(rng.integers(*n_per_cell))):
                recs.append((lv, arm, float(rng.normal(3.0 + pj, 2.0))))
        if pj + pk < 1:
            for _ in range(int(rng.integers(0, 3))):
                recs.append((lv, "m", float(rng.normal())))
    order = rng.permutation(len(recs))
    recs = [recs[i] for i in order]
    x = rng.normal(size=len(recs))
    ys = [(z, a, y + 1.5 * xi) for (z, a, y), xi in zip(recs, x)]
    return make_dataset(doc, ys, {"x": x})


SIMPLIFY_COLUMNS = {
    "id": "pid", "arm": "arm", "outcome": "dfev1", "substudy": "study",
    "z_factors": {"HS": "hs", "DA": "da", "EW": "ew"},
    "covariates": {"numeric": ["age", "baseline_fev"], "categorical": ["sex"]},
}


def simplify_csv(seed: int = 0, effect: float = 0.0, n_hs_only=18, n_da_only=139, n_both=427,
                 missing=0) -> str:
    """Synthetic SIMPLIFY-shaped trial with a known common treatment effect.

    Every arm has outcome mean ``effect`` relative to continuing therapy
    (arm 1); outcomes depend on age, baseline FEV1, sex and the enrollment
    window so the naive comparison is confounded.
    """
    from ecetrial.design import ZKey, compile_schedule, parse_design
    from ecetrial.simulation import _load_text

    rng = np.random.default_rng(seed)
    sched = compile_schedule(parse_design(_load_text("simplify.json")))
    lines = ["pid,hs,da,ew,study,arm,age,baseline_fev,sex,dfev1"]
    groups = [("1", "0", n_hs_only), ("0", "1", n_da_only), ("1", "1", n_both)]
    pid = 0
    for hs, da, count in groups:
        for _ in range(count):
            ew = "1" if rng.random() < 0.5 else "2"
            r = sched.index_of(ZKey.of({"HS": hs, "DA": da, "EW": ew}))
            flat = sched.joint[r].ravel()
            cell = rng.choice(flat.size, p=flat / flat.sum())
            arm, sub = divmod(cell, len(sched.substudies))
            age = rng.uniform(12, 60)
            fev = rng.normal(95, 12)
            sex = "F" if rng.random() < 0.5 else "M"
            y = (0.04 * (age - 30) - 0.05 * (fev - 95) + (0.8 if ew == "2" else -0.8)
                 + (effect if arm != 0 else 0.0) + rng.normal(0, 4))
            y_text = "" if pid < missing else f"{y:.6f}"
            lines.append(f"p{pid},{hs},{da},{ew},{sched.substudies[sub]},{sched.arms[arm]},"
                         f"{age:.3f},{fev:.3f},{sex},{y_text}")
            pid += 1
    return "\n".join(lines) + "\n"


def d1_csv() -> str:
    rows = ["id,Z,arm,outcome"]
    rows += [f"r{i},{z},{a},{y}" for i, (z, a, y) in enumerate(D1_ROWS)]
    return "\n".join(rows) + "\n"
