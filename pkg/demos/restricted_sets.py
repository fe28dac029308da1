"""Restricted analysis sets on a two-window, two-sub-study design.

In window 1 everyone enters sub-study 1 (arms 1 and 2).  In window 2 a third
of participants enter sub-study 1 and the rest enter sub-study 2 (arms 1
and 3).  Keeping only sub-study 1 records for the comparison of arms 1 and 2
re-weights each record by P(A = a, R = 1 | Z): 1/2 in window 1, 1/6 in
window 2.  Keeping only sub-study 2 breaks positivity for window 1.
"""

import json

import numpy as np

from ecetrial import (
    Dataset,
    PositivityError,
    Selector,
    ZKey,
    build_ece,
    build_restricted,
    compile_schedule,
    estimate_sipw,
    parse_design,
)

DESIGN = {
    "arms": ["1", "2", "3"],
    "factors": {"EW": ["1", "2"]},
    "format": "sub-study",
    "rows": [
        {"z": {"EW": "1"}, "substudies": {"1": {"prob": 1, "arm_probs": {"1": 0.5, "2": 0.5}}}},
        {"z": {"EW": "2"}, "substudies": {
            "1": {"prob": "1/3", "arm_probs": {"1": 0.5, "2": 0.5}},
            "2": {"prob": "2/3", "arm_probs": {"1": 0.5, "3": 0.5}}}},
    ],
}

sched = compile_schedule(parse_design(json.dumps(DESIGN)))
rng = np.random.default_rng(11)
n = 20_000
ew = (rng.random(n) >= 1 / 3).astype(int)
rows = np.array([sched.index_of(ZKey.of({"EW": "1"})), sched.index_of(ZKey.of({"EW": "2"}))])[ew]
arm = np.empty(n, dtype=np.intp)
sub = np.empty(n, dtype=np.intp)
for r in (0, 1):
    idx = np.flatnonzero(rows == r)
    flat = sched.joint[r].ravel()
    cell = rng.choice(flat.size, size=idx.size, p=flat / flat.sum())
    arm[idx], sub[idx] = np.divmod(cell, len(sched.substudies))
# window 2 has better outcomes, so ignoring the design misstates the arm means
y = 1.0 + 1.5 * ew + np.array([0.0, 1.0, 2.0])[arm] + rng.normal(size=n)
data = Dataset(sched, np.arange(n), rows.astype(np.intp), arm, y, {}, {}, sub)

full = build_ece(data, "1", "2")
restricted = build_restricted(data, "1", "2", Selector.by_substudy("1"))
print("pi~ by window:", sorted(set(zip(restricted.weights_j.tolist(), rows[restricted.indices].tolist()))))
print("SIPW, all eligible records:   ", estimate_sipw(full, data).theta.round(3))
print("SIPW, sub-study 1 records only:", estimate_sipw(restricted, data).theta.round(3))
print("target: (1 + 1.5 * 2/3, 2 + 1.5 * 2/3) = (2.0, 3.0)")

try:
    build_restricted(data, "1", "2", Selector.by_substudy("2"))
except PositivityError as err:
    print("sub-study 2 only:", err)
