"""Monte Carlo study of the estimators under a four-arm, three sub-study platform trial.

Covariates: X_c ~ U(-3, 3), X_b ~ Bernoulli(0.5), Z_sub ~ Bernoulli(0.8) and a
latent U ~ N(0, 1).  The enrollment window Z_EW in {1, 2, 3} follows a
softmax in (X_c, X_b, Z_sub, U), so U links enrollment time to outcomes.
Participants are randomized to a sub-study given Z = (Z_EW, Z_sub) and then
1:1 to the two arms of that sub-study.

Every run draws from its own Philox substream keyed by (seed, run index),
and all variates come from inverse-CDF transforms of open-interval
uniforms.  Reports therefore depend only on the configuration, never on
the number of worker processes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.special import ndtri

from .analysis_set import AnalysisSet, build_ece, build_strata, empirical_weights
from .dataset import Dataset
from .design import AssignmentSchedule, TrialDesign, ZKey, compile_schedule, parse_design
from .errors import ConfigError, EceTrialError
from .estimators import (
    estimate_aipw,
    estimate_aps,
    estimate_ipw,
    estimate_naive,
    estimate_ps,
    estimate_saipw,
    estimate_sipw,
)
from .jsonio import dumps
from .variance import (
    contrast_inference,
    cov_aipw,
    cov_aps,
    cov_ipw,
    cov_naive,
    cov_ps,
    cov_saipw,
    cov_sipw,
)
from .working_model import CovariateSpec, center_model, fit_anhecova, fit_linear

__all__ = [
    "SIM_METHODS",
    "SIM_COVARIATES",
    "simulation_design",
    "simulation_schedule",
    "draw_population",
    "generate_trial",
    "true_contrast_oracle",
    "naive_limit_oracle",
    "SimulationConfig",
    "bundled_config",
    "bundled_design_text",
    "MethodSummary",
    "SimulationReport",
    "run_monte_carlo",
]

SIM_METHODS = (
    "naive", "ipw", "sipw", "aipw", "saipw", "saipw_s", "ps", "aps", "ps_z", "aps_z",
)
SIM_COVARIATES = ("X_c", "X_b", "Z_sub")
DEFAULT_PAIRS = (("2", "1"), ("3", "1"), ("4", "1"))
_HALF_ULP = 2.0 ** -54
_CHUNK = 1_000_000


def _load_text(name: str) -> str:
    return resources.files("ecetrial").joinpath("data", name).read_text(encoding="utf-8")


def bundled_design_text(name: str) -> str:
    """JSON text of a bundled design: "simulation" or "simplify"."""
    if name not in ("simulation", "simplify"):
        raise ValueError(f"no bundled design named {name!r}")
    return _load_text(f"{name}.json")


@lru_cache(maxsize=1)
def simulation_design() -> TrialDesign:
    return parse_design(_load_text("simulation.json"))


@lru_cache(maxsize=1)
def simulation_schedule() -> AssignmentSchedule:
    return compile_schedule(simulation_design())


@lru_cache(maxsize=1)
def _z_lookup() -> np.ndarray:
    """Schedule row for (Z_EW - 1, Z_sub)."""
    sched = simulation_schedule()
    table = np.empty((3, 2), dtype=np.intp)
    for ew in range(3):
        for sub in range(2):
            table[ew, sub] = sched.index_of(ZKey.of({"EW": str(ew + 1), "sub": str(sub)}))
    return table


# ---------------------------------------------------------------------------
# data generation


def _stream(seed, run: int | None = None) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    elif run is None:
        ss = np.random.SeedSequence(int(seed))
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(run),))
    return np.random.Generator(np.random.Philox(ss))


def _uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1)."""
    return rng.random(size) + _HALF_ULP


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one category per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.inf
    return np.argmax(u[:, None] < cdf, axis=1)


def draw_population(m: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Covariates, enrollment window and all four potential outcomes for m people."""
    u = _uniform(rng, (m, 10))
    x_c = -3.0 + 6.0 * u[:, 0]
    x_b = (u[:, 1] < 0.5).astype(float)
    z_sub = (u[:, 2] < 0.8).astype(float)
    lat = ndtri(u[:, 3])
    q = np.column_stack([
        0.5 + x_c + 2.0 * x_b - z_sub + lat,
        1.0 + 2.0 * x_c + x_b - z_sub + lat,
        -0.5 + x_c + x_b + z_sub + lat,
    ])
    q -= q.max(axis=1, keepdims=True)
    w = np.exp(q)
    ew = _categorical(w / w.sum(axis=1, keepdims=True), u[:, 4])
    eps = ndtri(u[:, 5:9])
    y = np.column_stack([
        1.0 + x_c + x_b + z_sub + lat + eps[:, 0],
        1.0 + x_c ** 2 + x_b + z_sub + lat + eps[:, 1],
        3.0 + x_c * x_b + z_sub + lat + eps[:, 2],
        2.0 + x_c * z_sub - x_b + 2.0 * lat + eps[:, 3],
    ])
    z_index = _z_lookup()[ew, z_sub.astype(np.intp)]
    return {"X_c": x_c, "X_b": x_b, "Z_sub": z_sub, "EW": ew + 1, "z_index": z_index,
            "Y": y, "u_assign": u[:, 9]}


def generate_trial(n: int, seed, run: int | None = None) -> Dataset:
    """One simulated trial of n participants bound to the simulation schedule.

    ``seed`` is an integer or a SeedSequence; ``run`` selects the substream
    (seed, run) used by the Monte Carlo driver.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _stream(seed, run)
    pop = draw_population(n, rng)
    sched = simulation_schedule()
    zi = pop["z_index"]
    sub = _categorical(sched.substudy_probs[zi], pop["u_assign"])
    cond = sched.joint[zi, :, sub] / sched.substudy_probs[zi, sub][:, None]
    arm = _categorical(cond, _uniform(rng, n))
    y = pop["Y"][np.arange(n), arm]
    return Dataset(
        schedule=sched,
        ids=np.arange(n),
        z_index=zi,
        arm=arm,
        outcome=y,
        numeric={k: pop[k] for k in SIM_COVARIATES},
        substudy=sub,
    )


def _ece_rows(j: str, k: str) -> np.ndarray:
    sched = simulation_schedule()
    ji, ki = sched.arm_index(j), sched.arm_index(k)
    return (sched.marginals[:, ji] > 0) & (sched.marginals[:, ki] > 0)


def _oracle_sums(j, k, M: int, seed, weighted: bool) -> tuple[float, float, float, float]:
    sched = simulation_schedule()
    ji, ki = sched.arm_index(j), sched.arm_index(k)
    ece = _ece_rows(j, k)
    rng = _stream(seed)
    sj, sk, wj, wk = [], [], [], []
    left = int(M)
    while left > 0:
        m = min(left, _CHUNK)
        left -= m
        pop = draw_population(m, rng)
        keep = ece[pop["z_index"]]
        y = pop["Y"][keep]
        if weighted:
            pj = sched.marginals[pop["z_index"][keep], ji]
            pk = sched.marginals[pop["z_index"][keep], ki]
        else:
            pj = pk = np.ones(int(keep.sum()))
        sj.append(math.fsum((pj * y[:, ji]).tolist()))
        sk.append(math.fsum((pk * y[:, ki]).tolist()))
        wj.append(math.fsum(pj.tolist()))
        wk.append(math.fsum(pk.tolist()))
    return math.fsum(sj), math.fsum(sk), math.fsum(wj), math.fsum(wk)


def true_contrast_oracle(j, k, M: int = 10_000_000, seed=0) -> float:
    """theta_jk - theta_kj: mean of Y(j) - Y(k) over eligible draws of a large population."""
    sj, sk, wj, wk = _oracle_sums(str(j), str(k), M, seed, weighted=False)
    return sj / wj - sk / wk


def naive_limit_oracle(j, k, M: int = 10_000_000, seed=0) -> float:
    """Probability limit of the naive contrast.

    Each naive arm mean converges to E{pi_j(Z) Y(j)} / E{pi_j(Z)} over the
    eligible population; both ratios are evaluated by brute force.
    """
    sj, sk, wj, wk = _oracle_sums(str(j), str(k), M, seed, weighted=True)
    return sj / wj - sk / wk


# ---------------------------------------------------------------------------
# configuration


_CONFIG_KEYS = {
    "runs", "n", "seed", "methods", "pairs", "model", "covariates", "center", "alpha",
    "oracle_m", "oracle_seed", "truths", "threads", "estimated_propensity",
}


@dataclass(frozen=True)
class SimulationConfig:
    runs: int = 1000
    n: int = 1000
    seed: int = 20240501
    methods: tuple[str, ...] = SIM_METHODS
    pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    model: str = "linear"
    covariates: tuple[str, ...] = SIM_COVARIATES
    center: bool = False
    alpha: float = 0.05
    oracle_m: int = 10_000_000
    oracle_seed: int = 7
    truths: dict | None = None
    threads: int = 1
    estimated_propensity: bool = False

    def __post_init__(self):
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ConfigError("runs must be an integer >= 1")
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("n must be an integer >= 1")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        unknown = [m for m in self.methods if m not in SIM_METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {list(SIM_METHODS)}")
        arms = simulation_schedule().arms
        for p in self.pairs:
            if len(p) != 2 or p[0] == p[1] or any(a not in arms for a in p):
                raise ConfigError(f"invalid arm pair {p!r}")
        if self.model not in ("linear", "anhecova"):
            raise ConfigError("model must be 'linear' or 'anhecova'")
        bad = [c for c in self.covariates if c not in SIM_COVARIATES]
        if bad:
            raise ConfigError(f"unknown covariate(s) {bad}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not isinstance(self.oracle_m, int) or self.oracle_m < 1:
            raise ConfigError("oracle_m must be an integer >= 1")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads must be an integer >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SimulationConfig":
        if not isinstance(doc, dict):
            raise ConfigError("simulation config must be a JSON object")
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        kw = dict(doc)
        try:
            if "methods" in kw:
                kw["methods"] = tuple(str(m) for m in kw["methods"])
            if "pairs" in kw:
                kw["pairs"] = tuple((str(a), str(b)) for a, b in kw["pairs"])
            if "covariates" in kw:
                kw["covariates"] = tuple(str(c) for c in kw["covariates"])
            if kw.get("truths") is not None:
                kw["truths"] = {str(key): float(v) for key, v in kw["truths"].items()}
            if "alpha" in kw:
                kw["alpha"] = float(kw["alpha"])
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from None
        return cls.from_dict(doc)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        d["pairs"] = [list(p) for p in self.pairs]
        d["covariates"] = list(self.covariates)
        return d


def bundled_config() -> SimulationConfig:
    """The bundled configuration: 1000 runs at n = 1000 over the three contrasts."""
    return SimulationConfig.from_json(_load_text("tableS5.json"))


def pair_label(pair) -> str:
    return f"{pair[0]},{pair[1]}"


# ---------------------------------------------------------------------------
# one run


def _fit(cfg: SimulationConfig, aset, arm, data, strata):
    spec = CovariateSpec(tuple(cfg.covariates), (), cfg.model == "anhecova")
    if cfg.model == "anhecova":
        model = fit_anhecova(aset, arm, spec, data, strata)
    else:
        model = fit_linear(aset, arm, spec, data)
    if cfg.center:
        model = center_model(model, aset, arm, data, strata)
    return model


def _pair_run(cfg: SimulationConfig, data: Dataset, pair) -> dict[str, tuple[float, float]]:
    """(contrast estimate, SE) per method; NaN marks a failed computation."""
    out = {}
    try:
        aset: AnalysisSet = build_ece(data, *pair)
    except EceTrialError:
        return {m: (math.nan, math.nan) for m in cfg.methods}
    strata = build_strata(aset, "pi")
    needs_z = {"ps_z", "aps_z"} & set(cfg.methods)
    strata_z = build_strata(aset, "z") if needs_z else None
    if cfg.estimated_propensity:
        aset = empirical_weights(aset, strata)

    cache = {}

    def models():
        if "models" not in cache:
            cache["models"] = (
                _fit(cfg, aset, aset.arm_j, data, strata),
                _fit(cfg, aset, aset.arm_k, data, strata),
            )
        return cache["models"]

    def run(method):
        if method == "naive":
            est = estimate_naive(aset, data)
            return est, cov_naive(aset, data, est)
        if method == "ipw":
            est = estimate_ipw(aset, data)
            return est, cov_ipw(aset, data, est)
        if method == "sipw":
            est = estimate_sipw(aset, data)
            return est, cov_sipw(aset, data, est)
        if method == "aipw":
            mj, mk = models()
            est = estimate_aipw(aset, data, mj, mk)
            return est, cov_aipw(aset, data, mj, mk, est)
        if method == "saipw":
            mj, mk = models()
            est = estimate_saipw(aset, data, mj, mk)
            return est, cov_saipw(aset, data, mj, mk, est)
        if method == "saipw_s":
            spec = CovariateSpec((), (), True)
            mj = fit_anhecova(aset, aset.arm_j, spec, data, strata)
            mk = fit_anhecova(aset, aset.arm_k, spec, data, strata)
            est = estimate_saipw(aset, data, mj, mk)
            return est, cov_saipw(aset, data, mj, mk, est)
        if method in ("ps", "ps_z"):
            s = strata if method == "ps" else strata_z
            est = estimate_ps(aset, data, s)
            return est, cov_ps(aset, data, s, est)
        if method in ("aps", "aps_z"):
            s = strata if method == "aps" else strata_z
            mj, mk = models()
            est = estimate_aps(aset, data, s, mj, mk)
            return est, cov_aps(aset, data, s, mj, mk, est)
        raise ConfigError(f"unknown method {method!r}")

    for method in cfg.methods:
        try:
            est, cov = run(method)
            inf = contrast_inference(est, cov, alpha=cfg.alpha)
            out[method] = (inf.estimate, inf.se)
        except EceTrialError:
            out[method] = (math.nan, math.nan)
    return out


def _run_block(cfg: SimulationConfig, runs: range) -> np.ndarray:
    """Array [run, pair, method, (estimate, se)] for a block of run indices."""
    res = np.full((len(runs), len(cfg.pairs), len(cfg.methods), 2), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, r in enumerate(runs):
            data = generate_trial(cfg.n, cfg.seed, run=r)
            for p, pair in enumerate(cfg.pairs):
                vals = _pair_run(cfg, data, pair)
                for m, method in enumerate(cfg.methods):
                    res[i, p, m] = vals[method]
    return res


def _run_block_args(args):
    return _run_block(*args)


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class MethodSummary:
    pair: tuple[str, str]
    method: str
    truth: float
    bias: float
    rel_bias_pct: float
    sd: float
    mean_se: float
    cp: float
    n_ok: int
    n_failed: int

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pair"] = list(self.pair)
        return d


@dataclass(frozen=True, eq=False)
class SimulationReport:
    config: SimulationConfig
    truths: dict
    summaries: tuple[MethodSummary, ...]
    estimates: np.ndarray = field(repr=False)
    ses: np.ndarray = field(repr=False)

    def get(self, pair, method) -> MethodSummary:
        pair = (str(pair[0]), str(pair[1]))
        for s in self.summaries:
            if s.pair == pair and s.method == method:
                return s
        raise KeyError((pair, method))

    def as_dict(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "truths": dict(self.truths),
            "results": [s.as_dict() for s in self.summaries],
        }

    def to_json(self) -> str:
        return dumps(self.as_dict())

    def to_table(self) -> str:
        """Plain-text table with the bias, relative bias, SD, SE and CP columns."""
        cfg = self.config
        lines = [f"runs={cfg.runs} n={cfg.n} seed={cfg.seed} model={cfg.model}"]
        head = (f"{'pair':<6}{'method':<9}{'truth':>9}{'bias':>9}{'rel%':>9}"
                f"{'SD':>8}{'SE':>8}{'CP':>7}{'failed':>8}")
        lines.append(head)
        lines.append("-" * len(head))
        for s in self.summaries:
            lines.append(
                f"{pair_label(s.pair):<6}{s.method:<9}{s.truth:>9.3f}{s.bias:>9.3f}"
                f"{s.rel_bias_pct:>9.3f}{s.sd:>8.3f}{s.mean_se:>8.3f}{s.cp:>7.3f}{s.n_failed:>8d}"
            )
        return "\n".join(lines) + "\n"



def _summarize(pair, method, truth, est, se, alpha) -> MethodSummary:
    ok = np.isfinite(est) & np.isfinite(se)
    n_ok = int(ok.sum())
    failed = int(est.size - n_ok)
    if n_ok == 0:
        nan = math.nan
        return MethodSummary(pair, method, truth, nan, nan, nan, nan, nan, 0, failed)
    e, s = est[ok], se[ok]
    bias = math.fsum(e.tolist()) / n_ok - truth
    sd = float(np.std(e, ddof=1)) if n_ok > 1 else math.nan
    q = float(ndtri(1.0 - alpha / 2.0))
    cover = np.abs(e - truth) <= q * s
    rel = 100.0 * bias / truth if truth != 0 else math.nan
    return MethodSummary(
        pair, method, truth, bias, rel, sd, math.fsum(s.tolist()) / n_ok,
        float(cover.mean()), n_ok, failed,
    )


def _truths(cfg: SimulationConfig) -> dict:
    out = {}
    given = cfg.truths or {}
    for pair in cfg.pairs:
        label = pair_label(pair)
        if label in given:
            out[label] = float(given[label])
        else:
            out[label] = true_contrast_oracle(*pair, M=cfg.oracle_m, seed=cfg.oracle_seed)
    return out


def run_monte_carlo(config: SimulationConfig) -> SimulationReport:
    """Repeat generate-fit-estimate ``config.runs`` times and summarise per (pair, method).

    Runs that fail for a method (empty stratum-arm cell, variance not
    computable) are excluded from that method's moments and counted.
    """
    cfg = config
    truths = _truths(cfg)
    if cfg.threads == 1 or cfg.runs == 1:
        res = _run_block(cfg, range(cfg.runs))
    else:
        bounds = np.linspace(0, cfg.runs, min(cfg.threads * 4, cfg.runs) + 1).astype(int)
        blocks = [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(_run_block_args, [(cfg, b) for b in blocks]))
        res = np.concatenate(parts, axis=0)
    summaries = []
    for p, pair in enumerate(cfg.pairs):
        for m, method in enumerate(cfg.methods):
            summaries.append(
                _summarize(pair, method, truths[pair_label(pair)],
                           res[:, p, m, 0], res[:, p, m, 1], cfg.alpha)
            )
    return SimulationReport(cfg, truths, tuple(summaries), res[..., 0], res[..., 1])
