"""Monte Carlo evaluation of the heterogeneity estimators and CI methods.

Data follow the three-level hierarchical model: study effects theta_i ~
N(mu, tau^2), within-study interaction effects delta_i ~ N(Delta,
sigma_Delta^2), subgroup means theta_{i,1} = theta_i - (1 - p) delta_i and
theta_{i,2} = theta_i + p delta_i (so the prevalence-weighted average is
theta_i exactly), and observations y_{i,j} ~ N(theta_{i,j}, s_{i,j}^2)
with s_{i,j} = sigma_u / sqrt(n_{i,j}).

All replicate-level computation is vectorized: the estimator and variance
cores accept a leading replicate axis, so one scenario is a handful of
array operations. Scenarios are embarrassingly parallel and each derives
its own RNG stream from a content hash, making results independent of the
execution schedule.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import ValidationError, MetaDataset, Study, StudyEstimate, SubgroupArm, SubgroupSplit
from .estimators import (
    DL,
    DLS,
    DLS_ADJ,
    MAX1,
    MAX2,
    TAU2_METHODS,
    dl_raw,
    dls_raw,
    expected_tau2_dls,
    mu_ce_subgroup,
    mu_re,
    shrinkage_coefficients,
)
from .intervals import (
    CI_METHODS,
    HCS_MAX1,
    HCS_MAX2,
    HKSJ,
    MKH,
    NORMAL,
    ZH,
    hksj_scale,
    normal_quantile,
    t_quantile,
    variance_hcs,
    zh_variance,
)

K_GRID = (2, 3, 5)
TAU_GRID = (0.0, 0.1, 0.2, 0.5, 1.0)
DELTA_GRID = (0.0, 0.1, 0.2, 0.5, 1.0)
SIGMA_DELTA_GRID = (0.0, 0.1, 0.2, 0.5, 1.0)
P_GRID = (1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0)

DEFAULT_SIGMA_U = 4.0
DEFAULT_SIZES_MEANLOG = 5.0
DEFAULT_SIZES_SDLOG = 1.0
DEFAULT_N_REPS = 1000


@dataclass(frozen=True)
class Scenario:
    """One point of the simulation design."""

    k: int
    tau: float
    delta: float
    sigma_delta: float
    p: float
    mu: float = 0.0
    sigma_u: float = DEFAULT_SIGMA_U
    n_reps: int = DEFAULT_N_REPS
    seed: int = 0
    sizes_meanlog: float = DEFAULT_SIZES_MEANLOG
    sizes_sdlog: float = DEFAULT_SIZES_SDLOG

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("scenario: k must be >= 2")
        if self.tau < 0 or self.sigma_delta < 0:
            raise ValidationError("scenario: tau and sigma_delta must be >= 0")
        if not (0.0 < self.p < 1.0):
            raise ValidationError("scenario: p must be in (0, 1)")
        if self.sigma_u <= 0:
            raise ValidationError("scenario: sigma_u must be > 0")
        if self.n_reps < 1:
            raise ValidationError("scenario: n_reps must be >= 1")
        if self.sizes_sdlog < 0:
            raise ValidationError("scenario: sizes_sdlog must be >= 0")

    def key(self) -> str:
        """Canonical content string; drives per-scenario RNG derivation."""
        return "|".join(
            repr(v)
            for v in (
                self.k,
                self.mu,
                self.tau,
                self.delta,
                self.sigma_delta,
                self.p,
                self.sigma_u,
                self.sizes_meanlog,
                self.sizes_sdlog,
            )
        )


@dataclass(frozen=True)
class ScenarioMetrics:
    """Aggregated Monte Carlo metrics of one scenario.

    tau_metrics maps each heterogeneity estimator to mean bias of tau-hat
    (on the standard deviation scale, against the true tau), its Monte
    Carlo SE, and the proportion/count of zero estimates. ci_metrics maps
    each interval method to empirical coverage of the true mean, its
    binomial SE, the median interval length, and the failure count.
    """

    scenario: Scenario
    n_reps: int
    tau_metrics: dict = field(default_factory=dict)
    ci_metrics: dict = field(default_factory=dict)


def scenario_rng(scenario: Scenario) -> np.random.Generator:
    """Independent, schedule-free RNG stream for one scenario.

    The stream depends only on the scenario content and seed, never on
    worker assignment or execution order.
    """
    digest = hashlib.sha256(scenario.key().encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence(entropy=[scenario.seed & (2 ** 64 - 1), *words])
    return np.random.default_rng(ss)


def draw_study_sizes(k, rng, meanlog=DEFAULT_SIZES_MEANLOG, sdlog=DEFAULT_SIZES_SDLOG, size=None):
    """Study sizes: lognormal draws rounded to the nearest multiple of 12,
    floored at 12 so that prevalences 1/2, 1/3 and 1/4 give integer arms.

    `size` may extend the shape with leading replicate axes; the last axis
    always has length k.
    """
    if k < 1:
        raise ValidationError("draw_study_sizes: k must be >= 1")
    shape = (k,) if size is None else tuple(size) + (k,)
    draws = rng.lognormal(mean=meanlog, sigma=sdlog, size=shape)
    n = 12 * np.round(draws / 12.0)
    return np.maximum(12, n).astype(int)


def _arm_sizes(n, p):
    """Split study sizes into two arm sizes, keeping both >= 1."""
    n = np.asarray(n)
    n1 = np.round(p * n).astype(int)
    n1 = np.clip(n1, 1, n - 1)
    return n1, n - n1


def _draw_replicates(scenario: Scenario, rng, n_reps: int, sizes=None):
    """Generate subgroup-level arrays for a batch of replicates.

    Returns (y_sub, se_sub, n_arm) with shapes (R, k, 2), (R, k, 2),
    (R, k, 2). When `sizes` is given it is held fixed across replicates
    (fixed-weights mode).
    """
    k = scenario.k
    if sizes is None:
        n = draw_study_sizes(
            k, rng, scenario.sizes_meanlog, scenario.sizes_sdlog, size=(n_reps,)
        )
    else:
        n = np.broadcast_to(np.asarray(sizes, dtype=int), (n_reps, k))
    n1, n2 = _arm_sizes(n, scenario.p)
    n_arm = np.stack([n1, n2], axis=-1)
    se = scenario.sigma_u / np.sqrt(n_arm)

    theta = scenario.mu + scenario.tau * rng.standard_normal((n_reps, k))
    delta_i = scenario.delta + scenario.sigma_delta * rng.standard_normal((n_reps, k))
    theta_sub = np.stack(
        [theta - (1.0 - scenario.p) * delta_i, theta + scenario.p * delta_i],
        axis=-1,
    )
    y_sub = theta_sub + se * rng.standard_normal((n_reps, k, 2))
    return y_sub, se, n_arm


def _study_rows(y_sub, se_sub):
    """Aggregate arm estimates into study-level rows (inverse-variance)."""
    w = se_sub ** -2.0
    sw = np.sum(w, axis=-1)
    y = np.sum(w * y_sub, axis=-1) / sw
    return y, sw ** -0.5


def generate_meta_analysis(scenario: Scenario, rng) -> MetaDataset:
    """One simulated dataset as a MetaDataset, with the single generated
    split per study pre-selected."""
    y_sub, se_sub, n_arm = _draw_replicates(scenario, rng, 1)
    y_stu, se_stu = _study_rows(y_sub, se_sub)
    studies = []
    for i in range(scenario.k):
        sid = f"study-{i + 1}"
        arms = tuple(
            SubgroupArm(
                j=j + 1,
                y=float(y_sub[0, i, j]),
                se=float(se_sub[0, i, j]),
                n=int(n_arm[0, i, j]),
            )
            for j in (0, 1)
        )
        split = SubgroupSplit("subgroup", arms)
        est = StudyEstimate(
            sid, float(y_stu[0, i]), float(se_stu[0, i]), n=int(n_arm[0, i].sum())
        )
        studies.append(Study(est, (split,), selected=0))
    return MetaDataset(tuple(studies))


def scenario_grid(
    k=None,
    tau=None,
    delta=None,
    sigma_delta=None,
    p=None,
    n_reps=DEFAULT_N_REPS,
    seed=0,
    sigma_u=DEFAULT_SIGMA_U,
    sizes_meanlog=DEFAULT_SIZES_MEANLOG,
    sizes_sdlog=DEFAULT_SIZES_SDLOG,
):
    """Cartesian grid of scenarios; each filter is None (full axis), a
    scalar, or a sequence of values. The full grid has 1125 points."""

    def axis(value, default):
        if value is None:
            return list(default)
        if np.isscalar(value):
            return [value]
        return list(value)

    scenarios = [
        Scenario(
            k=int(kv),
            tau=float(tv),
            delta=float(dv),
            sigma_delta=float(sv),
            p=float(pv),
            sigma_u=sigma_u,
            n_reps=n_reps,
            seed=seed,
            sizes_meanlog=sizes_meanlog,
            sizes_sdlog=sizes_sdlog,
        )
        for kv in axis(k, K_GRID)
        for tv in axis(tau, TAU_GRID)
        for dv in axis(delta, DELTA_GRID)
        for sv in axis(sigma_delta, SIGMA_DELTA_GRID)
        for pv in axis(p, P_GRID)
    ]
    if not scenarios:
        raise ValidationError("scenario_grid: empty grid")
    return scenarios


def _tau2_batch(y_stu, se_stu, y_sub, se_sub, p_arr):
    """All five tau^2 estimates over a replicate batch.

    Returns (tau2 dict of (R,) arrays, subgroup-winner mask per hybrid)."""
    dl_t = np.maximum(0.0, dl_raw(y_stu, se_stu))
    dls_t = np.maximum(0.0, dls_raw(y_sub, se_sub))
    a, _ = shrinkage_coefficients(se_sub, p_arr)
    adj_t = dls_t / a
    tau2 = {
        DL: dl_t,
        DLS: dls_t,
        DLS_ADJ: adj_t,
        MAX1: np.maximum(dl_t, dls_t),
        MAX2: np.maximum(dl_t, adj_t),
    }
    winners = {MAX1: dls_t > dl_t, MAX2: adj_t > dl_t}
    return tau2, winners


def _ci_batch(scenario, y_stu, se_stu, y_sub, se_sub, tau2, winners, level=0.95):
    """Lower/upper limits of every CI method over a replicate batch."""
    k = scenario.k
    z = normal_quantile(0.5 + level / 2.0)
    t_lo = t_quantile(k - 1, 0.5 + level / 2.0)
    t_hi = t_quantile(2 * k - 1, 0.5 + level / 2.0)

    out = {}
    dl_t = tau2[DL]

    mu, var = mu_re(y_stu, se_stu, dl_t)
    out[NORMAL] = (mu - z * np.sqrt(var), mu + z * np.sqrt(var))

    mu, var, q = hksj_scale(y_stu, se_stu, dl_t)
    half = t_lo * np.sqrt(q * var)
    out[HKSJ] = (mu - half, mu + half)
    half = t_lo * np.sqrt(np.maximum(1.0, q) * var)
    out[MKH] = (mu - half, mu + half)

    mu, var = zh_variance(y_stu, se_stu, dl_t)
    half = t_lo * np.sqrt(var)
    out[ZH] = (mu - half, mu + half)

    w_arm = se_sub ** -2.0
    w_stu = np.sum(w_arm, axis=-1)
    mu = mu_ce_subgroup(y_sub, se_sub)
    for method, variant in ((HCS_MAX1, MAX1), (HCS_MAX2, MAX2)):
        var = variance_hcs(tau2[variant], w_stu)
        t = np.where(winners[variant], t_hi, t_lo)
        half = t * np.sqrt(var)
        out[method] = (mu - half, mu + half)
    return out


def run_scenario(scenario: Scenario, level=0.95) -> ScenarioMetrics:
    """Simulate n_reps meta-analyses and aggregate estimator and interval
    metrics. Deterministic given the scenario (including its seed)."""
    rng = scenario_rng(scenario)
    n_reps = scenario.n_reps
    y_sub, se_sub, n_arm = _draw_replicates(scenario, rng, n_reps)
    y_stu, se_stu = _study_rows(y_sub, se_sub)
    p_arr = n_arm[..., 0] / np.sum(n_arm, axis=-1)

    tau2, winners = _tau2_batch(y_stu, se_stu, y_sub, se_sub, p_arr)

    tau_metrics = {}
    for method in TAU2_METHODS:
        t2 = tau2[method]
        bias = np.sqrt(t2) - scenario.tau
        zero_count = int(np.count_nonzero(t2 == 0.0))
        tau_metrics[method] = {
            "bias": float(np.mean(bias)),
            "bias_mc_se": float(np.std(bias, ddof=1) / np.sqrt(n_reps))
            if n_reps > 1
            else 0.0,
            "zero_proportion": zero_count / n_reps,
            "zero_count": zero_count,
        }

    limits = _ci_batch(scenario, y_stu, se_stu, y_sub, se_sub, tau2, winners, level)
    ci_metrics = {}
    for method in CI_METHODS:
        lower, upper = limits[method]
        ok = np.isfinite(lower) & np.isfinite(upper)
        failures = int(n_reps - np.count_nonzero(ok))
        covered = ok & (lower <= scenario.mu) & (scenario.mu <= upper)
        coverage = float(np.count_nonzero(covered)) / n_reps
        lengths = np.sort((upper - lower)[ok])
        ci_metrics[method] = {
            "coverage": coverage,
            "coverage_mc_se": float(np.sqrt(coverage * (1.0 - coverage) / n_reps)),
            "median_length": float(np.median(lengths)) if lengths.size else float("nan"),
            "failures": failures,
        }

    return ScenarioMetrics(
        scenario=scenario, n_reps=n_reps, tau_metrics=tau_metrics, ci_metrics=ci_metrics
    )


def run_scenarios(scenarios: Sequence[Scenario], jobs: int = 1, level=0.95):
    """Run many scenarios, optionally across processes. Output order and
    values are independent of the worker count."""
    if jobs <= 1 or len(scenarios) <= 1:
        return [run_scenario(s, level) for s in scenarios]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_scenario, scenarios, [level] * len(scenarios)))


def validate_expectation(scenario: Scenario, n_reps: Optional[int] = None, sizes=None):
    """Check the raw subgroup-level tau^2 estimator against its analytic
    mean at fixed weights.

    Study sizes are drawn once (or supplied) and held fixed; only the
    effects are resampled. Passes iff the Monte Carlo mean of the raw
    estimator is within 3 Monte Carlo SEs of
    A * tau^2 + (Delta^2 + sigma_Delta^2) * B_coefficient.
    """
    if n_reps is not None:
        scenario = replace(scenario, n_reps=int(n_reps))
    rng = scenario_rng(scenario)
    if sizes is None:
        sizes = draw_study_sizes(
            scenario.k, rng, scenario.sizes_meanlog, scenario.sizes_sdlog
        )
    y_sub, se_sub, n_arm = _draw_replicates(scenario, rng, scenario.n_reps, sizes=sizes)
    raw = dls_raw(y_sub, se_sub)
    p_arr = n_arm[0, :, 0] / np.sum(n_arm[0], axis=-1)
    expected = float(
        expected_tau2_dls(
            se_sub[0], p_arr, scenario.tau, scenario.delta, scenario.sigma_delta
        )
    )
    mean_raw = float(np.mean(raw))
    mc_se = float(np.std(raw, ddof=1) / np.sqrt(scenario.n_reps))
    diff = abs(mean_raw - expected)
    return {
        "n_reps": scenario.n_reps,
        "sizes": [int(v) for v in np.asarray(sizes).ravel()],
        "mean_raw": mean_raw,
        "expected": expected,
        "mc_se": mc_se,
        "abs_diff": diff,
        "passed": bool(diff <= 3.0 * mc_se),
    }


# ---------------------------------------------------------------------------
# output formats
# ---------------------------------------------------------------------------

_CSV_HEADER = [
    "k",
    "tau",
    "delta",
    "sigma_delta",
    "p",
    "n_reps",
    "seed",
    "kind",
    "method",
    "metric",
    "value",
]


def metrics_rows(results: Sequence[ScenarioMetrics]):
    """Tidy rows: one per scenario x method x metric."""
    rows = []
    for res in results:
        s = res.scenario
        base = [s.k, repr(s.tau), repr(s.delta), repr(s.sigma_delta), repr(s.p), s.n_reps, s.seed]
        for method in TAU2_METHODS:
            for metric, value in sorted(res.tau_metrics[method].items()):
                rows.append(base + ["tau2", method, metric, repr(value)])
        for method in CI_METHODS:
            for metric, value in sorted(res.ci_metrics[method].items()):
                rows.append(base + ["ci", method, metric, repr(value)])
    return rows


def write_metrics_csv(results: Sequence[ScenarioMetrics], path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        writer.writerows(metrics_rows(results))


def metrics_to_json(results: Sequence[ScenarioMetrics]) -> str:
    payload = [
        {
            "scenario": {
                "k": r.scenario.k,
                "mu": r.scenario.mu,
                "tau": r.scenario.tau,
                "delta": r.scenario.delta,
                "sigma_delta": r.scenario.sigma_delta,
                "p": r.scenario.p,
                "sigma_u": r.scenario.sigma_u,
                "n_reps": r.scenario.n_reps,
                "seed": r.scenario.seed,
                "sizes_meanlog": r.scenario.sizes_meanlog,
                "sizes_sdlog": r.scenario.sizes_sdlog,
            },
            "tau_metrics": r.tau_metrics,
            "ci_metrics": r.ci_metrics,
        }
        for r in results
    ]
    return json.dumps(payload, sort_keys=True, indent=2)
