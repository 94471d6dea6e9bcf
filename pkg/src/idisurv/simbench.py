"""Synthetic externally controlled trials and the Monte Carlo study engine.

Population model
----------------
``X1 ~ Bernoulli(0.5)``, ``X2 ~ N(0, 0.3^2)`` and, for sensitivity runs, a
latent ``omega ~ N(0, sigma^2)`` left out of every adjustment model. Group
membership follows a logistic model. Single-arm subjects get an index time
``R`` and a survival time with hazard ``lambda0 * exp(gamma'X + c_t*omega +
alpha * 1{t >= R})``; they are kept only if ``T > R`` and censored at
``R + W``. External controls have no index time, hazard ``lambda0 *
exp(gamma'X + c_t*omega)`` and censoring ``C ~ Exp(rate)``.
"""

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .data import Cohort
from .errors import ConfigError, IdiError, StudyFailure
from .idi import IdiConfig, bootstrap_idi, naive_analysis
from .survival import fit_cox

R_CASES = ("uniform", "exponential", "zero")
METHODS = ("naive", "matching", "weighting")
METHOD_LABELS = {"naive": "Naive", "matching": "PS Matching + IDI",
                 "weighting": "PS Weighting + IDI"}
X1_PROB = 0.5
X2_SD = 0.3


@dataclass(frozen=True)
class ScenarioParams:
    """Data-generating parameters.

    ``lambda0`` and ``gamma`` default to 0.3 and (0.5, 0.5).
    ``r_case`` selects ``R ~ U[0, r_upper]`` ('uniform'), an exponential with
    hazard ``r_rate * exp(r_coef'X)`` ('exponential') or ``R = 0`` ('zero').
    """

    n1: int = 200
    n0: int = 800
    beta: tuple = (-0.5, 0.3, -0.2)
    r_case: str = "uniform"
    r_upper: float = 2.0
    r_rate: float = 0.5
    r_coef: tuple = (-2.0, -2.0)
    lambda0: float = 0.3
    gamma: tuple = (0.5, 0.5)
    alpha: float = 0.0
    censor_rate: float = 0.3
    sigma_omega: float = 0.0
    omega_coef_g: float = 1.0
    omega_coef_t: float = 1.0

    def __post_init__(self):
        for name in ("beta", "r_coef", "gamma"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("n1", "n0"):
            v = getattr(self, name)
            if isinstance(v, bool) or not float(v).is_integer() or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.r_case not in R_CASES:
            raise ConfigError(f"r_case must be one of {R_CASES}, got {self.r_case!r}")
        if len(self.beta) != 3 or len(self.gamma) != 2 or len(self.r_coef) != 2:
            raise ConfigError("beta needs 3 entries; gamma and r_coef need 2")
        for name in ("lambda0", "censor_rate", "r_rate", "r_upper"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.sigma_omega >= 0:
            raise ConfigError("sigma_omega must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        for k in ("beta", "r_coef", "gamma"):
            out[k] = list(out[k])
        return out


# ----------------------------------------------------------------------
# generators
# ----------------------------------------------------------------------
def piecewise_exponential_time(e, rate, change, log_effect):
    """Invert the cumulative hazard ``rate*t`` before ``change`` and
    ``rate*change + rate*exp(log_effect)*(t - change)`` after it.

    ``e`` are unit-exponential draws.
    """
    before = rate * change
    return np.where(e < before, e / rate,
                    change + (e - before) / (rate * math.exp(log_effect)))


def draw_superpopulation(params, rng, size):
    """Draw ``size`` subjects before group-specific truncation.

    The random stream is consumed identically whatever ``sigma_omega`` is, so
    ``sigma_omega = 0`` reproduces the confounder-free draws bit for bit.
    """
    x1 = (rng.random(size) < X1_PROB).astype(float)
    x2 = rng.normal(0.0, X2_SD, size)
    z_omega = rng.standard_normal(size)
    u_group = rng.random(size)
    u_r = rng.random(size)
    e = rng.standard_exponential(size)
    w = rng.exponential(1.0 / params.censor_rate, size)

    x = np.column_stack((x1, x2))
    omega = params.sigma_omega * z_omega
    b0, b1, b2 = params.beta
    logit = b0 + b1 * x1 + b2 * x2 + params.omega_coef_g * omega
    g = (u_group < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)
    if params.r_case == "uniform":
        r = params.r_upper * u_r
    elif params.r_case == "exponential":
        rate_r = params.r_rate * np.exp(params.r_coef[0] * x1 + params.r_coef[1] * x2)
        r = -np.log1p(-u_r) / rate_r
    else:
        r = np.zeros(size)
    rate = params.lambda0 * np.exp(x @ np.asarray(params.gamma) + params.omega_coef_t * omega)
    t_control = e / rate
    t_treated = piecewise_exponential_time(e, rate, r, params.alpha)
    t = np.where(g == 1, t_treated, t_control)
    c = np.where(g == 1, r + w, w)
    return {"x": x, "omega": omega, "group": g, "r": r, "t": t, "t_control": t_control,
            "t_treated": t_treated, "c": c, "rate": rate}


def _batch_size(params):
    return max(512, 4 * (params.n1 + params.n0))


def gen_population(params, rng, max_batches=1000):
    """Generate one trial: ``n1`` retained single-arm subjects and ``n0`` controls.

    Subjects are drawn in fixed-size batches until both quotas are filled;
    single-arm draws with ``T <= R`` are discarded.
    """
    want = {1: params.n1, 0: params.n0}
    got = {1: [], 0: []}
    have = {1: 0, 0: 0}
    for _ in range(max_batches):
        pop = draw_superpopulation(params, rng, _batch_size(params))
        g = pop["group"]
        accept = {1: np.flatnonzero((g == 1) & (pop["t"] > pop["r"])),
                  0: np.flatnonzero(g == 0)}
        for grp in (1, 0):
            take = accept[grp][: want[grp] - have[grp]]
            if take.size:
                got[grp].append({k: v[take] for k, v in pop.items()})
                have[grp] += take.size
        if have[1] == want[1] and have[0] == want[0]:
            break
    else:
        raise IdiError(f"could not fill group quotas after {max_batches} batches "
                       f"(got n1={have[1]}, n0={have[0]})")
    parts = [{k: np.concatenate([b[k] for b in got[grp]]) for k in got[grp][0]}
             for grp in (1, 0)]
    sa, ct = parts
    t = np.concatenate((sa["t"], ct["t"]))
    c = np.concatenate((sa["c"], ct["c"]))
    n = params.n1 + params.n0
    return Cohort(
        ids=np.arange(n),
        group=np.concatenate((np.ones(params.n1), np.zeros(params.n0))),
        time=np.minimum(t, c),
        event=(t <= c).astype(np.int8),
        index_time=np.concatenate((sa["r"], np.full(params.n0, np.nan))),
        covariates=np.vstack((sa["x"], ct["x"])),
        covariate_names=("x1", "x2"),
    )


def true_marginal_effect(params, oracle_n=10**6, seed=0, batch=500_000):
    """Marginal log hazard ratio in the target population.

    Simulates single-arm-population subjects without censoring, keeps those
    with ``T > R`` and compares time since ``R`` under treatment with the
    same subjects' untreated counterfactual (the two laws coincide before
    ``R``, so both arms condition on the same event). Returns the Cox
    coefficient of the arm indicator on the pooled counterfactual samples.
    """
    if params.alpha == 0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    treated, control = [], []
    have = 0
    while have < oracle_n:
        pop = draw_superpopulation(params, rng, batch)
        keep = np.flatnonzero((pop["group"] == 1) & (pop["t_control"] > pop["r"]))
        keep = keep[: oracle_n - have]
        treated.append(pop["t_treated"][keep] - pop["r"][keep])
        control.append(pop["t_control"][keep] - pop["r"][keep])
        have += keep.size
    t1 = np.concatenate(treated)
    t0 = np.concatenate(control)
    times = np.concatenate((t1, t0))
    z = np.concatenate((np.ones(t1.size), np.zeros(t0.size)))
    fit = fit_cox(times, np.ones(times.size), z[:, None])
    return float(fit.theta[0])


# ----------------------------------------------------------------------
# Monte Carlo engine
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class McMetrics:
    method: str
    true_effect: float
    mean: float
    abs_bias: float
    sd: float
    mean_se: float
    coverage: float
    power: float
    n_reps: int
    n_failed: int

    @property
    def label(self):
        return METHOD_LABELS.get(self.method, self.method)


@dataclass(frozen=True, eq=False)
class McStudy:
    """Per-replicate results of one scenario.

    ``results[method]`` is an ``(n_reps, 4)`` array of (estimate, se,
    ci_lower, ci_upper) with ``nan`` rows for failed replicates.
    """

    params: ScenarioParams
    true_effect: float
    results: dict
    failures: dict

    def metrics(self, method):
        res = self.results[method]
        ok = np.all(np.isfinite(res), axis=1)
        est, se, lo, hi = res[ok].T
        mean = float(est.mean())
        return McMetrics(
            method=method, true_effect=self.true_effect, mean=mean,
            abs_bias=abs(mean - self.true_effect),
            sd=float(est.std(ddof=1)) if est.size > 1 else 0.0,
            mean_se=float(se.mean()),
            coverage=float(np.mean((lo <= self.true_effect) & (self.true_effect <= hi))),
            power=float(np.mean((lo > 0) | (hi < 0))),
            n_reps=int(ok.sum()), n_failed=int((~ok).sum()))

    def all_metrics(self):
        return [self.metrics(m) for m in self.results]


def _replicate_seeds(seed, r):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(r),))
    gen_ss, boot_ss = ss.spawn(2)
    return gen_ss, int(boot_ss.generate_state(1, np.uint64)[0])


def _mc_replicate(params, methods, B, seed, r, caliper):
    gen_ss, boot_seed = _replicate_seeds(seed, r)
    cohort = gen_population(params, np.random.default_rng(gen_ss))
    out = {}
    for m in methods:
        try:
            if m == "naive":
                res = naive_analysis(cohort)
                out[m] = ((res.gamma, res.se, res.ci_lower, res.ci_upper), None)
            else:
                cfg = IdiConfig(adjustment=m, bootstrap_B=B, seed=boot_seed, caliper=caliper)
                res = bootstrap_idi(cohort, cfg, diagnostics=False)
                out[m] = ((res.gamma_hat, res.se, res.ci_lower, res.ci_upper), None)
        except IdiError as exc:
            out[m] = ((math.nan,) * 4, f"replicate {r}: {exc}")
    return out


def _mc_block(args):
    params, methods, B, seed, reps, caliper = args
    return [_mc_replicate(params, methods, B, seed, r, caliper) for r in reps]


def run_mc_study(scenario, methods=METHODS, n_reps=1000, seed=0, bootstrap_B=100,
                 n_jobs=1, true_effect=None, oracle_n=10**6, caliper=None,
                 max_failure_rate=0.05):
    """Repeat data generation and analysis ``n_reps`` times.

    Replicate ``r`` draws its data and bootstrap streams from
    ``SeedSequence(seed, spawn_key=(r,))``; results are collected in
    replicate order, so the study is reproducible for any ``n_jobs``.

    Parameters
    ----------
    scenario : ScenarioParams
    methods : iterable of {'naive', 'matching', 'weighting'}
    true_effect : float, optional
        Skip the oracle and use this value as the truth.

    Raises
    ------
    StudyFailure
        If more than ``max_failure_rate`` of the replicates fail for a method.
    """
    methods = tuple(m for m in METHODS if m in set(methods))
    if not methods:
        raise ValueError(f"methods must be a nonempty subset of {METHODS}")
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    if true_effect is None:
        true_effect = true_marginal_effect(scenario, oracle_n=oracle_n)
    reps = list(range(n_reps))
    if n_jobs and n_jobs > 1:
        size = max(1, math.ceil(n_reps / (4 * n_jobs)))
        chunks = [reps[i:i + size] for i in range(0, n_reps, size)]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            blocks = pool.map(_mc_block, [(scenario, methods, bootstrap_B, seed, c, caliper)
                                          for c in chunks])
            rows = [row for block in blocks for row in block]
    else:
        rows = _mc_block((scenario, methods, bootstrap_B, seed, reps, caliper))
    results, failures = {}, {}
    for m in methods:
        results[m] = np.array([row[m][0] for row in rows], dtype=float)
        failures[m] = [row[m][1] for row in rows if row[m][1] is not None]
        if len(failures[m]) > max_failure_rate * n_reps:
            raise StudyFailure(f"{len(failures[m])} of {n_reps} replicates failed for "
                               f"{m}; first: {failures[m][0]}")
    return McStudy(params=scenario, true_effect=float(true_effect), results=results,
                   failures=failures)


@dataclass(frozen=True, eq=False)
class PowerCurve:
    alphas: tuple
    studies: dict

    def rows(self):
        out = []
        for a in self.alphas:
            for m in self.studies[a].results:
                met = self.studies[a].metrics(m)
                p = met.power
                out.append((a, m, p, math.sqrt(p * (1 - p) / max(met.n_reps, 1))))
        return out

    def power(self, method):
        return np.array([self.studies[a].metrics(method).power for a in self.alphas])


def power_curve(scenario_base, alpha_grid, n_reps, seed=0, methods=METHODS, **kwargs):
    """Rejection rate of ``H0: gamma = 0`` along a grid of treatment effects.

    A replicate rejects when its 95% interval (percentile for IDI, Wald for
    the naive model) excludes 0. Every grid point reuses the same seed.
    """
    alpha_grid = tuple(float(a) for a in alpha_grid)
    if not alpha_grid:
        raise ValueError("alpha_grid must be nonempty")
    studies = {a: run_mc_study(replace(scenario_base, alpha=a), methods=methods,
                               n_reps=n_reps, seed=seed, **kwargs) for a in alpha_grid}
    return PowerCurve(alphas=alpha_grid, studies=studies)


# ----------------------------------------------------------------------
# tabular output
# ----------------------------------------------------------------------
TABLE_COLUMNS = ("Effect", "Method", "True", "Mean", "Abs.Bias", "SD", "SE", "Cov.")


def _fmt(v):
    return f"{v:.6f}"


def table_csv(studies):
    """Results table, one row per alpha and method; ``studies`` maps alpha -> McStudy."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for alpha, study in studies.items():
        for met in study.all_metrics():
            writer.writerow([_fmt(alpha), met.label, _fmt(met.true_effect), _fmt(met.mean),
                             _fmt(met.abs_bias), _fmt(met.sd), _fmt(met.mean_se),
                             _fmt(met.coverage)])
    return buf.getvalue()


def power_csv(curve):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("alpha", "method", "power", "mc_se"))
    for a, m, p, se in curve.rows():
        writer.writerow([_fmt(a), m, _fmt(p), _fmt(se)])
    return buf.getvalue()
