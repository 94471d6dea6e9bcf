"""Untruncated index-time distribution, truncation probabilities and weights.

The index time ``R`` (diagnosis to treatment initiation) is only observed for
single-arm subjects that survived past it, so its observed distribution is
left-truncated. The estimator here reweights each observed ``r_i`` by the
inverse of the left-truncated Kaplan-Meier survival just before ``r_i``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightError
from .stepfn import StepFunction
from .survival import fit_km, predict_survival


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite distribution on the time axis.

    Parameters
    ----------
    locations : array_like
        Strictly increasing atom locations.
    masses : array_like
        Positive masses summing to one (within 1e-12).
    """

    locations: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).reshape(-1)
        mass = np.asarray(self.masses, dtype=float).reshape(-1)
        if loc.size == 0 or loc.shape != mass.shape:
            raise ValueError("need one mass per location and at least one atom")
        if np.any(np.diff(loc) <= 0):
            raise ValueError("locations must be strictly increasing")
        if np.any(~(mass > 0)):
            raise ValueError("masses must be positive")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise ValueError(f"masses sum to {mass.sum()!r}, not 1")
        cum = np.cumsum(mass)
        cum[-1] = 1.0
        for arr in (loc, mass, cum):
            arr.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "masses", mass)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_weighted_points(cls, points, weights):
        """Merge duplicate points by adding their (unnormalised) weights."""
        points = np.asarray(points, dtype=float).reshape(-1)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        keep = weights > 0
        loc, inv = np.unique(points[keep], return_inverse=True)
        mass = np.bincount(inv, weights=weights[keep], minlength=loc.size)
        return cls(loc, mass / mass.sum())

    @classmethod
    def point_mass(cls, location):
        return cls([location], [1.0])

    def cdf(self):
        return StepFunction(self.locations, self._cum, 0.0)

    def quantile(self, q):
        """Generalised inverse ``inf{r : F(r) >= q}``."""
        q = np.asarray(q, dtype=float)
        idx = np.minimum(np.searchsorted(self._cum, q, side="left"), self.locations.size - 1)
        out = self.locations[idx]
        return out if out.ndim else float(out)

    def sample(self, rng, size=None):
        """Inverse-CDF sampling from independent uniforms."""
        return self.quantile(rng.random(size))

    def expect(self, func):
        """Stieltjes sum ``sum_k mass_k * func(location_k)``."""
        return np.asarray(func(self.locations)) @ self.masses

    def __len__(self):
        return self.locations.size


@dataclass(frozen=True, eq=False)
class TruncationWeights:
    """Per-subject inverse truncation probabilities."""

    ids: np.ndarray
    zeta: np.ndarray
    probability: np.ndarray


def estimate_fr(index_time, time, event, return_km=False, exhausted="zero"):
    """Estimate the untruncated distribution of the index time.

    Atoms sit at the distinct observed index times; each observation
    contributes mass proportional to ``1 / S_T(r_i-)``, where ``S_T`` is the
    Kaplan-Meier estimate of survival from diagnosis fitted with entry
    ``r_i``, exit ``y_i`` and event ``delta_i``.

    Parameters
    ----------
    index_time, time, event : array_like
        Single-arm ``r_i``, ``y_i`` and ``delta_i``.
    return_km : bool
        Also return the fitted left-truncated survival curve.
    exhausted : {'zero', 'skip'}
        Passed to :func:`fit_km`. With 'skip' the curve stays positive, so the
        weights are always defined; on data where 'zero' succeeds both give
        the same distribution.

    Raises
    ------
    DegenerateWeightError
        If ``S_T(r_i-) == 0`` for some subject.
    """
    r = np.asarray(index_time, dtype=float).reshape(-1)
    if r.size == 0:
        raise ValueError("estimate_fr needs at least one single-arm record")
    if np.any(np.isnan(r)):
        raise ValueError("all single-arm records need an index_time")
    y = np.asarray(time, dtype=float).reshape(-1)
    d = np.asarray(event).reshape(-1)
    # a record with y == r is never at risk under the entry-exclusive convention
    live = y > r
    if not live.any():
        raise DegenerateWeightError("no single-arm record has follow-up beyond its index time")
    s_t = fit_km(y[live], d[live], entry=r[live], exhausted=exhausted)
    surv = np.asarray(s_t.left_limit(r))
    if np.any(surv <= 0):
        bad = float(r[np.flatnonzero(surv <= 0)[0]])
        raise DegenerateWeightError(
            f"left-truncated survival reaches 0 before index time r={bad!r}; "
            "inverse-survival weight undefined")
    fr = DiscreteDistribution.from_weighted_points(r, 1.0 / surv)
    return (fr, s_t) if return_km else fr


def _lumped_atoms(fr, cumhaz):
    """Group atoms sharing one cumulative-hazard value (a step function is
    constant between its knots), returning distinct values and masses."""
    h = np.asarray(cumhaz(fr.locations), dtype=float)
    vals, inv = np.unique(h, return_inverse=True)
    return vals, np.bincount(inv, weights=fr.masses, minlength=vals.size)


def truncation_probability(x, fr, fit, cumhaz):
    """``P(T > R | X = x) = sum_k m_k * exp(-Lambda0(r_k) exp(theta' x))``.

    ``x`` may be a single vector or a matrix of rows.
    """
    x = np.asarray(x, dtype=float)
    vals, mass = _lumped_atoms(fr, cumhaz)
    risk = np.exp(x @ np.asarray(fit.theta, dtype=float))
    prob = np.exp(-np.multiply.outer(risk, vals)) @ mass
    if np.any(prob <= 0):
        raise DegenerateWeightError("estimated truncation probability is 0")
    return prob if np.ndim(prob) else float(prob)


def truncation_probability_reference(x, fr, fit, cumhaz):
    """Atom-by-atom evaluation of the same Stieltjes sum (slow reference path)."""
    total = 0.0
    for loc, mass in zip(fr.locations, fr.masses):
        total += mass * predict_survival(fit, cumhaz, x, loc)
    return total


def zeta_weights(x, fr, fit, cumhaz, ids=None, cap=None, warn_above=100.0):
    """Inverse truncation probabilities ``1 / P(T > R | X_i)``.

    Parameters
    ----------
    x : array_like, shape (n, p)
        Single-arm covariates.
    cap : float, optional
        Upper bound applied to the weights. None leaves them uncapped.
    warn_above : float
        Emit a warning when an uncapped weight exceeds this value.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    prob = np.atleast_1d(truncation_probability(x, fr, fit, cumhaz))
    zeta = 1.0 / prob
    if cap is not None:
        zeta = np.minimum(zeta, cap)
    elif warn_above is not None and np.any(zeta > warn_above):
        warnings.warn(f"{int(np.sum(zeta > warn_above))} truncation weights exceed "
                      f"{warn_above:g} (max {zeta.max():.3g})", stacklevel=2)
    ids = np.arange(x.shape[0]) if ids is None else np.asarray(ids)
    return TruncationWeights(ids=ids, zeta=zeta, probability=prob)


def truncated_fr(fr, s_t, terminal="residual"):
    """CDF of the index time conditional on surviving past it.

    ``F(r | T > R) = P(R <= r, R < T) / P(R < T)`` where
    ``P(R < T) = sum_k m_k S_T(r_k)`` and the numerator integrates
    ``F_R(min(r, t-))`` against the drops of ``S_T``.

    Parameters
    ----------
    fr : DiscreteDistribution
    s_t : StepFunction
        Survival from diagnosis.
    terminal : {'residual', 'renormalize'}
        If ``S_T`` plateaus above zero, 'residual' places the remaining mass
        beyond every observed time; 'renormalize' drops it and rescales the
        numerator to a proper CDF.
    """
    if terminal not in ("residual", "renormalize"):
        raise ValueError("terminal must be 'residual' or 'renormalize'")
    loc = fr.locations
    cdf = fr.cdf()
    t = s_t.knots
    drops = -s_t.jumps
    keep = drops > 0
    t, drops = t[keep], drops[keep]
    residual = s_t.final_value if terminal == "residual" else 0.0

    # drops strictly after r_k use F(r_k); drops at or before r_k use F(t_j-)
    f_left = np.asarray(cdf.left_limit(t)) if t.size else np.zeros(0)
    cum_early = np.concatenate(([0.0], np.cumsum(drops * f_left)))
    n_early = np.searchsorted(t, loc, side="right")
    late = drops.sum() - np.concatenate(([0.0], np.cumsum(drops)))[n_early] + residual
    numer = cum_early[n_early] + fr._cum * late
    if terminal == "residual":
        denom = float(np.asarray(s_t(loc)) @ fr.masses)
    else:
        denom = float(numer[-1])
    if denom <= 0:
        raise DegenerateWeightError("estimated P(R < T) is 0")
    values = np.minimum(numer / denom, 1.0)
    values[-1] = 1.0 if abs(values[-1] - 1.0) < 1e-9 else values[-1]
    return StepFunction(loc, np.maximum.accumulate(values), 0.0)


def qq_points(truncated, observed_r):
    """Quantile pairs on the grid ``q_k = (k - 0.5) / n``.

    Returns an ``(n, 3)`` array of ``(q, model_quantile, empirical_quantile)``;
    the model quantile is the generalised inverse of ``truncated``.
    """
    obs = np.sort(np.asarray(observed_r, dtype=float).reshape(-1), kind="stable")
    n = obs.size
    if n == 0:
        raise ValueError("observed_r must be nonempty")
    q = (np.arange(1, n + 1) - 0.5) / n
    vals = truncated.values
    idx = np.searchsorted(vals, q - 1e-12, side="left")
    idx = np.minimum(idx, vals.size - 1)
    model = truncated.knots[idx]
    return np.column_stack((q, model, obs))
