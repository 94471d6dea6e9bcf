"""Weighted, left-truncated Kaplan-Meier and Cox estimators.

Risk-set convention, used uniformly below: a record with entry time ``a``
and exit time ``y`` is at risk at ``t`` iff ``a < t <= y``. Records with
weight zero are kept but contribute nothing, and events carrying weight zero
do not create event times.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (ConvergenceWarning, EmptyRiskSetError, NonIdentifiableError,
                     SeparationError)
from .stepfn import StepFunction

MAX_ABS_COEF = 20.0


def _as_inputs(exit, event, entry, weight):
    exit = np.asarray(exit, dtype=float).reshape(-1)
    n = exit.shape[0]
    if n == 0:
        raise ValueError("at least one record is required")
    event = np.asarray(event).reshape(-1).astype(bool)
    entry = np.zeros(n) if entry is None else np.asarray(entry, dtype=float).reshape(-1)
    weight = np.ones(n) if weight is None else np.asarray(weight, dtype=float).reshape(-1)
    if not (event.shape[0] == entry.shape[0] == weight.shape[0] == n):
        raise ValueError("exit, event, entry and weight must have equal lengths")
    if np.any(~np.isfinite(exit)) or np.any(~np.isfinite(entry)):
        raise ValueError("entry and exit times must be finite")
    if np.any(exit <= entry):
        i = int(np.flatnonzero(exit <= entry)[0])
        raise ValueError(f"record {i}: exit ({exit[i]}) must exceed entry ({entry[i]})")
    if np.any(~(weight >= 0)) or np.any(~np.isfinite(weight)):
        raise ValueError("weights must be finite and nonnegative")
    return exit, event, entry, weight


def _revcumsum(v):
    """Reverse cumulative sum along axis 0 with a trailing zero row."""
    out = np.zeros((v.shape[0] + 1,) + v.shape[1:])
    out[:-1] = np.cumsum(v[::-1], axis=0)[::-1]
    return out


class _RiskSets:
    """Index arithmetic for sums over ``{j : entry_j < t_k <= exit_j}``.

    The risk-set sum at event time ``t_k`` is the sum over ``exit >= t_k``
    minus the sum over ``entry >= t_k`` (entry < exit makes the second set a
    subset of the first).
    """

    def __init__(self, exit, event, entry, weight):
        ev = event & (weight > 0)
        self.times = np.unique(exit[ev])
        self.event_rows = np.flatnonzero(ev)
        self.event_slot = np.searchsorted(self.times, exit[ev])
        self.exit_order = np.argsort(exit, kind="stable")
        self.exit_pos = np.searchsorted(exit[self.exit_order], self.times, side="left")
        if self.times.size and np.any(entry >= self.times[0]):
            self.entry_order = np.argsort(entry, kind="stable")
            self.entry_pos = np.searchsorted(entry[self.entry_order], self.times, side="left")
        else:
            self.entry_order = None
        k = self.times.size
        self.d = np.bincount(self.event_slot, weights=weight[ev], minlength=k)
        # exact integer counts guard against cancellation in the weighted sums
        counts = self.sums((weight > 0).astype(float))
        empty = (counts < 0.5) & (self.d > 0)
        if np.any(empty):
            raise EmptyRiskSetError(self.times[np.flatnonzero(empty)[0]])

    def sums(self, values):
        s = _revcumsum(values[self.exit_order])[self.exit_pos]
        if self.entry_order is not None:
            s = s - _revcumsum(values[self.entry_order])[self.entry_pos]
        return s

    def event_totals(self, values):
        """Per event time, sum of ``values`` over the event rows."""
        rows = values[self.event_rows]
        if rows.ndim == 1:
            return np.bincount(self.event_slot, weights=rows, minlength=self.times.size)
        out = np.zeros((self.times.size,) + rows.shape[1:])
        np.add.at(out, self.event_slot, rows)
        return out


# ----------------------------------------------------------------------
# Kaplan-Meier
# ----------------------------------------------------------------------
def fit_km(exit, event, entry=None, weight=None, exhausted="zero"):
    """Weighted product-limit estimator with delayed entry.

    Parameters
    ----------
    exit : array_like
        Exit (event or censoring) times.
    event : array_like
        1 where the exit is an observed event.
    entry : array_like, optional
        Entry (truncation) times; zero when omitted.
    weight : array_like, optional
        Nonnegative case weights; one when omitted.
    exhausted : {'zero', 'skip'}
        What to do at an event time whose events use up the whole risk set.
        'zero' keeps the factor, so the curve drops to 0 for good; 'skip'
        omits it. Under delayed entry later entrants can make such a collapse
        a small-sample artefact rather than the end of follow-up.

    Returns
    -------
    StepFunction
        ``S(t) = prod_{t_k <= t} (1 - d_k / n_k)`` with ``initial_value`` 1.
    """
    if exhausted not in ("zero", "skip"):
        raise ValueError("exhausted must be 'zero' or 'skip'")
    exit, event, entry, weight = _as_inputs(exit, event, entry, weight)
    rs = _RiskSets(exit, event, entry, weight)
    if rs.times.size == 0:
        return StepFunction([], [], 1.0)
    at_risk = rs.sums(weight)
    factors = np.clip(1.0 - rs.d / at_risk, 0.0, 1.0)
    factors[rs.d >= at_risk] = 0.0 if exhausted == "zero" else 1.0
    return StepFunction(rs.times, np.cumprod(factors), 1.0)


# ----------------------------------------------------------------------
# Cox proportional hazards
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class CoxFit:
    """Fitted proportional-hazards model (log-hazard-ratio scale)."""

    theta: np.ndarray
    covariance: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    score: np.ndarray
    n_events: float

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))

    def confint(self, z=1.959963984540054):
        se = self.se
        return self.theta - z * se, self.theta + z * se


class _CoxProblem:
    def __init__(self, exit, event, x, entry, weight):
        self.rs = _RiskSets(exit, event, entry, weight)
        self.weight = weight
        self.p = x.shape[1]
        pos = weight > 0
        if self.p:
            xs = x[pos]
            const = np.ptp(xs, axis=0) == 0 if xs.shape[0] else np.ones(self.p, bool)
            if np.any(const):
                j = int(np.flatnonzero(const)[0])
                raise NonIdentifiableError(f"covariate column {j} is constant")
            center = np.average(xs, axis=0, weights=weight[pos])
        else:
            center = np.zeros(0)
        self.center = center
        self.x = x - center
        iu = np.triu_indices(self.p)
        self.iu = iu
        self.xx = self.x[:, iu[0]] * self.x[:, iu[1]]
        self.wx_events = self.rs.event_totals(weight[:, None] * self.x).sum(axis=0)

    def evaluate(self, theta):
        # overshooting Newton steps may over/underflow; callers reject non-finite values
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            eta = self.x @ theta
            r = self.weight * np.exp(eta)
            stacked = np.column_stack((r, r[:, None] * self.x, r[:, None] * self.xx))
            s = self.rs.sums(stacked)
            p = self.p
            s0 = s[:, 0]
            m = s[:, 1:1 + p] / s0[:, None]
            d = self.rs.d
            loglik = float(np.dot(self.weight[self.rs.event_rows], eta[self.rs.event_rows])
                           - np.dot(d, np.log(s0)))
            score = self.wx_events - d @ m
            s2 = s[:, 1 + p:] / s0[:, None]
            upper = d @ (s2 - m[:, self.iu[0]] * m[:, self.iu[1]])
        info = np.zeros((p, p))
        info[self.iu] = upper
        info = info + np.triu(info, 1).T
        return loglik, score, info


def fit_cox(exit, event, x, entry=None, weight=None, *, tol=1e-9, max_iter=50,
            max_halvings=10, max_abs_coef=MAX_ABS_COEF):
    """Weighted Cox regression with Breslow ties and delayed entry.

    Newton-Raphson from zero with step-halving on likelihood decrease.
    Convergence is declared when the sup-norm of the score falls below
    ``tol * max(1, total event weight)``.

    Parameters
    ----------
    exit, event, entry, weight : array_like
        As in :func:`fit_km`.
    x : array_like, shape (n, p)
        Covariates; ``p = 0`` fits the null model.
    tol : float
        Score tolerance (relative to the weighted event count).
    max_iter : int
        Newton iterations before giving up; the result is then returned with
        ``converged=False`` and a :class:`ConvergenceWarning`.

    Raises
    ------
    SeparationError
        If any coefficient leaves ``[-max_abs_coef, max_abs_coef]``.
    NonIdentifiableError
        For a constant covariate column or a singular information matrix.
    EmptyRiskSetError
        If an event time has no positively weighted subject at risk.
    """
    exit, event, entry, weight = _as_inputs(exit, event, entry, weight)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != exit.shape[0]:
        raise ValueError("covariate rows must match the number of records")
    prob = _CoxProblem(exit, event, x, entry, weight)
    if prob.rs.times.size == 0:
        raise ValueError("at least one event with positive weight is required")
    p = prob.p
    scale = max(1.0, float(prob.rs.d.sum()))
    theta = np.zeros(p)
    loglik, score, info = prob.evaluate(theta)
    converged = p == 0
    n_iter = 0
    while not converged and n_iter < max_iter:
        if np.max(np.abs(score)) < tol * scale:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise NonIdentifiableError("singular information matrix") from None
        n_iter += 1
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = theta + t * step
            c_loglik, c_score, c_info = prob.evaluate(cand)
            if np.isfinite(c_loglik) and c_loglik >= loglik - 1e-12 * (1.0 + abs(loglik)):
                break
            t *= 0.5
        else:
            break
        theta, loglik, score, info = cand, c_loglik, c_score, c_info
        if np.any(np.abs(theta) > max_abs_coef):
            raise SeparationError(
                f"coefficient diverged (|theta| > {max_abs_coef}): theta={theta.tolist()}")
    if not converged and p and np.max(np.abs(score)) < tol * scale:
        converged = True
    if not converged:
        warnings.warn(f"Cox fit did not converge in {max_iter} iterations "
                      f"(max |score| = {np.max(np.abs(score)):.3g})", ConvergenceWarning,
                      stacklevel=2)
    if p:
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            raise NonIdentifiableError("singular information matrix") from None
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((0, 0))
    return CoxFit(theta=theta, covariance=cov, loglik=loglik, n_iter=n_iter,
                  converged=converged, score=score, n_events=float(prob.rs.d.sum()))


def cox_partial_loglik(theta, exit, event, x, entry=None, weight=None):
    """Weighted Breslow partial log-likelihood, score and information at ``theta``."""
    exit, event, entry, weight = _as_inputs(exit, event, entry, weight)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    prob = _CoxProblem(exit, event, x, entry, weight)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    loglik, score, info = prob.evaluate(theta)
    return loglik, score, info


def breslow_cumhaz(fit, exit, event, x, entry=None, weight=None):
    """Weighted Breslow estimate of the baseline cumulative hazard.

    Jumps are ``d_k / sum_{j in R(t_k)} w_j exp(theta' x_j)`` at each event
    time, with the same records and conventions used for ``fit``.
    """
    exit, event, entry, weight = _as_inputs(exit, event, entry, weight)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    theta = np.asarray(fit.theta, dtype=float)
    if x.shape[1] != theta.shape[0]:
        raise ValueError("covariate dimension does not match the fit")
    rs = _RiskSets(exit, event, entry, weight)
    if rs.times.size == 0:
        return StepFunction([], [], 0.0)
    s0 = rs.sums(weight * np.exp(x @ theta))
    return StepFunction(rs.times, np.cumsum(rs.d / s0), 0.0)


def predict_survival(fit, cumhaz, x, r):
    """Conditional survival ``exp(-Lambda0(r) * exp(theta' x))``.

    ``x`` may be one covariate vector or a matrix of rows; ``r`` a scalar or
    an array. With a matrix and an array the result has shape
    ``(n_rows, len(r))``.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(fit.theta, dtype=float)
    if x.shape[-1] != theta.shape[0]:
        raise ValueError(f"covariate dimension {x.shape[-1]} does not match fit ({theta.shape[0]})")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be nonnegative")
    risk = np.exp(x @ theta)
    out = np.exp(-np.multiply.outer(risk, np.asarray(cumhaz(r))))
    return out if out.ndim else float(out)
