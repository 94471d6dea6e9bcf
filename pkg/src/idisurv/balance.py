"""Propensity model, ATT odds weights, nearest-neighbour matching and SMDs."""

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightError, EmptyGroupError, SeparationError
from .survival import MAX_ABS_COEF

SMD_THRESHOLD = 0.1


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """Weighted logistic regression; ``beta[0]`` is the intercept."""

    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    score: np.ndarray

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, self.beta.size - 1)
        return _expit(self.beta[0] + x @ self.beta[1:])


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logistic_terms(beta, design, y, w):
    eta = design @ beta
    p = _expit(eta)
    # log(1 + e^eta) computed stably
    loglik = float(w @ (y * eta - np.logaddexp(0.0, eta)))
    score = design.T @ (w * (y - p))
    info = (design * (w * p * (1.0 - p))[:, None]).T @ design
    return loglik, score, info


def fit_weighted_logistic(x, labels, weights=None, *, tol=1e-9, max_iter=50,
                          max_abs_coef=MAX_ABS_COEF):
    """Maximise the weight-multiplied Bernoulli log-likelihood (logit link).

    Solved by iteratively reweighted least squares (Newton-Raphson) from zero
    with step-halving. An intercept column is always added.

    Parameters
    ----------
    x : array_like, shape (n, p)
        Covariates; ``p`` may be 0 for an intercept-only model.
    labels : array_like
        0/1 outcomes (population flags).
    weights : array_like, optional
        Nonnegative case weights.
    """
    y = np.asarray(labels, dtype=float).reshape(-1)
    n = y.size
    x = np.asarray(x, dtype=float).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if np.any(~(w >= 0)):
        raise ValueError("weights must be nonnegative")
    if n < x.shape[1] + 1:
        raise ValueError("need at least p + 1 rows")
    if not (w[y == 1].sum() > 0 and w[y == 0].sum() > 0):
        raise EmptyGroupError("both label values must be present with positive weight")
    design = np.column_stack((np.ones(n), x))
    scale = max(1.0, float(w.sum()))
    beta = np.zeros(design.shape[1])
    loglik, score, info = _logistic_terms(beta, design, y, w)
    converged = False
    it = 0
    while it < max_iter:
        if np.max(np.abs(score)) < tol * scale:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information in logistic fit") from None
        it += 1
        t = 1.0
        for _ in range(11):
            cand = beta + t * step
            c = _logistic_terms(cand, design, y, w)
            if c[0] >= loglik - 1e-12 * (1.0 + abs(loglik)):
                break
            t *= 0.5
        else:
            break
        beta = cand
        loglik, score, info = c
        if np.any(np.abs(beta) > max_abs_coef):
            raise SeparationError(f"logistic coefficient diverged: beta={beta.tolist()}")
    if not converged and np.max(np.abs(score)) < tol * scale:
        converged = True
    cov = np.linalg.inv(info)
    return LogisticFit(beta=beta, covariance=0.5 * (cov + cov.T), loglik=loglik,
                       converged=converged, n_iter=it, score=score)


def att_weights(fit, x, groups, ids=None):
    """ATT weights: 1 for single-arm subjects, ``p / (1 - p)`` for controls."""
    g = np.asarray(groups).reshape(-1)
    ps = fit.predict(x)
    w = np.ones(g.size)
    ctrl = g == 0
    if np.any(ps[ctrl] >= 1.0):
        i = int(np.flatnonzero(ctrl & (ps >= 1.0))[0])
        who = ids[i] if ids is not None else i
        raise DegenerateWeightError(f"propensity score is 1 for control {who!r}")
    w[ctrl] = ps[ctrl] / (1.0 - ps[ctrl])
    return w


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


class _NextFree:
    """Union-find over sorted slots for 'nearest unused slot' queries."""

    def __init__(self, n):
        self.right = list(range(n + 1))  # slot n is a sentinel
        self.left = list(range(n + 1))   # shifted by one; index 0 is the sentinel
        self.n = n

    def _find(self, parent, i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def right_of(self, i):
        j = self._find(self.right, i)
        return j if j < self.n else None

    def left_of(self, i):
        j = self._find(self.left, i + 1) - 1
        return j if j >= 0 else None

    def remove(self, i):
        self.right[i] = i + 1
        self.left[i + 1] = i


@dataclass(frozen=True, eq=False)
class MatchResult:
    treated: np.ndarray
    control: np.ndarray
    distance: np.ndarray
    unmatched_treated: np.ndarray


def nn_match(ps, groups, caliper=None, rng=None):
    """Greedy 1:1 nearest-neighbour matching without replacement.

    Distances are absolute differences of logit propensity scores. Treated
    subjects are processed in descending propensity order; ties between
    equally close controls go to the lower index. ``caliper`` is expressed in
    standard deviations of the pooled logit propensity score.

    Parameters
    ----------
    ps : array_like
        Propensity scores for all subjects.
    groups : array_like
        1 for single-arm (treated) subjects, 0 for controls.
    caliper : float, optional
    rng : numpy.random.Generator, optional
        If given, subjects with identical scores are processed in a shuffled
        order instead of index order.

    Returns
    -------
    MatchResult
        Indices into the input arrays of matched treated/control pairs.
    """
    ps = np.asarray(ps, dtype=float).reshape(-1)
    g = np.asarray(groups).reshape(-1)
    treated = np.flatnonzero(g == 1)
    controls = np.flatnonzero(g == 0)
    if treated.size == 0 or controls.size == 0:
        raise EmptyGroupError("matching needs both treated subjects and controls")
    lp = _logit(ps)
    tie = rng.permutation(ps.size) if rng is not None else np.arange(ps.size)
    t_order = treated[np.lexsort((tie[treated], -lp[treated]))]
    c_order = controls[np.lexsort((tie[controls], lp[controls]))]
    c_lp = lp[c_order]
    max_dist = math.inf
    if caliper is not None:
        max_dist = caliper * float(np.std(lp, ddof=1))
    free = _NextFree(c_order.size)
    pairs_t, pairs_c, dists, unmatched = [], [], [], []
    remaining = c_order.size
    pos_all = np.searchsorted(c_lp, lp[t_order], side="left")
    for ti, pos in zip(t_order.tolist(), pos_all.tolist()):
        if remaining == 0:
            unmatched.append(ti)
            continue
        target = lp[ti]
        lo = free.left_of(pos - 1) if pos > 0 else None
        hi = free.right_of(pos) if pos < c_order.size else None
        best = None
        if lo is not None:
            best = lo
        if hi is not None:
            d_hi = abs(c_lp[hi] - target)
            if best is None or d_hi < abs(c_lp[best] - target) or (
                    d_hi == abs(c_lp[best] - target) and c_order[hi] < c_order[best]):
                best = hi
        dist = abs(c_lp[best] - target)
        if dist > max_dist:
            unmatched.append(ti)
            continue
        free.remove(best)
        remaining -= 1
        pairs_t.append(ti)
        pairs_c.append(int(c_order[best]))
        dists.append(dist)
    if unmatched:
        warnings.warn(f"{len(unmatched)} of {treated.size} treated subjects left unmatched",
                      stacklevel=2)
    return MatchResult(treated=np.array(pairs_t, dtype=int), control=np.array(pairs_c, dtype=int),
                       distance=np.array(dists), unmatched_treated=np.array(unmatched, dtype=int))


# ----------------------------------------------------------------------
# Standardised mean differences
# ----------------------------------------------------------------------
def _smd_column(x, g, w, pooled):
    stats = []
    for grp in (1, 0):
        xs, ws = x[g == grp], w[g == grp]
        mean = float(ws @ xs / ws.sum())
        var = float(ws @ (xs - mean) ** 2 / ws.sum())
        if pooled == "ess":
            n_g = ws.sum() ** 2 / (ws @ ws)
        else:
            n_g = xs.size
        stats.append((mean, var, n_g))
    (m1, v1, n1), (m0, v0, n0) = stats
    denom_n = n1 + n0 - 2
    sp = math.sqrt(max(((n1 - 1) * v1 + (n0 - 1) * v0) / denom_n, 0.0)) if denom_n > 0 else 0.0
    diff = m1 - m0
    if sp == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / sp


def smd(x, groups, weights=None, pooled="raw"):
    """Standardised mean difference per covariate column.

    Weighted group means and variances use the weights as frequency weights
    normalised by their sum; the pooled SD keeps the ``(n_g - 1)`` factors with
    raw group sizes (``pooled='raw'``) or Kish effective sizes
    (``pooled='ess'``). A zero pooled SD yields 0 for equal means and ``inf``
    otherwise.
    """
    g = np.asarray(groups).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(g.size, -1)
    w = np.ones(g.size) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if pooled not in ("raw", "ess"):
        raise ValueError("pooled must be 'raw' or 'ess'")
    for grp in (0, 1):
        if not w[g == grp].sum() > 0:
            raise EmptyGroupError(f"group {grp} has no positive weight")
    return np.array([_smd_column(x[:, j], g, w, pooled) for j in range(x.shape[1])])


@dataclass(frozen=True)
class BalanceReport:
    names: tuple
    smd_before: tuple
    smd_after: tuple
    ess: dict

    def rows(self):
        return list(zip(self.names, self.smd_before, self.smd_after))

    def passes(self, threshold=SMD_THRESHOLD):
        return [abs(a) < threshold for a in self.smd_after]

    def to_csv(self, flags=False, threshold=SMD_THRESHOLD):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["covariate", "smd_before", "smd_after"] + (["balance"] if flags else [])
        writer.writerow(header)
        for (name, before, after), ok in zip(self.rows(), self.passes(threshold)):
            row = [name, repr(float(before)), repr(float(after))]
            if flags:
                row.append("PASS" if ok else "FAIL")
            writer.writerow(row)
        return buf.getvalue()

    def to_dict(self, threshold=SMD_THRESHOLD):
        def enc(v):
            v = float(v)
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

        return {
            "threshold": threshold,
            "covariates": [
                {"name": n, "smd_before": enc(b), "smd_after": enc(a),
                 "abs_smd_before": enc(abs(b)), "abs_smd_after": enc(abs(a)),
                 "balanced": abs(a) < threshold}
                for n, b, a in self.rows()
            ],
            "effective_sample_size": self.ess,
        }

    def to_json(self, threshold=SMD_THRESHOLD):
        return json.dumps(self.to_dict(threshold), indent=2)


def smd_table(x, groups, weights, names=None, pooled="raw"):
    """Balance report before (unit weights) and after weighting."""
    g = np.asarray(groups).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(g.size, -1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(x.shape[1]))
    before = smd(x, g, None, pooled)
    after = smd(x, g, w, pooled)
    ess = {}
    for grp in (1, 0):
        ws = w[g == grp]
        ess[str(grp)] = float(ws.sum() ** 2 / (ws @ ws)) if ws.size else 0.0
    return BalanceReport(names=names, smd_before=tuple(before.tolist()),
                         smd_after=tuple(after.tolist()), ess=ess)
