"""Scalar and matrix numerical primitives.

Univariate and bivariate standard-normal CDFs, multivariate-normal
rectangle probabilities (exact on small block-diagonal covariances,
randomized quasi-Monte-Carlo otherwise), a quasi-Newton maximizer,
a generalized-eigenvalue trace, and a generic iterative-proportional-
fitting engine over n-way arrays.

Everything here is pure: results depend only on the arguments (the QMC
path additionally on its seed), so values can be shared freely across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cholesky as _cholesky
from scipy.linalg import eigh as _eigh
from scipy.optimize import minimize as _minimize
from scipy.special import ndtr as _ndtr
from scipy.special import ndtri as _ndtri
from scipy.stats import qmc as _qmc


class DegenerateCorrelationError(ValueError):
    """Correlation too close to +/-1 for the bivariate CDF."""


class MatrixConditioningError(ValueError):
    """A matrix is (numerically) singular or not positive definite."""


class InfeasibleMarginError(ValueError):
    """An IPF target margin is positive where the seed array is zero."""


_RHO_LIMIT = 1.0 - 1e-12
_TWO_PI = 2.0 * math.pi

# Gauss-Legendre rules used by the bivariate CDF; the node count grows
# with |rho| exactly as in the Drezner-Wesolowsky/Genz scheme.
_GL_RULES = {n: leggauss(n) for n in (6, 12, 20)}


def std_normal_cdf(x):
    """Standard normal CDF, vectorized; accepts +/-inf, rejects NaN."""
    arr = np.asarray(x, dtype=float)
    if np.isnan(arr).any():
        raise ValueError("std_normal_cdf: NaN input")
    out = _ndtr(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def std_normal_quantile(p):
    """Inverse standard normal CDF (vectorized)."""
    arr = np.asarray(p, dtype=float)
    out = _ndtri(arr)
    return float(out) if np.isscalar(p) or arr.ndim == 0 else out


def _bvnu_finite(dh, dk, r):
    """P(X > dh, Y > dk) for standard bivariate normal, finite args.

    Vectorized adaptation of Genz's BVNU rewrite of the
    Drezner-Wesolowsky Gauss-Legendre scheme: series-reduced tail
    formula for |r| >= 0.925, direct quadrature of the correlation
    integral below it.
    """
    dh = np.asarray(dh, dtype=float)
    dk = np.asarray(dk, dtype=float)
    r = np.asarray(r, dtype=float)
    out = np.empty(dh.shape, dtype=float)

    abs_r = np.abs(r)
    lo_masks = [
        (abs_r < 0.3, 6),
        ((abs_r >= 0.3) & (abs_r < 0.75), 12),
        ((abs_r >= 0.75) & (abs_r < 0.925), 20),
    ]
    for mask, n_nodes in lo_masks:
        if not mask.any():
            continue
        h = dh[mask]
        k = dk[mask]
        hk = h * k
        nodes, weights = _GL_RULES[n_nodes]
        # theta in (0, asin r) via the (1+x) node map; nodes symmetric.
        asr = 0.5 * np.arcsin(r[mask])
        sn = np.sin(asr[:, None] * (1.0 + nodes)[None, :])
        vals = np.exp((sn * hk[:, None] - 0.5 * (h * h + k * k)[:, None]) / (1.0 - sn * sn))
        bvn = (vals @ weights) * asr / _TWO_PI + _ndtr(-h) * _ndtr(-k)
        out[mask] = bvn

    hi = abs_r >= 0.925
    if hi.any():
        h = dh[hi]
        k = np.where(r[hi] < 0.0, -dk[hi], dk[hi])
        hk = h * k
        as_ = (1.0 - r[hi]) * (1.0 + r[hi])
        a = np.sqrt(as_)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 80.0
        asr0 = -(bs / as_ + hk) / 2.0
        bvn = np.where(
            asr0 > -100.0,
            a * np.exp(asr0) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
            0.0,
        )
        b = np.sqrt(bs)
        sp0 = math.sqrt(_TWO_PI) * _ndtr(-b / a)
        bvn = np.where(
            hk > -100.0,
            bvn - np.exp(-hk / 2.0) * sp0 * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
            bvn,
        )
        nodes, weights = _GL_RULES[20]
        xs = (0.5 * a[:, None] * (1.0 + nodes)[None, :]) ** 2
        asr1 = -(bs[:, None] / xs + hk[:, None]) / 2.0
        rs = np.sqrt(1.0 - xs)
        sp = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
        ep = np.exp(-(hk[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
        quad = np.where(asr1 > -100.0, np.exp(asr1) * (sp - ep), 0.0) @ weights
        bvn = (0.5 * a * quad - bvn) / _TWO_PI

        pos = r[hi] > 0.0
        res_pos = bvn + _ndtr(-np.maximum(h, k))
        ell = np.where(h < 0.0, _ndtr(k) - _ndtr(h), _ndtr(-h) - _ndtr(-k))
        res_neg = np.where(h >= k, -bvn, ell - bvn)
        out[hi] = np.where(pos, res_pos, res_neg)

    return np.clip(out, 0.0, 1.0)


def bivariate_normal_cdf(a, b, rho):
    """Phi2(a, b; rho) = P(X <= a, Y <= b), standard bivariate normal.

    `a` and `b` may be +/-inf and broadcast against each other; `rho`
    must satisfy |rho| < 1 - 1e-12 (callers clamp before the call).
    Absolute error is below 5e-9 on finite arguments.
    """
    a_arr, b_arr, r_arr = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    if np.isnan(a_arr).any() or np.isnan(b_arr).any() or np.isnan(r_arr).any():
        raise ValueError("bivariate_normal_cdf: NaN input")
    if (np.abs(r_arr) >= _RHO_LIMIT).any():
        raise DegenerateCorrelationError(
            "bivariate_normal_cdf: |rho| too close to 1; clamp before calling"
        )

    out = np.empty(a_arr.shape, dtype=float)
    neg_inf = np.isneginf(a_arr) | np.isneginf(b_arr)
    a_pinf = np.isposinf(a_arr)
    b_pinf = np.isposinf(b_arr)
    out[neg_inf] = 0.0
    m = a_pinf & b_pinf & ~neg_inf
    out[m] = 1.0
    m = a_pinf & ~b_pinf & ~neg_inf
    out[m] = _ndtr(b_arr[m])
    m = b_pinf & ~a_pinf & ~neg_inf
    out[m] = _ndtr(a_arr[m])
    core = ~(neg_inf | a_pinf | b_pinf)
    if core.any():
        # Phi2(a,b;rho) = P(X > -a, Y > -b) for the same rho.
        out[core] = _bvnu_finite(-a_arr[core], -b_arr[core], r_arr[core])

    if np.isscalar(a) and np.isscalar(b) and np.isscalar(rho):
        return float(out)
    return out


@dataclass(frozen=True)
class RectangleSpec:
    """Axis-aligned integration region for a multivariate normal."""

    mean: np.ndarray
    covariance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        d = mean.shape[0]
        if cov.shape != (d, d) or lower.shape != (d,) or upper.shape != (d,):
            raise ValueError("RectangleSpec: inconsistent dimensions")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("RectangleSpec: covariance not symmetric")
        if (np.diag(cov) <= 0.0).any():
            raise ValueError("RectangleSpec: covariance diagonal must be positive")
        if not (lower < upper).all():
            raise ValueError("RectangleSpec: need lower < upper per coordinate")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _connected_blocks(cov: np.ndarray) -> list[list[int]]:
    """Connected components of the nonzero pattern (exact zeros split)."""
    d = cov.shape[0]
    adj = cov != 0.0
    seen = np.zeros(d, dtype=bool)
    blocks = []
    for start in range(d):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.nonzero(adj[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        blocks.append(sorted(comp))
    return blocks


def _rect_prob_1d(mean, var, lo, hi):
    s = math.sqrt(var)
    return float(_ndtr((hi - mean) / s) - _ndtr((lo - mean) / s))


def _rect_prob_2d(mean, cov, lo, hi):
    s = np.sqrt(np.diag(cov))
    rho = float(np.clip(cov[0, 1] / (s[0] * s[1]), -(1.0 - 1e-9), 1.0 - 1e-9))
    a = (np.asarray([hi[0], lo[0]]) - mean[0]) / s[0]
    b = (np.asarray([hi[1], lo[1]]) - mean[1]) / s[1]
    grid = bivariate_normal_cdf(a[:, None], b[None, :], rho)
    return float(grid[0, 0] - grid[0, 1] - grid[1, 0] + grid[1, 1])


def _rect_prob_qmc(mean, cov, lo, hi, seed, tol):
    """Genz separation-of-variables transform under a randomized Sobol rule."""
    try:
        chol = _cholesky(cov, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises LinAlgError
        raise MatrixConditioningError(f"covariance not positive definite: {exc}") from exc
    d = mean.shape[0]
    lo = (lo - mean).astype(float)
    hi = (hi - mean).astype(float)

    def batch_estimate(points):
        n = points.shape[0]
        prob = np.ones(n)
        y = np.zeros((n, d))
        for i in range(d):
            shift = y[:, :i] @ chol[i, :i] if i else 0.0
            ai = _ndtr((lo[i] - shift) / chol[i, i])
            bi = _ndtr((hi[i] - shift) / chol[i, i])
            prob *= bi - ai
            if i < d - 1:
                u = ai + points[:, i] * (bi - ai)
                y[:, i] = _ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))
        return prob.mean()

    rng = np.random.default_rng(seed)
    n_shifts = 12
    n_points = 1 << 10
    for _ in range(8):
        estimates = []
        for _ in range(n_shifts):
            sob = _qmc.Sobol(d=max(d - 1, 1), scramble=True, seed=rng)
            pts = sob.random(n_points)
            estimates.append(batch_estimate(pts))
        estimates = np.asarray(estimates)
        est = float(estimates.mean())
        se = float(estimates.std(ddof=1) / math.sqrt(n_shifts))
        if se <= tol:
            return est, se
        n_points *= 2
    return est, se


def mvn_rectangle_probability(spec: RectangleSpec, seed: int = 0, tol: float = 1e-4):
    """P(lower <= Y <= upper) for Y ~ N(mean, covariance).

    Exact (product of univariate/bivariate rectangle probabilities,
    error estimate 0) when the covariance is block diagonal with blocks
    of size <= 2 under its exact-zero pattern; otherwise a seeded
    randomized QMC estimate whose standard error is driven below `tol`.

    Returns (probability, error_estimate).
    """
    eigvals = np.linalg.eigvalsh(spec.covariance)
    if eigvals[0] <= 0.0:
        raise MatrixConditioningError(
            f"covariance not positive definite (min eigenvalue {eigvals[0]:.3e})"
        )
    blocks = _connected_blocks(spec.covariance)
    if all(len(b) <= 2 for b in blocks):
        prob = 1.0
        for b in blocks:
            idx = np.asarray(b)
            if len(b) == 1:
                i = b[0]
                prob *= _rect_prob_1d(
                    spec.mean[i], spec.covariance[i, i], spec.lower[i], spec.upper[i]
                )
            else:
                prob *= _rect_prob_2d(
                    spec.mean[idx],
                    spec.covariance[np.ix_(idx, idx)],
                    spec.lower[idx],
                    spec.upper[idx],
                )
        return max(prob, 0.0), 0.0
    return _rect_prob_qmc(spec.mean, spec.covariance, spec.lower, spec.upper, seed, tol)


@dataclass
class MaximizeOptions:
    gtol: float = 1e-6
    ftol: float = 1e-9
    max_evals: int = 2000


@dataclass
class MaximizeResult:
    x: np.ndarray
    value: float
    status: str  # "converged", "max_evals", or "failed"

    def __iter__(self):
        return iter((self.x, self.value, self.status))


def finite_difference_gradient(objective, x, base_step=1e-6):
    """Central differences with per-coordinate step h_k = step*max(1,|x_k|)."""
    x = np.asarray(x, dtype=float)
    h = base_step * np.maximum(1.0, np.abs(x))
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        grad[k] = (objective(x + e) - objective(x - e)) / (2.0 * h[k])
    return grad


def maximize(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray] | None = None,
    start: np.ndarray | Sequence[float] = (),
    opts: MaximizeOptions | None = None,
) -> MaximizeResult:
    """Unconstrained smooth maximization (quasi-Newton, L-BFGS-B).

    Central finite differences stand in for the gradient when none is
    supplied. The returned value never falls below objective(start)
    (up to 1e-12): if the line search degrades, the start is returned
    with a "failed" status.
    """
    opts = opts or MaximizeOptions()
    x0 = np.asarray(start, dtype=float)
    f0 = objective(x0)
    if not np.isfinite(f0):
        raise ValueError("maximize: objective not finite at start")

    def neg(x):
        val = objective(x)
        return -val if np.isfinite(val) else 1e300

    if gradient is None:
        def neg_grad(x):
            return -finite_difference_gradient(objective, x)
    else:
        def neg_grad(x):
            return -np.asarray(gradient(x), dtype=float)

    res = _minimize(
        neg,
        x0,
        jac=neg_grad,
        method="L-BFGS-B",
        options={
            "maxfun": opts.max_evals,
            "gtol": opts.gtol,
            "ftol": opts.ftol,
            "maxiter": opts.max_evals,
        },
    )
    value = -res.fun
    if not np.isfinite(value) or value < f0 - 1e-12:
        return MaximizeResult(x0, f0, "failed")
    if res.success:
        status = "converged"
    elif res.status == 1:
        status = "max_evals"
    else:
        status = "failed" if value <= f0 + 1e-12 else "converged"
    return MaximizeResult(np.asarray(res.x, dtype=float), float(value), status)


def generalized_eigen_trace(V: np.ndarray, H: np.ndarray, ridge: float = 1e-10) -> float:
    """Sum of generalized eigenvalues of V x = lambda (H + ridge*scale*I) x.

    `scale` is the mean diagonal of H, so the ridge is relative. Equals
    tr(H^-1 V) when H is well conditioned and ridge is 0. Solving the
    generalized problem avoids forming the inverse of a near-singular H.
    """
    V = np.asarray(V, dtype=float)
    H = np.asarray(H, dtype=float)
    if V.shape != H.shape or V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError("generalized_eigen_trace: V and H must be square, same shape")
    scale = float(np.mean(np.diag(H)))
    H_r = H + ridge * scale * np.eye(H.shape[0])
    try:
        eigvals = _eigh(V, H_r, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(H_r)
        raise MatrixConditioningError(
            f"sensitivity matrix numerically singular (cond ~ {cond:.3e})"
        ) from exc
    return float(np.sum(eigvals))


@dataclass
class MarginTargets:
    """Target margins for IPF: parallel lists of axis tuples and tables.

    Each table's dimensions follow its axis tuple; tuples are
    canonicalized to ascending axis order on construction.
    """

    axes: list[tuple[int, ...]] = field(default_factory=list)
    tables: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.axes) != len(self.tables):
            raise ValueError("MarginTargets: axes and tables must align")
        canon_axes, canon_tables = [], []
        for ax, table in zip(self.axes, self.tables):
            ax = tuple(int(a) for a in ax)
            table = np.asarray(table, dtype=float)
            if len(set(ax)) != len(ax):
                raise ValueError(f"MarginTargets: duplicate axis in {ax}")
            if table.ndim != len(ax):
                raise ValueError(f"MarginTargets: table rank does not match axes {ax}")
            order = np.argsort(ax)
            canon_axes.append(tuple(ax[i] for i in order))
            canon_tables.append(np.transpose(table, order))
        self.axes = canon_axes
        self.tables = canon_tables
        if any((t < 0.0).any() for t in self.tables):
            raise ValueError("MarginTargets: negative target entries")
        totals = np.asarray([t.sum() for t in self.tables])
        if len(totals) > 1:
            ref = totals[0]
            if np.abs(totals - ref).max() > 1e-9 * max(abs(ref), 1.0):
                raise ValueError("MarginTargets: margins disagree on the total")


def ipf_fit(
    init: np.ndarray,
    targets: MarginTargets,
    tol: float = 1e-6,
    max_sweeps: int = 500,
):
    """Cyclic proportional rescaling of `init` toward the target margins.

    Returns (fitted array, max absolute margin discrepancy, sweeps run).
    Mutually inconsistent targets (legal for composite-likelihood
    margins) terminate at max_sweeps with the achieved discrepancy.
    """
    table = np.array(init, dtype=float)
    if (table < 0.0).any():
        raise ValueError("ipf_fit: negative entries in init")
    ndim = table.ndim
    for kept in targets.axes:
        if any(ax < 0 or ax >= ndim for ax in kept):
            raise ValueError(f"ipf_fit: margin axes {kept} out of range for rank {ndim}")
    sum_axes = [tuple(ax for ax in range(ndim) if ax not in kept) for kept in targets.axes]

    for kept, summed, target in zip(targets.axes, sum_axes, targets.tables):
        margin = table.sum(axis=summed)
        if margin.shape != target.shape:
            raise ValueError(f"ipf_fit: target over axes {kept} has the wrong shape")
        if ((margin == 0.0) & (target > 0.0)).any():
            raise InfeasibleMarginError(
                f"target margin over axes {kept} positive where init margin is zero"
            )

    def discrepancy():
        worst = 0.0
        for summed, target in zip(sum_axes, targets.tables):
            worst = max(worst, float(np.abs(table.sum(axis=summed) - target).max()))
        return worst

    sweeps = 0
    disc = discrepancy()
    while disc > tol and sweeps < max_sweeps:
        for kept, summed, target in zip(targets.axes, sum_axes, targets.tables):
            margin = table.sum(axis=summed)
            ratio = np.ones_like(margin)
            np.divide(target, margin, out=ratio, where=margin > 0.0)
            full_shape = [1] * ndim
            for ax, size in zip(kept, ratio.shape):
                full_shape[ax] = size
            table *= ratio.reshape(full_shape)
        sweeps += 1
        disc = discrepancy()
    return table, disc, sweeps
