"""Initialization, the pairwise EM loop, and multi-start orchestration.

One EM iteration is: E-step (pairwise cell posteriors), closed-form
weight update, then a quasi-Newton ascent of the expected complete
pairwise log-likelihood over every non-weight packed coordinate
(generalized EM: the M-step improves the objective, it does not solve
it to the bone). Finite-difference gradients are evaluated as one
batched cell-probability sweep per gradient, so the M-step cost is a
handful of vectorized bivariate-CDF calls.

Rational starts discretize the latent scale back out of the data:
thresholds from pooled marginal quantiles, then k-means on per-category
latent interval midpoints, and an eigen-projection of the cluster
moments onto the identified loading structure. Random starts jitter the
rational point in packed coordinates, which preserves every constraint
(simplex weights, positive diagonals, sorted thresholds) by
construction.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize as _minimize

from .model import (
    OrdinalSchema,
    ParameterSpace,
    ScrParameters,
    Thresholds,
    count_parameters,
    upper_cholesky,
)
from .numerics import std_normal_quantile
from .pairwise import (
    PROB_FLOOR,
    CellProbabilityEngine,
    PairwiseTables,
    PosteriorTables,
    pairwise_loglik,
    update_weights,
)


class NotIdentifiableError(ValueError):
    """Parameter count exceeds the pairwise-identifiability bound."""


class InitializationError(RuntimeError):
    """Rational start could not be constructed (degenerate marginals/clusters)."""


class MultiStartError(RuntimeError):
    """Every start failed; carries per-start diagnostics."""

    def __init__(self, failures):
        self.failures = failures
        super().__init__(f"all {len(failures)} starts failed; first: {failures[0][1]}")


@dataclass
class FitConfig:
    max_em_iters: int = 500
    em_tol: float = 1e-2
    mstep_gtol: float = 1e-4
    mstep_ftol: float = 1e-6
    mstep_max_evals: int = 200
    n_starts: int = 100
    seed: int = 0
    threads: int = 1
    polish: bool = True
    polish_max_evals: int = 600

    def __post_init__(self):
        if self.max_em_iters < 1 or self.n_starts < 1:
            raise ValueError("FitConfig: max_em_iters and n_starts must be >= 1")
        if min(self.em_tol, self.mstep_gtol, self.mstep_ftol) <= 0:
            raise ValueError("FitConfig: tolerances must be positive")


@dataclass
class FitResult:
    params: ScrParameters
    pll: float
    trace: np.ndarray
    iterations: int
    converged: bool
    start_index: int = 0
    seed: int = 0


def _check_identifiable(schema: OrdinalSchema, G: int, Q: int):
    count, bound, ok = count_parameters(schema.P, Q, G, schema.C)
    if not ok:
        raise NotIdentifiableError(
            f"(G={G}, Q={Q}) needs {count} parameters, pairwise bound is {bound}"
        )


def _marginal_counts(tables: PairwiseTables) -> list[np.ndarray]:
    out = [np.zeros(c) for c in tables.schema.C]
    for pattern, n in tables.pattern_counts.items():
        for i, c in enumerate(pattern):
            out[i][c - 1] += n
    return out


def _rational_thresholds(tables: PairwiseTables) -> Thresholds:
    """Rank-scale cuts: category boundaries of the integer codes, affine-fixed.

    Treating the ranks as continuous places the boundary between codes c
    and c+1 at c + 1/2; the unique affine map pinning the first two cuts
    to 0 and 1 turns these into the unit-spaced cuts [0, 1, ..., C-2].
    Mixture-shaped marginals leave this start undistorted, unlike
    pooled-quantile inversion against a single normal. Unobserved
    categories are harmless here: their cells simply carry zero counts.
    """
    return Thresholds(tuple(np.arange(c - 1, dtype=float) for c in tables.schema.C))


def quantile_thresholds(tables: PairwiseTables) -> Thresholds:
    """Inverse-normal pooled marginal quantiles, affinely pinned to (0, 1).

    Exact when the pooled marginal really is one normal; badly stretched
    when it is a separated mixture, hence not used as the default start.
    """
    cuts = []
    for i, counts in enumerate(_marginal_counts(tables)):
        cum = np.cumsum(counts)[:-1] / counts.sum()
        if (cum <= 0.0).any() or (cum >= 1.0).any():
            raise InitializationError(
                f"variable {i} has an unobserved extreme category; cannot place thresholds"
            )
        raw = std_normal_quantile(cum)
        if not (np.diff(raw) > 0.0).all():
            raise InitializationError(f"variable {i} has an unobserved interior category")
        cuts.append((raw - raw[0]) / (raw[1] - raw[0]))
    return Thresholds(tuple(cuts))


def _expand_patterns(tables: PairwiseTables) -> np.ndarray:
    rows = []
    for pattern, n in sorted(tables.pattern_counts.items()):
        rows.append(np.tile(pattern, (n, 1)))
    return np.concatenate(rows, axis=0)


def _latent_midpoints(codes: np.ndarray, thresholds: Thresholds) -> np.ndarray:
    """Map category codes to midpoints of their latent intervals.

    Extreme categories extend half the adjacent gap beyond the outer cut,
    which keeps the pseudo-data on the same scale as the thresholds.
    """
    out = np.empty(codes.shape, dtype=float)
    for i, cut in enumerate(thresholds.cuts):
        gaps = np.diff(cut)
        first_gap = gaps[0] if gaps.size else 1.0
        last_gap = gaps[-1] if gaps.size else 1.0
        mids = np.concatenate(
            ([cut[0] - 0.5 * first_gap], (cut[:-1] + cut[1:]) / 2.0, [cut[-1] + 0.5 * last_gap])
        )
        out[:, i] = mids[codes[:, i] - 1]
    return out


def _seeded_kmeans(data: np.ndarray, G: int, rng: np.random.Generator, restarts: int = 10):
    """Best-inertia k-means over seeded restarts; reseeds on empty clusters."""
    best = None
    for _round in range(10):
        for _ in range(restarts):
            try:
                centroids, labels = kmeans2(
                    data, G, minit="++", seed=rng.integers(0, 2**31 - 1), missing="raise"
                )
            except Exception:
                continue
            if np.bincount(labels, minlength=G).min() < 2:
                continue
            inertia = float(((data - centroids[labels]) ** 2).sum())
            if best is None or inertia < best[0]:
                best = (inertia, centroids, labels)
        if best is not None:
            return best[1], best[2]
    raise InitializationError(f"k-means produced empty clusters for G={G} after retries")


def _gaussian_mixture_moments(data: np.ndarray, G: int, rng: np.random.Generator,
                              restarts: int = 10, iters: int = 200, tol: float = 1e-6):
    """EM for a full-covariance Gaussian mixture on the pseudo-data.

    Seeded k-means labels start each restart; the best final
    log-likelihood wins. Soft responsibilities handle overlapping
    components far better than a hard k-means split, which is what the
    rational start needs on weakly separated data.
    """
    n, P = data.shape
    reg = 1e-6 * np.eye(P)
    best = None
    for _ in range(restarts):
        try:
            _, labels = _seeded_kmeans(data, G, rng, restarts=1)
        except InitializationError:
            continue
        resp = np.zeros((n, G))
        resp[np.arange(n), labels] = 1.0
        loglik_prev = -np.inf
        for _ in range(iters):
            weights = resp.mean(axis=0)
            means = (resp.T @ data) / (weights[:, None] * n)
            covs = np.empty((G, P, P))
            for g in range(G):
                diff = data - means[g]
                covs[g] = (resp[:, g][:, None] * diff).T @ diff / (weights[g] * n) + reg
            log_dens = np.empty((n, G))
            for g in range(G):
                chol = np.linalg.cholesky(covs[g])
                sol = np.linalg.solve(chol, (data - means[g]).T)
                log_dens[:, g] = (
                    np.log(weights[g])
                    - np.log(np.diag(chol)).sum()
                    - 0.5 * (sol**2).sum(axis=0)
                    - 0.5 * P * np.log(2.0 * np.pi)
                )
            peak = log_dens.max(axis=1, keepdims=True)
            dens = np.exp(log_dens - peak)
            total = dens.sum(axis=1, keepdims=True)
            loglik = float((np.log(total) + peak).sum())
            resp = dens / total
            if loglik - loglik_prev < tol * max(1.0, abs(loglik)):
                break
            loglik_prev = loglik
        if weights.min() * n < 2.0:
            continue
        if best is None or loglik > best[0]:
            best = (loglik, weights, means, covs)
    if best is None:
        raise InitializationError(f"Gaussian-mixture start degenerated for G={G}")
    return best[1], best[2], best[3]


def _triangularize(M: np.ndarray, k: int):
    """Orthogonal R making the first k rows of M R lower triangular, diag >= 0."""
    head = M[:k, :]
    q, r = np.linalg.qr(head.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    R = q * signs[None, :]
    out = M @ R
    out[:k] = np.tril(out[:k])  # rotation residue in the structural zeros
    return out, R


def _floor_head_diagonal(M: np.ndarray, k: int, floor: float):
    scale = max(float(np.abs(M).max()), 1.0)
    for i in range(k):
        if M[i, i] < floor * scale:
            M[i, i] = floor * scale
    return M


def initialize(
    tables: PairwiseTables, G: int, Q: int, seed: int = 0, mode: str = "rational",
    cluster: str = "soft",
) -> ScrParameters:
    """Rational or jittered-rational starting point.

    Rational: rank-scale thresholds; a seeded full-covariance Gaussian
    mixture (k-means-seeded EM, 10 restarts) on the latent interval
    midpoints of the ranks; weights from the mixture; V1 spans the top-Q
    eigenvectors of the between-component scatter scaled so the first
    component's informative block is the identity; V2 holds the pooled
    within covariance on the orthogonal complement; component means
    project onto the informative and noise coordinates; a final QR
    rotation restores the triangular patterns. Random mode jitters every
    packed coordinate of the rational point by seeded Gaussian noise
    (scale 0.1 relative), which keeps thresholds sorted and diagonals
    positive by construction. `cluster` picks the moment source: "soft"
    (Gaussian-mixture responsibilities, robust under overlap) or "hard"
    (k-means partitions); the two flavours fail on different samples, so
    the multi-start roster alternates them.
    """
    if mode not in ("rational", "random"):
        raise ValueError(f"initialize: unknown mode {mode!r}")
    if cluster not in ("soft", "hard"):
        raise ValueError(f"initialize: unknown cluster flavour {cluster!r}")
    schema = tables.schema
    _check_identifiable(schema, G, Q)
    P = schema.P
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11CE)))

    thresholds = _rational_thresholds(tables)
    data = _latent_midpoints(_expand_patterns(tables), thresholds)

    if G == 1:
        weights = np.ones(1)
        means = data.mean(axis=0)[None, :]
        covs = np.cov(data.T, ddof=0)[None, :, :]
    elif cluster == "soft":
        weights, means, covs = _gaussian_mixture_moments(data, G, rng)
    else:
        _, labels = _seeded_kmeans(data, G, rng)
        weights = np.bincount(labels, minlength=G) / data.shape[0]
        means = np.stack([data[labels == g].mean(axis=0) for g in range(G)])
        covs = np.stack([np.cov(data[labels == g].T, ddof=0) for g in range(G)])
    covs = covs + 1e-6 * np.eye(P)[None, :, :]

    grand = weights @ means
    if G == 1:
        scatter = covs[0]
    else:
        centered = means - grand
        scatter = centered.T @ (weights[:, None] * centered)
    eigvals, eigvecs = np.linalg.eigh(scatter)
    U = eigvecs[:, ::-1][:, :Q]
    U_perp = eigvecs[:, ::-1][:, Q:]

    L1 = np.linalg.cholesky(U.T @ covs[0] @ U)
    V1 = U @ L1
    L1_inv = np.linalg.inv(L1)
    omegas = [L1_inv @ (U.T @ covs[g] @ U) @ L1_inv.T for g in range(1, G)]

    if Q < P:
        pooled = np.einsum("g,gij->ij", weights, covs)
        V2 = U_perp @ np.linalg.cholesky(U_perp.T @ pooled @ U_perp)
        loadings = np.hstack([V1, V2])
    else:
        V2 = None
        loadings = V1
    coords = np.linalg.solve(loadings, means.T).T  # (G, P)
    eta = coords[:, :Q]
    eta0 = weights @ coords[:, Q:] if Q < P else np.zeros(0)

    V1, R1 = _triangularize(V1, Q)
    _floor_head_diagonal(V1, Q, 1e-4)
    eta = eta @ R1
    omegas = [R1.T @ om @ R1 for om in omegas]
    if V2 is not None:
        V2, R2 = _triangularize(V2, P - Q)
        _floor_head_diagonal(V2, P - Q, 1e-4)
        eta0 = R2.T @ eta0

    T = [upper_cholesky(om + 1e-8 * np.eye(Q)) for om in omegas]
    params = ScrParameters(
        schema=schema, G=G, Q=Q, weights=weights, V1=V1, V2=V2, T=T,
        eta_star=eta, eta0_star=eta0, thresholds=thresholds,
    )
    if mode == "random":
        space = ParameterSpace(schema, G, Q)
        theta = space.pack(params)
        jitter_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0B)))
        theta = theta + 0.1 * np.maximum(1.0, np.abs(theta)) * jitter_rng.standard_normal(
            theta.shape
        )
        params = space.unpack(theta)
    return params


class _MStepObjective:
    """Batched expected-complete-log-likelihood over non-weight coordinates."""

    def __init__(self, space: ParameterSpace, engine: CellProbabilityEngine,
                 tables: PairwiseTables, fd_step: float = 1e-6):
        self.space = space
        self.engine = engine
        self.tables = tables
        self.fd_step = fd_step
        self.n_w = space.G - 1
        self.d = space.dim - self.n_w
        self.pairs = tables.pairs
        self.counts = {p: tables.tables[p].astype(float) for p in self.pairs}
        self.logits = np.zeros(self.n_w)
        self.weighted_z = None
        self.const = 0.0

    def set_state(self, weights: np.ndarray, posteriors: PosteriorTables):
        w = np.asarray(weights, dtype=float)
        self.logits = np.log(w[:-1] / w[-1]) if self.n_w else np.zeros(0)
        self.weighted_z = {
            p: posteriors.z[p] * self.counts[p][None, :, :] for p in self.pairs
        }
        self.const = float(
            sum(self.weighted_z[p].sum(axis=(1, 2)) @ np.log(w) for p in self.pairs)
        )

    def values(self, rest_batch: np.ndarray) -> np.ndarray:
        rest_batch = np.atleast_2d(rest_batch)
        B = rest_batch.shape[0]
        full = np.empty((B, self.space.dim))
        full[:, : self.n_w] = self.logits
        full[:, self.n_w :] = rest_batch
        _, mu, sigma, cuts = self.space.moments_batch(full)
        tensors, bad = self.engine.tensors(mu, sigma, cuts)
        vals = np.full(B, self.const)
        for p, tens in zip(self.pairs, tensors):
            logpi = np.log(np.maximum(tens, PROB_FLOOR))
            vals += np.einsum("gcd,bgcd->b", self.weighted_z[p], logpi)
        vals[bad] = -1e300
        return vals

    def value_and_grad(self, rest: np.ndarray):
        d = self.d
        h = self.fd_step * np.maximum(1.0, np.abs(rest))
        batch = np.tile(rest, (2 * d + 1, 1))
        for k in range(d):
            batch[1 + 2 * k, k] += h[k]
            batch[2 + 2 * k, k] -= h[k]
        vals = self.values(batch)
        grad = (vals[1::2] - vals[2::2]) / (2.0 * h)
        return vals[0], grad


class _PllObjective:
    """Batched pairwise log-likelihood over the full packed vector.

    EM creeps along ridges where weights and the remaining coordinates
    trade off (the pairwise surface is nearly flat there, yet the score
    is far from zero). A direct quasi-Newton pass over everything,
    weights included, walks the ridge in a handful of iterations and
    leaves the fit at an actual stationary point.
    """

    def __init__(self, space: ParameterSpace, engine: CellProbabilityEngine,
                 tables: PairwiseTables, fd_step: float = 1e-6):
        self.space = space
        self.engine = engine
        self.tables = tables
        self.fd_step = fd_step
        self.counts = {p: tables.tables[p].astype(float) for p in tables.pairs}

    def values(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        w, mu, sigma, cuts = self.space.moments_batch(thetas)
        tensors, bad = self.engine.tensors(mu, sigma, cuts)
        vals = np.zeros(thetas.shape[0])
        for p, tens in zip(self.tables.pairs, tensors):
            mix = np.einsum("bg,bgcd->bcd", w, tens)
            np.maximum(mix, PROB_FLOOR, out=mix)
            vals += np.einsum("cd,bcd->b", self.counts[p], np.log(mix))
        vals[bad] = -1e300
        return vals

    def value_and_grad(self, theta: np.ndarray):
        d = theta.size
        h = self.fd_step * np.maximum(1.0, np.abs(theta))
        batch = np.tile(theta, (2 * d + 1, 1))
        for k in range(d):
            batch[1 + 2 * k, k] += h[k]
            batch[2 + 2 * k, k] -= h[k]
        vals = self.values(batch)
        return vals[0], (vals[1::2] - vals[2::2]) / (2.0 * h)


def _polish_fit(space, engine, tables, theta, config):
    """Direct ascent of the pairwise log-likelihood from the EM endpoint."""
    objective = _PllObjective(space, engine, tables)
    base = objective.values(theta[None, :])[0]
    try:
        res = _minimize(
            lambda x: tuple(-v for v in objective.value_and_grad(x)),
            theta,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxfun": config.polish_max_evals,
                "ftol": 1e-12,
                "gtol": config.mstep_gtol,
            },
        )
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        return theta, base, False
    if not np.isfinite(res.fun) or -res.fun < base:
        return theta, base, False
    return np.asarray(res.x), float(-res.fun), bool(res.success)


def _mixture_pll(space, engine, tables, theta) -> float:
    w, mu, sigma, cuts = space.moments_batch(theta[None, :])
    tensors, bad = engine.tensors(mu, sigma, cuts)
    if bad.any():
        return -np.inf
    total = 0.0
    for p, tens in zip(tables.pairs, tensors):
        mix = np.maximum(np.einsum("g,gcd->cd", w[0], tens[0]), PROB_FLOOR)
        total += float((tables.tables[p] * np.log(mix)).sum())
    return total


def _posteriors_from_tensors(weights, tensors, schema, pairs) -> PosteriorTables:
    z = {}
    for p, tens in zip(pairs, tensors):
        joint = weights[:, None, None] * np.maximum(tens, PROB_FLOOR)
        z[p] = joint / joint.sum(axis=0, keepdims=True)
    return PosteriorTables(schema=schema, G=weights.size, z=z)


def em_fit(
    tables: PairwiseTables,
    G: int,
    Q: int,
    start: ScrParameters,
    config: FitConfig | None = None,
) -> FitResult:
    """Pairwise EM from one starting point.

    Alternates the E-step, the closed-form weight update, and a bounded
    quasi-Newton ascent of the expected complete log-likelihood over the
    non-weight packed coordinates; stops once the pairwise log-likelihood
    gain falls below em_tol. An M-step failure ends the run with
    converged=False and the last valid parameters.
    """
    config = config or FitConfig()
    schema = tables.schema
    _check_identifiable(schema, G, Q)
    space = ParameterSpace(schema, G, Q)
    engine = CellProbabilityEngine(schema)
    mstep = _MStepObjective(space, engine, tables)

    theta = space.pack(start)
    n_w = space.G - 1
    pll_prev = _mixture_pll(space, engine, tables, theta)
    if not np.isfinite(pll_prev):
        raise ValueError("em_fit: start has non-finite pairwise log-likelihood")
    trace = [pll_prev]
    converged = False
    failed = False
    iterations = 0

    for _ in range(config.max_em_iters):
        iterations += 1
        w, mu, sigma, cuts = space.moments_batch(theta[None, :])
        tensors, bad = engine.tensors(mu, sigma, cuts)
        posteriors = _posteriors_from_tensors(w[0], [t[0] for t in tensors], schema, tables.pairs)
        weights_new = update_weights(tables, posteriors)

        mstep.set_state(weights_new, posteriors)
        rest0 = theta[n_w:].copy()
        try:
            res = _minimize(
                lambda x: tuple(-v for v in mstep.value_and_grad(x)),
                rest0,
                jac=True,
                method="L-BFGS-B",
                options={
                    "maxfun": config.mstep_max_evals,
                    "ftol": config.mstep_ftol,
                    "gtol": config.mstep_gtol,
                },
            )
            rest_new = res.x if -res.fun >= mstep.values(rest0[None, :])[0] else rest0
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            failed = True
            break

        theta = np.concatenate([mstep.logits, rest_new])
        pll_new = _mixture_pll(space, engine, tables, theta)
        if not np.isfinite(pll_new):
            failed = True
            break
        trace.append(pll_new)
        if pll_new - pll_prev < config.em_tol:
            converged = True
            pll_prev = pll_new
            break
        pll_prev = pll_new

    params = space.unpack(theta)
    pll_final = pairwise_loglik(params, tables)
    return FitResult(
        params=params,
        pll=pll_final,
        trace=np.asarray(trace),
        iterations=iterations,
        converged=converged and not failed,
    )


def _run_single_start(tables, G, Q, config, index):
    seed_seq = np.random.SeedSequence((config.seed, index))
    start_seed = int(seed_seq.generate_state(1)[0])
    mode = "rational" if index <= 1 else "random"
    cluster = "soft" if index % 2 == 0 else "hard"
    start = initialize(tables, G, Q, seed=start_seed, mode=mode, cluster=cluster)
    result = em_fit(tables, G, Q, start, config)
    result.start_index = index
    result.seed = start_seed
    return result


def multi_start_fit(tables: PairwiseTables, G: int, Q: int, config: FitConfig | None = None) -> FitResult:
    """Best-of-n-starts pairwise EM: one rational start plus jittered ones.

    Start seeds derive deterministically from config.seed. Start 0 is the
    soft-cluster rational point, start 1 the hard-cluster one, and later
    starts jitter the two flavours alternately. The winner has maximal
    pairwise log-likelihood, ties broken by lowest start index.
    """
    config = config or FitConfig()
    indices = list(range(config.n_starts))
    results: list[FitResult] = []
    failures = []

    def handle(index, outcome, error):
        if error is None:
            results.append(outcome)
        else:
            failures.append((index, error))

    if config.threads > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            futures = {
                idx: pool.submit(_run_single_start, tables, G, Q, config, idx)
                for idx in indices
            }
            for idx in indices:
                try:
                    handle(idx, futures[idx].result(), None)
                except Exception as exc:  # worker failures become diagnostics
                    handle(idx, None, repr(exc))
    else:
        for idx in indices:
            try:
                handle(idx, _run_single_start(tables, G, Q, config, idx), None)
            except Exception as exc:
                handle(idx, None, repr(exc))

    if not results:
        raise MultiStartError(failures)
    return max(results, key=lambda r: (r.pll, -r.start_index))
