"""Bivariate contingency ingestion and the pairwise-likelihood core.

The pairwise log-likelihood sums, over all variable pairs (i, j) and
observed cells, the log mixture of bivariate cell probabilities. Each
cell probability is a four-corner combination of the bivariate normal
CDF at standardized thresholds, so a full sweep over one pair and one
component touches a (C_i + 1) x (C_j + 1) grid of CDF corners; corners
are shared between neighbouring cells and evaluated once.

`CellProbabilityEngine` evaluates these grids for a whole batch of
parameter vectors in a single vectorized bivariate-CDF call, which is
what makes finite-difference M-steps and scores affordable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr as _ndtr

from .model import (
    ComponentMoments,
    OrdinalSchema,
    ParameterSpace,
    ScrParameters,
    Thresholds,
    derive_moments,
)
from .numerics import bivariate_normal_cdf

PROB_FLOOR = 1e-300
RHO_CLAMP = 1.0 - 1e-9
_TAU_CAP = 37.0  # Phi saturates at double precision beyond this


class IngestionError(ValueError):
    """A data row holds a category outside 1..C_i."""


@dataclass
class PairwiseTables:
    """All bivariate contingency counts plus response-pattern frequencies."""

    schema: OrdinalSchema
    N: int
    tables: dict
    pattern_counts: dict

    @property
    def pairs(self) -> list[tuple[int, int]]:
        P = self.schema.P
        return [(i, j) for i in range(P) for j in range(i + 1, P)]


@dataclass
class PosteriorTables:
    """Per pair and cell, a length-G posterior over components (G axis first)."""

    schema: OrdinalSchema
    G: int
    z: dict


def build_pairwise_tables(rows, freq=None, schema: OrdinalSchema | None = None) -> PairwiseTables:
    """Aggregate 1-based category rows into pair tables and pattern counts.

    `freq` holds positive integer multiplicities for pre-aggregated
    pattern data (one row per distinct pattern).
    """
    rows = np.asarray(rows, dtype=int)
    if rows.ndim != 2:
        raise IngestionError("build_pairwise_tables: rows must be 2-D")
    n_rows, P = rows.shape
    if schema is None:
        schema = OrdinalSchema(tuple(int(c) for c in rows.max(axis=0)))
    if P != schema.P:
        raise IngestionError(f"build_pairwise_tables: rows have {P} columns, schema has {schema.P}")
    if freq is None:
        freq = np.ones(n_rows, dtype=int)
    else:
        freq = np.asarray(freq, dtype=int)
        if freq.shape != (n_rows,) or (freq <= 0).any():
            raise IngestionError("build_pairwise_tables: freq must be positive, one per row")

    for i, C in enumerate(schema.C):
        bad = np.nonzero((rows[:, i] < 1) | (rows[:, i] > C))[0]
        if bad.size:
            raise IngestionError(
                f"row {bad[0]}, column {i}: category {rows[bad[0], i]} outside 1..{C}"
            )

    N = int(freq.sum())
    tables = {}
    for i in range(P):
        for j in range(i + 1, P):
            flat = (rows[:, i] - 1) * schema.C[j] + (rows[:, j] - 1)
            counts = np.bincount(flat, weights=freq, minlength=schema.C[i] * schema.C[j])
            tables[(i, j)] = counts.reshape(schema.C[i], schema.C[j]).astype(int)

    pattern_counts = {}
    uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    sums = np.bincount(inverse, weights=freq)
    for pat, n in zip(uniq, sums):
        pattern_counts[tuple(int(c) for c in pat)] = int(n)
    return PairwiseTables(schema=schema, N=N, tables=tables, pattern_counts=pattern_counts)


def clamp_correlation(rho):
    """Keep optimizer iterates off the degenerate |rho| = 1 boundary."""
    return np.clip(rho, -RHO_CLAMP, RHO_CLAMP)


def standardized_thresholds(
    moments: list[ComponentMoments], thresholds: Thresholds, i: int, g: int
) -> np.ndarray:
    """tau = (gamma - mu_g[i]) / sd_g[i] over the finite cuts of variable i."""
    m = moments[g]
    return (thresholds.cuts[i] - m.mean[i]) / m.sd[i]


def pair_cell_probability(
    moments: list[ComponentMoments],
    thresholds: Thresholds,
    i: int,
    j: int,
    c_i: int,
    c_j: int,
    g: int,
) -> float:
    """Four-corner bivariate-CDF combination for cell (c_i, c_j), 1-based."""
    m = moments[g]
    rho = float(clamp_correlation(m.correlation[i, j]))
    tau_i = (thresholds.with_infinities(i) - m.mean[i]) / m.sd[i]
    tau_j = (thresholds.with_infinities(j) - m.mean[j]) / m.sd[j]
    a_hi, a_lo = tau_i[c_i], tau_i[c_i - 1]
    b_hi, b_lo = tau_j[c_j], tau_j[c_j - 1]
    val = (
        bivariate_normal_cdf(a_hi, b_hi, rho)
        - bivariate_normal_cdf(a_hi, b_lo, rho)
        - bivariate_normal_cdf(a_lo, b_hi, rho)
        + bivariate_normal_cdf(a_lo, b_lo, rho)
    )
    return float(min(max(val, 0.0), 1.0))


class CellProbabilityEngine:
    """Batched (pair, component) cell-probability sweeps for one schema.

    tensors(mu, sigma, cuts) maps a (B, G, ...) moments batch to one
    (B, G, C_i, C_j) probability tensor per pair, evaluating every
    interior CDF corner of every pair in a single vectorized call.
    Non-finite moment rows are flagged and given placeholder values so a
    wild optimizer step degrades into a penalty instead of a crash.
    """

    def __init__(self, schema: OrdinalSchema):
        self.schema = schema
        P = schema.P
        self.pairs = [(i, j) for i in range(P) for j in range(i + 1, P)]

    def tensors(self, mu, sigma, cuts):
        """Cell probabilities per pair; returns (list of tensors, bad-row mask)."""
        schema = self.schema
        B, G, P = mu.shape
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return self._tensors_core(mu, sigma, cuts)

    def _tensors_core(self, mu, sigma, cuts):
        schema = self.schema
        B, G, P = mu.shape
        var = np.einsum("bgii->bgi", sigma)
        bad = (
            ~np.isfinite(mu).all(axis=(1, 2))
            | ~np.isfinite(sigma).all(axis=(1, 2, 3))
            | (var <= 0.0).any(axis=(1, 2))
        )
        for c in cuts:
            bad |= ~np.isfinite(c).all(axis=1)
        sd = np.sqrt(np.where(var > 0.0, var, 1.0))

        # standardized finite thresholds and their univariate CDFs
        taus, phis = [], []
        for i in range(P):
            t = (cuts[i][:, None, :] - mu[:, :, i, None]) / sd[:, :, i, None]
            t = np.clip(np.nan_to_num(t, nan=0.0), -_TAU_CAP, _TAU_CAP)
            taus.append(t)  # (B, G, C_i - 1)
            phis.append(_ndtr(t))

        # one flat bivariate-CDF batch over all interior corners
        sizes = []
        a_parts, b_parts, r_parts = [], [], []
        for (i, j) in self.pairs:
            ni, nj = schema.C[i] - 1, schema.C[j] - 1
            rho = clamp_correlation(
                np.nan_to_num(sigma[:, :, i, j] / (sd[:, :, i] * sd[:, :, j]), nan=0.0)
            )
            a_parts.append(np.broadcast_to(taus[i][:, :, :, None], (B, G, ni, nj)).ravel())
            b_parts.append(np.broadcast_to(taus[j][:, :, None, :], (B, G, ni, nj)).ravel())
            r_parts.append(np.broadcast_to(rho[:, :, None, None], (B, G, ni, nj)).ravel())
            sizes.append(B * G * ni * nj)
        flat = bivariate_normal_cdf(
            np.concatenate(a_parts), np.concatenate(b_parts), np.concatenate(r_parts)
        )

        tensors = []
        offset = 0
        for (i, j), size in zip(self.pairs, sizes):
            ni, nj = schema.C[i] - 1, schema.C[j] - 1
            corners = np.zeros((B, G, ni + 2, nj + 2))
            corners[:, :, 1:-1, 1:-1] = flat[offset : offset + size].reshape(B, G, ni, nj)
            offset += size
            corners[:, :, -1, -1] = 1.0
            corners[:, :, -1, 1:-1] = phis[j]
            corners[:, :, 1:-1, -1] = phis[i]
            cells = np.diff(np.diff(corners, axis=-2), axis=-1)
            tensors.append(np.clip(cells, 0.0, 1.0))
        return tensors, bad


def cell_probability_tensors(params: ScrParameters):
    """Per-pair (G, C_i, C_j) cell probabilities for a single parameter set."""
    space = ParameterSpace(params.schema, params.G, params.Q)
    theta = space.pack(params)
    w, mu, sigma, cuts = space.moments_batch(theta[None, :])
    tensors, bad = CellProbabilityEngine(params.schema).tensors(mu, sigma, cuts)
    if bad.any():
        raise FloatingPointError("cell_probability_tensors: non-finite moments")
    return [t[0] for t in tensors]


def _mixture_loglik_terms(weights, tensors, tables: PairwiseTables, pairs):
    """Per-batch-row pairwise log-likelihood given cell tensors."""
    B = weights.shape[0]
    total = np.zeros(B)
    for (i, j), tens in zip(pairs, tensors):
        mix = np.einsum("bg,bgcd->bcd", weights, tens)
        np.maximum(mix, PROB_FLOOR, out=mix)
        total += np.einsum("cd,bcd->b", tables.tables[(i, j)].astype(float), np.log(mix))
    return total


def pairwise_loglik(params: ScrParameters, tables: PairwiseTables) -> float:
    """Sum over pairs and cells of n log(sum_g p_g pi_g)."""
    if params.schema != tables.schema:
        raise ValueError("pairwise_loglik: schema mismatch")
    tensors = cell_probability_tensors(params)
    total = 0.0
    for (i, j), tens in zip(tables.pairs, tensors):
        mix = np.maximum(params.weights @ tens.reshape(params.G, -1), PROB_FLOOR)
        total += float(
            tables.tables[(i, j)].astype(float).ravel() @ np.log(mix)
        )
    return total


def estep(params: ScrParameters, tables: PairwiseTables) -> PosteriorTables:
    """Posterior component memberships per pair and cell."""
    tensors = cell_probability_tensors(params)
    z = {}
    for (i, j), tens in zip(tables.pairs, tensors):
        joint = params.weights[:, None, None] * np.maximum(tens, PROB_FLOOR)
        z[(i, j)] = joint / joint.sum(axis=0, keepdims=True)
    return PosteriorTables(schema=tables.schema, G=params.G, z=z)


def expected_complete_loglik(
    params: ScrParameters, tables: PairwiseTables, posteriors: PosteriorTables
) -> float:
    """E-step-weighted complete-data pairwise log-likelihood (M-step objective)."""
    tensors = cell_probability_tensors(params)
    logw = np.log(params.weights)
    total = 0.0
    for (i, j), tens in zip(tables.pairs, tensors):
        n = tables.tables[(i, j)].astype(float)
        zhat = posteriors.z[(i, j)]
        logpi = np.log(np.maximum(tens, PROB_FLOOR))
        total += float(np.einsum("cd,gcd,gcd->", n, zhat, logpi))
        total += float(np.einsum("cd,gcd,g->", n, zhat, logw))
    return total


def update_weights(tables: PairwiseTables, posteriors: PosteriorTables) -> np.ndarray:
    """Closed-form weight update, normalized over the component sums.

    The per-component sums aggregate all pairs, so their total is
    N * P(P-1)/2; dividing by that total (rather than a literal N)
    returns a point on the simplex.
    """
    S = np.zeros(posteriors.G)
    for (i, j), zhat in posteriors.z.items():
        S += np.einsum("gcd,cd->g", zhat, tables.tables[(i, j)].astype(float))
    return S / S.sum()
