"""Joint-posterior reconstruction, hard assignment, ARI, and the loss measure.

The pairwise EM only yields bivariate posteriors; the joint posterior
over full response patterns is reconstructed by iterative proportional
fitting of a (C_1 x ... x C_P x G) table against every pairwise target
p_g * pi_(ij)(c_i, c_j; g), starting from the model's univariate
product form (exact under independence, and exact for P = 2 where the
single pair already is the joint).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.special import ndtr as _ndtr

from .model import ScrParameters, derive_moments
from .numerics import MarginTargets, ipf_fit
from .pairwise import PROB_FLOOR, PairwiseTables, cell_probability_tensors

JOINT_CELL_GUARD = 10**7


class CapacityError(RuntimeError):
    """Joint table too large to materialize."""


@dataclass
class JointPosterior:
    """Per observed response pattern, a posterior over components."""

    posteriors: dict
    ipf_discrepancy: float
    sweeps: int
    G: int

    def lookup(self, pattern) -> np.ndarray:
        return self.posteriors[tuple(int(c) for c in pattern)]


@dataclass
class PartitionMatrix:
    """N x G binary assignment matrix, exactly one 1 per row."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=int)
        if m.ndim != 2 or not np.isin(m, (0, 1)).all() or (m.sum(axis=1) != 1).any():
            raise ValueError("PartitionMatrix: need one 1 per row, zeros elsewhere")
        self.matrix = m

    @classmethod
    def from_labels(cls, labels, G: int | None = None) -> "PartitionMatrix":
        labels = np.asarray(labels, dtype=int)
        G = G if G is not None else int(labels.max()) + 1
        m = np.zeros((labels.size, G), dtype=int)
        m[np.arange(labels.size), labels] = 1
        return cls(m)

    @property
    def labels(self) -> np.ndarray:
        return self.matrix.argmax(axis=1)

    @property
    def N(self) -> int:
        return self.matrix.shape[0]


def _univariate_category_probs(params: ScrParameters):
    """Pr(x_i = c | g) per variable, from standardized thresholds."""
    moments = derive_moments(params)
    out = []
    for i in range(params.schema.P):
        cats = np.empty((params.G, params.schema.C[i]))
        for g, m in enumerate(moments):
            tau = (params.thresholds.with_infinities(i) - m.mean[i]) / m.sd[i]
            cats[g] = np.diff(_ndtr(tau))
        out.append(np.clip(cats, PROB_FLOOR, 1.0))
    return out


def pattern_posterior_fallback(params: ScrParameters, tables: PairwiseTables) -> JointPosterior:
    """Per-pattern posterior from the product of pairwise posteriors.

    Each variable appears in P-1 pairs, so the product of pairwise
    posteriors over-counts the prior; the 1/(P-1) exponent tempers it.
    Used when the joint table exceeds the capacity guard.
    """
    tensors = cell_probability_tensors(params)
    P = params.schema.P
    logw = np.log(params.weights)
    posteriors = {}
    for pattern in tables.pattern_counts:
        idx = np.asarray(pattern) - 1
        acc = np.zeros(params.G)
        for (i, j), tens in zip(tables.pairs, tensors):
            cell = logw + np.log(np.maximum(tens[:, idx[i], idx[j]], PROB_FLOOR))
            acc += cell - logsumexp(cell)
        acc /= P - 1
        acc -= acc.max()
        vec = np.exp(acc)
        posteriors[pattern] = vec / vec.sum()
    return JointPosterior(posteriors=posteriors, ipf_discrepancy=np.nan, sweeps=0, G=params.G)


def ipf_joint_posterior(
    params: ScrParameters,
    tables: PairwiseTables,
    tol: float = 1e-6,
    max_sweeps: int = 500,
) -> JointPosterior:
    """Joint posteriors via IPF on the (categories x component) table.

    The table starts at the model's product form p_g * prod_i Pr(x_i|g)
    and is rescaled until every pairwise margin matches the model's
    p_g * pi_(ij)(c_i, c_j; g). Composite-likelihood margins need not be
    mutually consistent, so the achieved discrepancy is reported.
    """
    schema = params.schema
    n_cells = schema.pattern_count * params.G
    if n_cells > JOINT_CELL_GUARD:
        raise CapacityError(
            f"joint table has {n_cells} cells (> {JOINT_CELL_GUARD}); "
            "use pattern_posterior_fallback (normalized product of pairwise "
            "posteriors with exponent 1/(P-1))"
        )
    P = schema.P
    univ = _univariate_category_probs(params)
    table = params.weights.reshape((1,) * P + (params.G,)).copy()
    table = np.broadcast_to(table, schema.C + (params.G,)).copy()
    for i in range(P):
        shape = [1] * (P + 1)
        shape[i] = schema.C[i]
        shape[-1] = params.G
        table *= np.moveaxis(univ[i], 0, -1).reshape(shape)

    tensors = cell_probability_tensors(params)
    axes, targets = [], []
    for (i, j), tens in zip(tables.pairs, tensors):
        target = np.moveaxis(params.weights[:, None, None] * tens, 0, -1)
        axes.append((i, j, P))
        targets.append(target)
    fitted, disc, sweeps = ipf_fit(table, MarginTargets(axes=axes, tables=targets), tol, max_sweeps)

    posteriors = {}
    for pattern in tables.pattern_counts:
        idx = tuple(int(c) - 1 for c in pattern)
        vec = np.maximum(fitted[idx], PROB_FLOOR)
        posteriors[pattern] = vec / vec.sum()
    return JointPosterior(posteriors=posteriors, ipf_discrepancy=disc, sweeps=sweeps, G=params.G)


def hard_assign(post: JointPosterior, rows) -> PartitionMatrix:
    """Argmax assignment per row; ties break toward the lowest component."""
    rows = np.asarray(rows, dtype=int)
    labels = np.empty(rows.shape[0], dtype=int)
    for n, row in enumerate(rows):
        labels[n] = int(np.argmax(post.lookup(row)))
    return PartitionMatrix.from_labels(labels, post.G)


def ari(W: PartitionMatrix, W_hat: PartitionMatrix) -> float:
    """Adjusted Rand index via the pair-counting contingency formula."""
    if W.N != W_hat.N:
        raise ValueError("ari: partitions must cover the same observations")
    N = W.N
    if N < 2:
        raise ValueError("ari: undefined for fewer than two observations")
    contingency = W.matrix.T @ W_hat.matrix
    comb = lambda x: x * (x - 1) / 2.0
    same_both = comb(contingency).sum()
    same_w = comb(contingency.sum(axis=1)).sum()
    same_what = comb(contingency.sum(axis=0)).sum()
    total = comb(N)
    expected = same_w * same_what / total
    max_index = 0.5 * (same_w + same_what)
    if max_index == expected:  # both partitions degenerate
        return 1.0
    return float((same_both - expected) / (max_index - expected))


def loss_measure(Z_true: np.ndarray, Z_hat: np.ndarray) -> float:
    """Permutation-minimized quadratic mean posterior difference, in [0, 1]."""
    Z_true = np.asarray(Z_true, dtype=float)
    Z_hat = np.asarray(Z_hat, dtype=float)
    if Z_true.shape != Z_hat.shape:
        raise ValueError("loss_measure: shape mismatch")
    N, G = Z_true.shape
    if G > 8:
        raise ValueError("loss_measure: G > 8 would enumerate too many permutations")
    best = np.inf
    for perm in itertools.permutations(range(G)):
        sq = float(((Z_hat[:, perm] - Z_true) ** 2).sum())
        best = min(best, sq)
    return float(np.sqrt(best / (N * G)))
