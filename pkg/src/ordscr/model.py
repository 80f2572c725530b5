"""Identified model parametrization and derived quantities.

The latent P-variate Gaussian mixture is stored in its identified form:
component 1 has identity covariance on the Q informative second-order
coordinates, the noise coordinates have identity covariance and a
shared mean, and the loading blocks V1 (P x Q) and V2 (P x (P-Q))
carry lower-triangular patterns with positive diagonals in their first
Q and P-Q rows. The first two thresholds of every variable are pinned
at 0 and 1.

`ParameterSpace` maps this structure onto an unconstrained real vector
(logits for weights, logs for positive diagonals and threshold
increments) so the M-step can run an off-the-shelf quasi-Newton
maximizer. The batched `moments_batch` path turns a whole matrix of
packed vectors into component moments at once; the EM and the
finite-difference scores lean on it heavily.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class LayoutError(ValueError):
    """Packed vector length or segment structure does not match the space."""


@dataclass(frozen=True)
class OrdinalSchema:
    """Variable count, per-variable category counts, pattern count."""

    C: tuple[int, ...]

    def __post_init__(self):
        C = tuple(int(c) for c in self.C)
        if len(C) < 2:
            raise ValueError("OrdinalSchema: need P >= 2 variables")
        if any(c < 3 for c in C):
            raise ValueError("OrdinalSchema: every variable needs >= 3 categories")
        object.__setattr__(self, "C", C)

    @property
    def P(self) -> int:
        return len(self.C)

    @property
    def pattern_count(self) -> int:
        return int(np.prod(self.C))


@dataclass(frozen=True)
class Thresholds:
    """Per-variable strictly increasing finite cut points.

    cuts[i] has length C_i - 1 with cuts[i][0] == 0 and cuts[i][1] == 1
    exactly (identification); -inf and +inf endpoints are implicit.
    """

    cuts: tuple[np.ndarray, ...]

    def __post_init__(self):
        fixed = []
        for i, c in enumerate(self.cuts):
            arr = np.asarray(c, dtype=float)
            if arr.ndim != 1 or arr.size < 2:
                raise ValueError(f"Thresholds: variable {i} needs >= 2 cut points")
            if arr[0] != 0.0 or arr[1] != 1.0:
                raise ValueError(f"Thresholds: variable {i} must have first cuts 0 and 1")
            if not (np.diff(arr) > 0.0).all():
                raise ValueError(f"Thresholds: variable {i} cuts must increase strictly")
            fixed.append(arr)
        object.__setattr__(self, "cuts", tuple(fixed))

    def with_infinities(self, i: int) -> np.ndarray:
        """All C_i + 1 integration limits of variable i, including +/-inf."""
        return np.concatenate(([-np.inf], self.cuts[i], [np.inf]))


@dataclass
class ScrParameters:
    """Identified free parameters of the mixture."""

    schema: OrdinalSchema
    G: int
    Q: int
    weights: np.ndarray            # (G,), positive, sums to 1
    V1: np.ndarray                 # (P, Q), first Q rows lower triangular, diag > 0
    V2: np.ndarray | None          # (P, P-Q), same pattern; None when Q == P
    T: list[np.ndarray]            # per component 2..G: (Q, Q) upper triangular, diag > 0
    eta_star: np.ndarray           # (G, Q)
    eta0_star: np.ndarray          # (P-Q,)
    thresholds: Thresholds

    def __post_init__(self):
        P, Q, G = self.schema.P, self.Q, self.G
        if not 1 <= Q <= P:
            raise ValueError("ScrParameters: need 1 <= Q <= P")
        if G < 1:
            raise ValueError("ScrParameters: need G >= 1")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (G,) or (self.weights <= 0).any():
            raise ValueError("ScrParameters: weights must be positive, length G")
        if abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("ScrParameters: weights must sum to 1")
        self.V1 = np.asarray(self.V1, dtype=float)
        if self.V1.shape != (P, Q):
            raise ValueError("ScrParameters: V1 must be P x Q")
        _check_block_triangular(self.V1, Q, "V1")
        if Q == P:
            if self.V2 is not None and np.asarray(self.V2).size:
                raise ValueError("ScrParameters: V2 must be absent when Q == P")
            self.V2 = None
            self.eta0_star = np.zeros(0)
        else:
            self.V2 = np.asarray(self.V2, dtype=float)
            if self.V2.shape != (P, P - Q):
                raise ValueError("ScrParameters: V2 must be P x (P-Q)")
            _check_block_triangular(self.V2, P - Q, "V2")
            self.eta0_star = np.asarray(self.eta0_star, dtype=float).reshape(P - Q)
        self.T = [np.asarray(t, dtype=float) for t in self.T]
        if len(self.T) != G - 1:
            raise ValueError("ScrParameters: need G-1 Cholesky factors (component 1 fixed)")
        for g, t in enumerate(self.T, start=2):
            if t.shape != (Q, Q):
                raise ValueError(f"ScrParameters: T for component {g} must be Q x Q")
            if not np.array_equal(t, np.triu(t)):
                raise ValueError(f"ScrParameters: T for component {g} must be upper triangular")
            if (np.diag(t) <= 0).any():
                raise ValueError(f"ScrParameters: T for component {g} needs positive diagonal")
        self.eta_star = np.asarray(self.eta_star, dtype=float).reshape(G, Q)

    @property
    def P(self) -> int:
        return self.schema.P


def _check_block_triangular(M: np.ndarray, k: int, name: str):
    """First k rows lower triangular, nonnegative diagonal.

    Zero diagonals sit on the boundary of the identified set (natural
    generators such as separated-noise constructions live there); the
    packed space is strictly interior, so pack() rejects them.
    """
    head = M[:k, :]
    if not np.array_equal(head, np.tril(head)):
        raise ValueError(f"ScrParameters: upper triangle of the first rows of {name} must be 0")
    if (np.diag(head) < 0).any():
        raise ValueError(f"ScrParameters: {name} needs a nonnegative leading diagonal")


@dataclass
class ComponentMoments:
    """Mean, covariance, correlations, and standard deviations of one component."""

    mean: np.ndarray
    covariance: np.ndarray
    correlation: np.ndarray
    sd: np.ndarray


def upper_cholesky(M: np.ndarray) -> np.ndarray:
    """Upper-triangular T with T T' = M (M symmetric positive definite)."""
    flipped = np.asarray(M, dtype=float)[::-1, ::-1]
    return np.linalg.cholesky(flipped)[::-1, ::-1]


def omega_matrices(params: ScrParameters) -> np.ndarray:
    """Informative-block covariances per component, (G, Q, Q); identity for g=1."""
    G, Q = params.G, params.Q
    omega = np.empty((G, Q, Q))
    omega[0] = np.eye(Q)
    for g in range(1, G):
        t = params.T[g - 1]
        omega[g] = t @ t.T
    return omega


def derive_moments(params: ScrParameters) -> list[ComponentMoments]:
    """Component means and covariances implied by the identified blocks."""
    omega = omega_matrices(params)
    noise = params.V2 @ params.V2.T if params.V2 is not None else 0.0
    noise_mean = params.V2 @ params.eta0_star if params.V2 is not None else 0.0
    out = []
    for g in range(params.G):
        mean = params.V1 @ params.eta_star[g] + noise_mean
        cov = params.V1 @ omega[g] @ params.V1.T + noise
        sd = np.sqrt(np.diag(cov))
        corr = cov / np.outer(sd, sd)
        out.append(ComponentMoments(mean, cov, corr, sd))
    return out


def count_parameters(P: int, Q: int, G: int, C: Sequence[int]):
    """Free-parameter count, pairwise-identifiability bound, and the flag.

    The count adds weights, the two loading blocks, the non-reference
    informative covariances, the component and noise means, and the free
    thresholds. The bound is the parameter count of a log-linear model
    with all two-factor interactions; count <= bound is the necessary
    identification condition.
    """
    C = [int(c) for c in C]
    if not 1 <= Q <= P or len(C) != P:
        raise ValueError("count_parameters: need 1 <= Q <= P and len(C) == P")
    if any(c < 3 for c in C):
        raise ValueError("count_parameters: every variable needs >= 3 categories")
    count = (
        (G - 1)
        + Q * (Q + 1) // 2 + Q * (P - Q)
        + (G - 1) * Q * (Q + 1) // 2
        + (P - Q) * (P - Q + 1) // 2 + Q * (P - Q)
        + G * Q
        + (P - Q)
        + sum(C) - 3 * P
    )
    bound = sum(c - 1 for c in C) + sum(
        (C[i] - 1) * (C[j] - 1) for i in range(P) for j in range(i + 1, P)
    )
    return count, bound, count <= bound


def first_second_order_correlation(params: ScrParameters) -> np.ndarray:
    """Correlations between observed-scale latents and second-order latents.

    Rows index the P first-order variables, columns the Q informative
    followed by the P-Q noise coordinates. The second-order covariance
    mixes the within-component covariance with the between-component
    scatter of the informative means; noise coordinates are standard.
    """
    P, Q, G = params.P, params.Q, params.G
    omega = omega_matrices(params)
    p = params.weights
    eta_bar = p @ params.eta_star
    centered = params.eta_star - eta_bar
    informative = np.einsum("g,gij->ij", p, omega) + centered.T @ (p[:, None] * centered)
    cov_second = np.zeros((P, P))
    cov_second[:Q, :Q] = informative
    if Q < P:
        cov_second[Q:, Q:] = np.eye(P - Q)
    loadings = params.V1 if params.V2 is None else np.hstack([params.V1, params.V2])
    cross = loadings @ cov_second
    var_y = np.diag(loadings @ cov_second @ loadings.T)
    return cross / np.sqrt(np.outer(var_y, np.diag(cov_second)))


class ParameterSpace:
    """Bijection between ScrParameters and an unconstrained packed vector.

    Segment order: weight logits (vs the last component), V1 free
    entries, V2 free entries, T entries per component, eta_star row by
    row, eta0_star, then per-variable threshold log-increments beyond
    the two pinned cuts. Positive diagonals are log-encoded, so the
    round trip is exact to floating point.
    """

    def __init__(self, schema: OrdinalSchema, G: int, Q: int):
        P = schema.P
        if not 1 <= Q <= P:
            raise ValueError("ParameterSpace: need 1 <= Q <= P")
        if G < 1:
            raise ValueError("ParameterSpace: need G >= 1")
        self.schema, self.G, self.Q = schema, G, Q

        def block_indices(k, ncols):
            rows, cols, logmask = [], [], []
            for i in range(k):
                for j in range(i + 1):
                    rows.append(i)
                    cols.append(j)
                    logmask.append(i == j)
            for i in range(k, P):
                for j in range(ncols):
                    rows.append(i)
                    cols.append(j)
                    logmask.append(False)
            return np.asarray(rows), np.asarray(cols), np.asarray(logmask, dtype=bool)

        self.v1_rows, self.v1_cols, self.v1_log = block_indices(Q, Q)
        if Q < P:
            self.v2_rows, self.v2_cols, self.v2_log = block_indices(P - Q, P - Q)
        else:
            self.v2_rows = self.v2_cols = np.zeros(0, dtype=int)
            self.v2_log = np.zeros(0, dtype=bool)
        t_comp, t_rows, t_cols, t_log = [], [], [], []
        for g in range(G - 1):
            for i in range(Q):
                for j in range(i, Q):
                    t_comp.append(g)
                    t_rows.append(i)
                    t_cols.append(j)
                    t_log.append(i == j)
        self.t_comp = np.asarray(t_comp, dtype=int)
        self.t_rows = np.asarray(t_rows, dtype=int)
        self.t_cols = np.asarray(t_cols, dtype=int)
        self.t_log = np.asarray(t_log, dtype=bool)

        sizes = [
            G - 1,
            self.v1_rows.size,
            self.v2_rows.size,
            self.t_comp.size,
            G * Q,
            P - Q,
            sum(c - 3 for c in schema.C),
        ]
        edges = np.concatenate(([0], np.cumsum(sizes)))
        (self.s_w, self.s_v1, self.s_v2, self.s_t, self.s_eta, self.s_eta0,
         self.s_thr) = (slice(edges[k], edges[k + 1]) for k in range(7))
        self.dim = int(edges[-1])
        thr_sizes = [c - 3 for c in schema.C]
        thr_edges = np.concatenate(([0], np.cumsum(thr_sizes))) + edges[5 + 1]
        self.thr_slices = [slice(thr_edges[i], thr_edges[i + 1]) for i in range(P)]

    # ---- scalar pack / unpack -------------------------------------------

    def pack(self, params: ScrParameters) -> np.ndarray:
        if (params.G, params.Q, params.schema) != (self.G, self.Q, self.schema):
            raise LayoutError("pack: parameters belong to a different space")
        heads = [np.diag(params.V1[: self.Q])]
        if params.V2 is not None:
            heads.append(np.diag(params.V2[: self.schema.P - self.Q]))
        if any((h <= 0).any() for h in heads):
            raise LayoutError("pack: V1/V2 leading diagonals must be strictly positive")
        theta = np.empty(self.dim)
        if self.G > 1:
            theta[self.s_w] = np.log(params.weights[:-1] / params.weights[-1])
        v1 = params.V1[self.v1_rows, self.v1_cols].copy()
        v1[self.v1_log] = np.log(v1[self.v1_log])
        theta[self.s_v1] = v1
        if params.V2 is not None:
            v2 = params.V2[self.v2_rows, self.v2_cols].copy()
            v2[self.v2_log] = np.log(v2[self.v2_log])
            theta[self.s_v2] = v2
        if self.G > 1:
            t_stack = np.stack(params.T)
            tv = t_stack[self.t_comp, self.t_rows, self.t_cols].copy()
            tv[self.t_log] = np.log(tv[self.t_log])
            theta[self.s_t] = tv
        theta[self.s_eta] = params.eta_star.ravel()
        theta[self.s_eta0] = params.eta0_star
        for i, sl in enumerate(self.thr_slices):
            theta[sl] = np.log(np.diff(params.thresholds.cuts[i][1:]))
        return theta

    def unpack(self, theta: np.ndarray) -> ScrParameters:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise LayoutError(f"unpack: expected length {self.dim}, got {theta.shape}")
        P, Q, G = self.schema.P, self.Q, self.G
        logits = np.concatenate([theta[self.s_w], [0.0]])
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()

        V1 = np.zeros((P, Q))
        vals = theta[self.s_v1].copy()
        vals[self.v1_log] = np.exp(vals[self.v1_log])
        V1[self.v1_rows, self.v1_cols] = vals
        if Q < P:
            V2 = np.zeros((P, P - Q))
            vals = theta[self.s_v2].copy()
            vals[self.v2_log] = np.exp(vals[self.v2_log])
            V2[self.v2_rows, self.v2_cols] = vals
        else:
            V2 = None
        t_stack = np.zeros((G - 1, Q, Q))
        if G > 1:
            vals = theta[self.s_t].copy()
            vals[self.t_log] = np.exp(vals[self.t_log])
            t_stack[self.t_comp, self.t_rows, self.t_cols] = vals
        T = list(t_stack)
        eta = theta[self.s_eta].reshape(G, Q)
        eta0 = theta[self.s_eta0].copy()
        cuts = []
        for i, sl in enumerate(self.thr_slices):
            incs = np.exp(theta[sl])
            cuts.append(np.concatenate(([0.0, 1.0], 1.0 + np.cumsum(incs))))
        return ScrParameters(
            schema=self.schema, G=G, Q=Q, weights=w, V1=V1, V2=V2, T=T,
            eta_star=eta, eta0_star=eta0, thresholds=Thresholds(tuple(cuts)),
        )

    # ---- batched moments -------------------------------------------------

    def moments_batch(self, thetas: np.ndarray):
        """Weights, means, covariances, thresholds for a (B, dim) batch.

        Returns (weights (B,G), mu (B,G,P), Sigma (B,G,P,P),
        cuts: list over variables of (B, C_i-1)).
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.dim:
            raise LayoutError(f"moments_batch: expected width {self.dim}")
        with np.errstate(over="ignore"):
            return self._moments_batch_core(thetas)

    def _moments_batch_core(self, thetas):
        B = thetas.shape[0]
        P, Q, G = self.schema.P, self.Q, self.G

        logits = np.concatenate([thetas[:, self.s_w], np.zeros((B, 1))], axis=1)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)

        V1 = np.zeros((B, P, Q))
        vals = thetas[:, self.s_v1].copy()
        vals[:, self.v1_log] = np.exp(vals[:, self.v1_log])
        V1[:, self.v1_rows, self.v1_cols] = vals
        omega = np.empty((B, G, Q, Q))
        omega[:, 0] = np.eye(Q)
        if G > 1:
            t_stack = np.zeros((B, G - 1, Q, Q))
            vals = thetas[:, self.s_t].copy()
            vals[:, self.t_log] = np.exp(vals[:, self.t_log])
            t_stack[:, self.t_comp, self.t_rows, self.t_cols] = vals
            omega[:, 1:] = np.einsum("bgij,bgkj->bgik", t_stack, t_stack)

        eta = thetas[:, self.s_eta].reshape(B, G, Q)
        mu = np.einsum("bpq,bgq->bgp", V1, eta)
        v1o = np.einsum("bpq,bgqr->bgpr", V1, omega)
        sigma = np.einsum("bgpr,bsr->bgps", v1o, V1)
        if Q < P:
            V2 = np.zeros((B, P, P - Q))
            vals = thetas[:, self.s_v2].copy()
            vals[:, self.v2_log] = np.exp(vals[:, self.v2_log])
            V2[:, self.v2_rows, self.v2_cols] = vals
            mu += np.einsum("bpr,br->bp", V2, thetas[:, self.s_eta0])[:, None, :]
            sigma += np.einsum("bpr,bsr->bps", V2, V2)[:, None, :, :]

        cuts = []
        for i, sl in enumerate(self.thr_slices):
            incs = np.exp(thetas[:, sl])
            base = np.tile([0.0, 1.0], (B, 1))
            cuts.append(np.concatenate([base, 1.0 + np.cumsum(incs, axis=1)], axis=1))
        return w, mu, sigma, cuts


@dataclass
class PackedVector:
    """Unconstrained coordinates plus the layout that interprets them."""

    theta: np.ndarray
    space: ParameterSpace


def pack(params: ScrParameters) -> PackedVector:
    space = ParameterSpace(params.schema, params.G, params.Q)
    return PackedVector(space.pack(params), space)


def unpack(theta: np.ndarray, schema: OrdinalSchema, G: int, Q: int) -> ScrParameters:
    return ParameterSpace(schema, G, Q).unpack(theta)


# ---- JSON serialization ---------------------------------------------------

def params_to_dict(params: ScrParameters) -> dict:
    return {
        "schema": {"P": params.schema.P, "C": list(params.schema.C)},
        "G": params.G,
        "Q": params.Q,
        "weights": params.weights.tolist(),
        "V1": params.V1.tolist(),
        "V2": params.V2.tolist() if params.V2 is not None else None,
        "T": [t.tolist() for t in params.T],
        "eta_star": params.eta_star.tolist(),
        "eta0_star": params.eta0_star.tolist(),
        "thresholds": [c.tolist() for c in params.thresholds.cuts],
    }


def params_from_dict(data: dict) -> ScrParameters:
    schema = OrdinalSchema(tuple(data["schema"]["C"]))
    v2 = data.get("V2")
    return ScrParameters(
        schema=schema,
        G=int(data["G"]),
        Q=int(data["Q"]),
        weights=np.asarray(data["weights"], dtype=float),
        V1=np.asarray(data["V1"], dtype=float),
        V2=np.asarray(v2, dtype=float) if v2 is not None else None,
        T=[np.asarray(t, dtype=float) for t in data["T"]],
        eta_star=np.asarray(data["eta_star"], dtype=float),
        eta0_star=np.asarray(data["eta0_star"], dtype=float),
        thresholds=Thresholds(tuple(np.asarray(c, dtype=float) for c in data["thresholds"])),
    )


def moments_to_dict(moments: list[ComponentMoments]) -> list[dict]:
    return [
        {
            "mean": m.mean.tolist(),
            "covariance": m.covariance.tolist(),
            "correlation": m.correlation.tolist(),
            "sd": m.sd.tolist(),
        }
        for m in moments
    ]
