"""Score-transition-matrix estimation from k-NN consensus statistics.

The observed LLM scores of a sample and its two nearest embedding
neighbors are modeled as independent draws through a row-stochastic
transition matrix T from a shared ground-truth score with prior p
(clusterability assumption). Matching the first-, second-, and
third-order consensus vectors

    q1    = T^T p
    q2[z] = (T (*) T_z)^T p          T_g = T . H_g (columns cycled left by g)
    q3[z][g] = (T (*) T_z (*) T_g)^T p

against their empirical counterparts recovers (T, p) without any
ground-truth labels; Bayes inversion then corrects the observed scores.
All score indices live in {0, ..., K-1} and shifts are plain (i+g) mod K.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

DEFAULT_K = 6
SUM_TOL = 1e-6

# Weight of the soft row-sum / simplex-sum residuals in the least-squares
# system; large enough that the optimum is feasible to ~1e-8 before the
# final exact projection.
_CONSTRAINT_WEIGHT = 10.0


class DenoiseError(ValueError):
    """Raised for infeasible inputs to the estimation pipeline."""


@dataclass(frozen=True)
class TransitionMatrix:
    """K x K row-stochastic matrix; entry (i, j) = P(observed=j | true=i)."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DenoiseError("transition matrix must be square")
        if (m < -SUM_TOL).any():
            raise DenoiseError("transition matrix entries must be nonnegative")
        if np.abs(m.sum(axis=1) - 1.0).max() > SUM_TOL:
            raise DenoiseError("transition matrix rows must sum to 1")

    @property
    def K(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ScorePrior:
    """Probability vector over the K ground-truth score classes."""

    p: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.p, dtype=np.float64)
        object.__setattr__(self, "p", v)
        if v.ndim != 1:
            raise DenoiseError("prior must be a vector")
        if (v < -SUM_TOL).any() or abs(v.sum() - 1.0) > SUM_TOL:
            raise DenoiseError("prior must lie on the probability simplex")

    @property
    def K(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class NeighborTriple:
    """Observed scores of an anchor and its top-2 nearest neighbors."""

    anchor_score: int
    nn1_score: int
    nn2_score: int


@dataclass(frozen=True)
class ConsensusEstimates:
    """The three consensus families in shift layout.

    q1[i], q2[z][i], q3[z][g][i] where the neighbor scores are the anchor
    score cyclically shifted by z and g.
    """

    q1: np.ndarray
    q2: np.ndarray
    q3: np.ndarray

    def __post_init__(self) -> None:
        q1 = np.asarray(self.q1, dtype=np.float64)
        q2 = np.asarray(self.q2, dtype=np.float64)
        q3 = np.asarray(self.q3, dtype=np.float64)
        object.__setattr__(self, "q1", q1)
        object.__setattr__(self, "q2", q2)
        object.__setattr__(self, "q3", q3)
        K = q1.shape[0]
        if q2.shape != (K, K) or q3.shape != (K, K, K):
            raise DenoiseError("consensus shapes must be (K,), (K,K), (K,K,K)")
        for name, total in (("q1", q1.sum()), ("q2", q2.sum()), ("q3", q3.sum())):
            if abs(total - 1.0) > SUM_TOL:
                raise DenoiseError(f"{name} entries must sum to 1 (got {total:.8f})")

    @property
    def K(self) -> int:
        return self.q1.shape[0]


@dataclass(frozen=True)
class TransitionSolveResult:
    transition: TransitionMatrix
    prior: ScorePrior
    residual: float
    converged: bool
    iterations: int


def cyclic_shift_index(i: int, g: int, K: int) -> int:
    """Index of score i shifted by g within a cyclic range of size K."""
    if not 0 <= i < K or not 0 <= g < K:
        raise DenoiseError(f"indices must lie in [0, {K - 1}]: i={i}, g={g}")
    return (i + g) % K


def _shift_columns(T: np.ndarray, g: int) -> np.ndarray:
    """T . H_g: column j of the result is column (j+g) mod K of T."""
    K = T.shape[0]
    return T[:, (np.arange(K) + g) % K]


def top_neighbor_indices(X: np.ndarray, k: int, block: int = 512) -> np.ndarray:
    """Exact top-k cosine neighbors per row of a unit-norm matrix.

    Ties are broken by ascending row index (stable sort), which matches
    ascending sample id when rows are pre-sorted by id.
    """
    n = X.shape[0]
    if k >= n:
        raise DenoiseError(f"k={k} requires more than {n} samples")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = X[start:stop] @ X.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        out[start:stop] = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return out


def knn_triples(embedded: list) -> list[NeighborTriple]:
    """One (anchor, nn1, nn2) score triple per sample, by exact 2-NN search.

    ``embedded`` is a list of EmbeddedSamples carrying raw scores; samples
    are visited in ascending-id order and ties resolve toward lower ids.
    """
    scored = sorted(embedded, key=lambda e: e.sample_id)
    if len(scored) < 3:
        raise DenoiseError(f"need at least 3 scored samples, got {len(scored)}")
    unscored = [e.sample_id for e in scored if e.raw_score is None]
    if unscored:
        raise DenoiseError(f"samples without raw scores: {unscored[:10]}")
    X = np.stack([e.embedding for e in scored])
    scores = np.array([e.raw_score for e in scored], dtype=np.int64)
    nn = top_neighbor_indices(X, 2)
    return [
        NeighborTriple(int(scores[i]), int(scores[nn[i, 0]]), int(scores[nn[i, 1]]))
        for i in range(len(scored))
    ]


def estimate_consensus(triples: list[NeighborTriple], K: int = DEFAULT_K) -> ConsensusEstimates:
    """Empirical consensus frequencies over the given triples.

    q1[i] = freq(anchor=i); q2[z][i] = freq(anchor=i, nn1=(i+z) mod K);
    q3[z][g][i] adds nn2=(i+g) mod K.
    """
    if not triples:
        raise DenoiseError("cannot estimate consensus from zero triples")
    anchor = np.array([t.anchor_score for t in triples])
    nn1 = np.array([t.nn1_score for t in triples])
    nn2 = np.array([t.nn2_score for t in triples])
    for name, arr in (("anchor", anchor), ("nn1", nn1), ("nn2", nn2)):
        if arr.min() < 0 or arr.max() >= K:
            raise DenoiseError(f"{name} scores outside [0, {K - 1}]")
    n = len(triples)
    q1 = np.bincount(anchor, minlength=K) / n
    q2 = np.zeros((K, K))
    q3 = np.zeros((K, K, K))
    z = (nn1 - anchor) % K
    g = (nn2 - anchor) % K
    np.add.at(q2, (z, anchor), 1.0)
    np.add.at(q3, (z, g, anchor), 1.0)
    return ConsensusEstimates(q1=q1, q2=q2 / n, q3=q3 / n)


def model_consensus(T: TransitionMatrix, p: ScorePrior) -> ConsensusEstimates:
    """Model-side consensus families for a given (T, p)."""
    m, v = T.entries, p.p
    K = T.K
    q1 = m.T @ v
    q2 = np.empty((K, K))
    q3 = np.empty((K, K, K))
    shifted = [_shift_columns(m, g) for g in range(K)]
    for z in range(K):
        q2[z] = (m * shifted[z]).T @ v
        for g in range(K):
            q3[z, g] = (m * shifted[z] * shifted[g]).T @ v
    return ConsensusEstimates(q1=q1, q2=q2, q3=q3)


def _shift_to_joint(est: ConsensusEstimates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Re-index the shift layout into full joint tensors Q2[i,j], Q3[i,j,l]."""
    K = est.K
    i = np.arange(K)
    Q2 = np.empty((K, K))
    Q3 = np.empty((K, K, K))
    for z in range(K):
        Q2[i, (i + z) % K] = est.q2[z]
        for g in range(K):
            Q3[i, (i + z) % K, (i + g) % K] = est.q3[z, g]
    return est.q1.copy(), Q2, Q3


def _project_simplex_rows(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n, K = V.shape
    U = np.sort(V, axis=1)[:, ::-1]
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, K + 1)
    cond = U - css / ind > 0
    rho = K - np.argmax(cond[:, ::-1], axis=1) - 1
    theta = css[np.arange(n), rho] / (rho + 1.0)
    return np.maximum(V - theta[:, None], 0.0)


def _consensus_residual(T: np.ndarray, p: np.ndarray, Q1e, Q2e, Q3e) -> float:
    Q1 = T.T @ p
    Q2 = np.einsum("u,ui,uj->ij", p, T, T, optimize=True)
    Q3 = np.einsum("u,ui,uj,ul->ijl", p, T, T, T, optimize=True)
    return float(np.sum((Q1 - Q1e) ** 2) + np.sum((Q2 - Q2e) ** 2) + np.sum((Q3 - Q3e) ** 2))


def solve_transition(
    empirical: ConsensusEstimates,
    K: int | None = None,
    max_nfev: int = 4000,
) -> TransitionSolveResult:
    """Recover (T, p) minimizing the squared consensus residual.

    Trust-region least squares over box-constrained entries with soft
    simplex penalties, initialized at T = 0.7 I + 0.3 uniform and
    p = empirical q1; the returned iterate is exactly projected onto the
    feasible set. ``converged`` is False when the evaluation budget ran
    out before the optimizer's own tolerances were met.
    """
    K = K or empirical.K
    if K != empirical.K:
        raise DenoiseError(f"K={K} does not match estimates (K={empirical.K})")
    Q1e, Q2e, Q3e = _shift_to_joint(empirical)

    def residuals(theta: np.ndarray) -> np.ndarray:
        T = theta[: K * K].reshape(K, K)
        p = theta[K * K :]
        Q1 = T.T @ p
        Q2 = np.einsum("u,ui,uj->ij", p, T, T, optimize=True)
        Q3 = np.einsum("u,ui,uj,ul->ijl", p, T, T, T, optimize=True)
        return np.concatenate(
            [
                (Q1 - Q1e).ravel(),
                (Q2 - Q2e).ravel(),
                (Q3 - Q3e).ravel(),
                _CONSTRAINT_WEIGHT * (T.sum(axis=1) - 1.0),
                _CONSTRAINT_WEIGHT * np.atleast_1d(p.sum() - 1.0),
            ]
        )

    T0 = 0.7 * np.eye(K) + 0.3 / K
    p0 = np.clip(empirical.q1, 1e-6, None)
    p0 = p0 / p0.sum()
    theta0 = np.concatenate([T0.ravel(), p0])
    result = least_squares(
        residuals,
        theta0,
        bounds=(0.0, 1.0),
        method="trf",
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=max_nfev,
    )
    T = _project_simplex_rows(result.x[: K * K].reshape(K, K))
    p = _project_simplex_rows(result.x[K * K :][None, :])[0]
    residual = _consensus_residual(T, p, Q1e, Q2e, Q3e)
    converged = result.status > 0
    if not converged:
        logger.warning(
            "transition solve not converged after %d evaluations (residual %.3g)",
            result.nfev,
            residual,
        )
    return TransitionSolveResult(
        transition=TransitionMatrix(T),
        prior=ScorePrior(p),
        residual=residual,
        converged=converged,
        iterations=int(result.nfev),
    )


def correct_scores(T: TransitionMatrix, p: ScorePrior, observed) -> np.ndarray:
    """Marginal Bayes map: corrected(y~) = argmax_i p_i T[i, y~].

    Ties fall toward the lower score index. The map depends only on the
    observed score, not on the instance.
    """
    obs = np.asarray(observed, dtype=np.int64)
    if obs.size and (obs.min() < 0 or obs.max() >= T.K):
        raise DenoiseError(f"observed scores outside [0, {T.K - 1}]")
    posterior = p.p[:, None] * T.entries  # (true, observed)
    table = posterior.argmax(axis=0)
    return table[obs]


def correct_scores_knn(
    T: TransitionMatrix,
    p: ScorePrior,
    observed,
    neighbor_scores,
) -> np.ndarray:
    """Instance-level MAP correction using neighbor votes.

    Under clusterability a sample and its neighbors share a ground-truth
    score, so the posterior over the true score multiplies the prior by
    the transition likelihood of the sample's own observed score and each
    neighbor's. Computed in log domain; argmax ties fall to the lower
    index.
    """
    obs = np.asarray(observed, dtype=np.int64)
    votes = np.asarray(neighbor_scores, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] != obs.shape[0]:
        raise DenoiseError("neighbor_scores must be (n_samples, k)")
    logT = np.log(np.clip(T.entries, 1e-12, None))
    logp = np.log(np.clip(p.p, 1e-12, None))
    loglik = logp[None, :] + logT[:, obs].T
    for j in range(votes.shape[1]):
        loglik = loglik + logT[:, votes[:, j]].T
    return loglik.argmax(axis=1)


@dataclass(frozen=True)
class TransitionEstimate:
    """Full estimation output for one corpus: (T, p) plus diagnostics."""

    transition: TransitionMatrix
    prior: ScorePrior
    residual: float
    converged: bool
    iterations: int
    triple_count: int


def estimate_transition(
    embedded: list,
    K: int = DEFAULT_K,
    rounds: int = 3,
    subsample: float = 1.0,
    seed: int = 0,
) -> TransitionEstimate:
    """Build pooled consensus estimates over shuffled sampling rounds and solve.

    Each round visits anchors in a seeded-shuffled order, keeping a
    ``subsample`` fraction of them; counts are pooled across rounds. With
    the default fraction of 1.0 every round contributes the same exact
    triples, so pooling equals a single full pass.
    """
    if not 0.0 < subsample <= 1.0:
        raise DenoiseError(f"subsample fraction must be in (0, 1]: {subsample}")
    scored = sorted(embedded, key=lambda e: e.sample_id)
    if len(scored) < 3:
        raise DenoiseError(f"need at least 3 scored samples, got {len(scored)}")
    if any(e.raw_score is None for e in scored):
        raise DenoiseError("all samples must carry raw scores")
    X = np.stack([e.embedding for e in scored])
    scores = np.array([e.raw_score for e in scored], dtype=np.int64)
    nn = top_neighbor_indices(X, 2)
    rng = np.random.default_rng(seed)
    pooled: list[NeighborTriple] = []
    n = len(scored)
    take = max(3, int(round(subsample * n)))
    for _ in range(max(1, rounds)):
        order = rng.permutation(n)[:take]
        pooled.extend(
            NeighborTriple(int(scores[i]), int(scores[nn[i, 0]]), int(scores[nn[i, 1]]))
            for i in order
        )
    estimates = estimate_consensus(pooled, K)
    solved = solve_transition(estimates, K)
    return TransitionEstimate(
        transition=solved.transition,
        prior=solved.prior,
        residual=solved.residual,
        converged=solved.converged,
        iterations=solved.iterations,
        triple_count=len(pooled),
    )
