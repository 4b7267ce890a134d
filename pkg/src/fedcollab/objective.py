"""Collaboration matrix, quantity-aware term and the coalition objective.

For a partition of the clients into coalitions, client ``i`` in coalition
``S`` trains on the quantity-weighted mixture of its coalition, with weights

    A[i, j] = beta_j / sum_{l in S} beta_l     for j in S, else 0.

The score minimised over partitions is

    sum_i  C / sqrt(m) * sqrt(sum_j A[i, j]**2 / beta_j)  +  sum_ij A[i, j] * D[i, j]

i.e. a generalisation term that shrinks as a coalition pools more data plus
the distribution mismatch a client absorbs from its collaborators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ObjectiveParams:
    C: float
    m: float
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if self.C < 0:
            raise ValueError("capacity constant C must be nonnegative")
        if self.m < 1:
            raise ValueError("total quantity m must be >= 1")
        if beta.ndim != 1 or np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise ValueError("beta must be a probability vector")

    @classmethod
    def from_counts(cls, counts, C: float) -> ObjectiveParams:
        counts = np.asarray(counts, dtype=np.float64)
        m = counts.sum()
        return cls(C, m, counts / m)

    @property
    def n(self) -> int:
        return len(self.beta)

    @property
    def counts(self) -> np.ndarray:
        return self.m * self.beta

    def with_C(self, C: float) -> ObjectiveParams:
        return ObjectiveParams(C, self.m, self.beta)


def as_labels(partition) -> np.ndarray:
    labels = np.asarray(partition)
    if labels.ndim != 1:
        raise ValueError("a partition is a 1-d vector of coalition labels")
    return labels


def canonical(partition) -> np.ndarray:
    """Relabel coalitions 0..K-1 in order of their smallest member."""
    labels = as_labels(partition)
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def coalitions(partition) -> list[list[int]]:
    labels = canonical(partition)
    groups: list[list[int]] = [[] for _ in range(labels.max() + 1 if len(labels) else 0)]
    for i, lab in enumerate(labels):
        groups[lab].append(i)
    return groups


def n_coalitions(partition) -> int:
    return len(set(as_labels(partition).tolist()))


def collab_matrix(partition, beta) -> np.ndarray:
    labels = as_labels(partition)
    beta = np.asarray(beta, dtype=np.float64)
    if len(labels) != len(beta):
        raise ValueError(f"partition has {len(labels)} clients but beta has {len(beta)}")
    same = labels[:, None] == labels[None, :]
    weights = np.where(same, beta[None, :], 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("a coalition has zero total quantity")
    return weights / totals


def quantity_term(alpha_row, params: ObjectiveParams) -> float:
    alpha = np.asarray(alpha_row, dtype=np.float64)
    beta = params.beta
    if alpha.shape != beta.shape:
        raise ValueError("alpha row and beta differ in length")
    active = alpha > 0
    if np.any(beta[active] <= 0):
        raise ValueError("positive collaboration weight on a client with zero quantity")
    chi = np.sum(alpha[active] ** 2 / beta[active])
    return float(params.C / np.sqrt(params.m) * np.sqrt(chi))


def _check_distances(D, n):
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (n, n):
        raise ValueError(f"distance matrix must be {n}x{n}, got {D.shape}")
    return D


def _quantity_terms(A, params):
    beta = params.beta
    safe = np.where(beta > 0, beta, 1.0)
    if np.any((A > 0) & (beta[None, :] <= 0)):
        raise ValueError("positive collaboration weight on a client with zero quantity")
    chi = np.sum(A * A / safe[None, :], axis=1)
    return params.C / np.sqrt(params.m) * np.sqrt(chi)


def fedcollab_objective(partition, params: ObjectiveParams, D) -> float:
    A = collab_matrix(partition, params.beta)
    D = _check_distances(D, len(A))
    return float(np.sum(_quantity_terms(A, params)) + np.sum(A * D))


def client_error_scores(partition, params: ObjectiveParams, D) -> np.ndarray:
    """Per-client bound ``2*phi(alpha_i) + 2*sum_{j != i} A_ij D_ij`` (irreducible risk omitted)."""
    A = collab_matrix(partition, params.beta)
    D = _check_distances(D, len(A))
    off = A * D
    np.fill_diagonal(off, 0.0)
    return 2.0 * _quantity_terms(A, params) + 2.0 * off.sum(axis=1)


def client_error_score(i: int, partition, params: ObjectiveParams, D) -> float:
    return float(client_error_scores(partition, params, D)[i])


def picky_threshold(i: int, params: ObjectiveParams) -> float:
    """Largest distance a collaborator of client ``i`` may have: C*sqrt(m) / (2*m_i)."""
    m_i = params.m * params.beta[i]
    if m_i <= 0:
        raise ValueError("client has no samples")
    return float(params.C * np.sqrt(params.m) / (2.0 * m_i))


def objective_record(partition, params: ObjectiveParams, D) -> dict:
    """JSON-ready log entry for one evaluation."""
    return {
        "partition": canonical(partition).tolist(),
        "C": float(params.C),
        "value": fedcollab_objective(partition, params, D),
        "per_client_scores": client_error_scores(partition, params, D).tolist(),
    }


# -- ablations ----------------------------------------------------------------

def ignore_quantities(params: ObjectiveParams) -> ObjectiveParams:
    n = params.n
    return ObjectiveParams(params.C, params.m, np.full(n, 1.0 / n))


def ignore_distances(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    n = len(D)
    out = D.copy()
    if n > 1:
        mask = ~np.eye(n, dtype=bool)
        out[mask] = D[mask].mean()
    return out
