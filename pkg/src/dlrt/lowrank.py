"""Low-rank factored states, tangent-space projection, rank truncation,
and compression accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import (
    DimensionError,
    Matrix,
    NumericError,
    as_matrix,
    householder_qr,
    svd_thin,
)

__all__ = [
    "LowRankState",
    "TruncationPolicy",
    "default_policy",
    "init_lowrank",
    "tangent_project",
    "truncation_rank",
    "truncate_state",
    "compression_rate",
    "param_count",
]


@dataclass(frozen=True, eq=False)
class LowRankState:
    """Factored representation y = u @ s @ v.T with orthonormal u, v."""

    u: Matrix  # (m, r), orthonormal columns
    s: Matrix  # (r, r)
    v: Matrix  # (n, r), orthonormal columns

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v.shape[0])

    def densify(self) -> Matrix:
        """Materialize the full m x n matrix (use only at small scale)."""
        return self.u @ self.s @ self.v.T

    def validate(self, tol: float = 1e-10) -> "LowRankState":
        """Check shape and orthonormality contracts; returns self."""
        m, r = self.u.shape
        n, rv = self.v.shape
        if self.s.shape != (r, r) or rv != r:
            raise DimensionError(
                f"factor shapes inconsistent: u{self.u.shape} s{self.s.shape} v{self.v.shape}"
            )
        if not (1 <= r <= min(m, n)):
            raise DimensionError(f"rank {r} outside [1, min({m},{n})]")
        for name, f in (("u", self.u), ("v", self.v)):
            if not np.isfinite(f).all():
                raise NumericError(f"{name} contains non-finite entries")
            gram_err = np.linalg.norm(f.T @ f - np.eye(r))
            if gram_err > tol * math.sqrt(r):
                raise NumericError(f"{name} columns not orthonormal: residual {gram_err:.3e}")
        if not np.isfinite(self.s).all():
            raise NumericError("s contains non-finite entries")
        return self


@dataclass(frozen=True)
class TruncationPolicy:
    """Controls how many singular values survive a truncation.

    ``tau`` is the relative tail tolerance; the retained rank is clamped
    into [r_min, r_max].  ``squared`` switches the tail criterion from the
    tail norm to the sum of squared singular values (kept available for
    comparison; the norm-ratio criterion is the default).
    """

    tau: float
    r_max: int
    r_min: int = 2
    squared: bool = False

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not (1 <= self.r_min <= self.r_max):
            raise ValueError(f"need 1 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]")


def default_policy(initial_rank: int, tau: float) -> TruncationPolicy:
    """Default clamp window: floor 2, cap at twice the initial rank."""
    return TruncationPolicy(tau=tau, r_max=max(2, 2 * initial_rank), r_min=2)


def init_lowrank(m: int, n: int, r: int, seed: int) -> LowRankState:
    """Seeded random state: orthonormalized Gaussian bases, s = I/sqrt(r).

    The u factor is drawn first, then v, from one generator stream, so the
    same seed reproduces the state bitwise.
    """
    if not (1 <= r <= min(m, n)):
        raise DimensionError(f"rank {r} outside [1, min({m},{n})]")
    rng = np.random.default_rng(seed)
    u = householder_qr(rng.standard_normal((m, r))).q
    v = householder_qr(rng.standard_normal((n, r))).q
    s = np.eye(r) / math.sqrt(r)
    return LowRankState(u, s, v)


def tangent_project(state: LowRankState, g) -> Matrix:
    """Project g onto the tangent space of the rank-r manifold at the state.

    Returns u u^T g + g v v^T - u u^T g v v^T without forming the
    projector itself.
    """
    g = as_matrix(g, "g")
    if g.shape != state.shape:
        raise DimensionError(f"gradient shape {g.shape} != state shape {state.shape}")
    u, v = state.u, state.v
    ug = u.T @ g          # (r, n)
    gv = g @ v            # (m, r)
    return u @ ug + gv @ v.T - u @ (ug @ v) @ v.T


def truncation_rank(sigma, policy: TruncationPolicy) -> int:
    """Smallest rank whose discarded tail passes the policy's criterion.

    Default criterion: ||sigma[r:]|| <= tau * ||sigma||.  With
    ``policy.squared`` the tail is compared as a sum of squares instead.
    The result is clamped into [r_min, min(r_max, len(sigma))].
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size == 0:
        raise DimensionError("sigma must be a non-empty 1-D vector")
    if not np.isfinite(sigma).all():
        raise NumericError("sigma contains non-finite entries")
    q = sigma.size
    sq = sigma * sigma
    # tail_sq[r] = sum of squares of sigma[r:], computed back to front
    tail_sq = np.zeros(q + 1)
    tail_sq[:q] = np.cumsum(sq[::-1])[::-1]
    threshold = policy.tau * math.sqrt(tail_sq[0])
    if policy.squared:
        admissible = tail_sq[1:] < threshold
    else:
        admissible = np.sqrt(tail_sq[1:]) <= threshold
    # smallest r in [1, q]; the all-kept choice r = q always qualifies
    r = 1 + int(np.argmax(admissible)) if admissible.any() else q
    hi = min(policy.r_max, q)
    lo = min(policy.r_min, hi)
    return min(max(r, lo), hi)


def truncate_state(u_hat, l1, policy: TruncationPolicy) -> tuple[Matrix, Matrix]:
    """Rank truncation of the product u_hat @ l1.T via an SVD of l1.

    Returns (k_star, v_star) with k_star = u_hat Q_r diag(sigma_r) and
    v_star = P_r, where l1 = P diag(sigma) Q^T and r is picked by
    ``truncation_rank``.  The reconstruction k_star @ v_star.T differs
    from u_hat @ l1.T by exactly the discarded singular-value tail.
    """
    u_hat = as_matrix(u_hat, "u_hat")
    p, sigma, qmat = svd_thin(l1)
    if u_hat.shape[1] != qmat.shape[0]:
        raise DimensionError(
            f"u_hat cols {u_hat.shape[1]} != l1 cols {qmat.shape[0]}"
        )
    r1 = truncation_rank(sigma, policy)
    k_star = u_hat @ (qmat[:, :r1] * sigma[:r1])
    v_star = np.ascontiguousarray(p[:, :r1])
    return k_star, v_star


def compression_rate(layers: Sequence[tuple[int, int, int]]) -> float:
    """Percent reduction of factored parameters vs dense layers.

    Each layer is (in_dim, out_dim, rank); the rate is
    (1 - sum((in+out)*r) / sum(in*out)) * 100 and may be negative when
    the factors outweigh the dense matrix.
    """
    if not layers:
        raise ValueError("need at least one layer")
    dense = 0
    factored = 0
    for i_l, o_l, r_l in layers:
        if i_l <= 0 or o_l <= 0 or r_l < 0:
            raise ValueError(f"bad layer dims ({i_l}, {o_l}, {r_l})")
        dense += i_l * o_l
        factored += (i_l + o_l) * r_l
    return (1.0 - factored / dense) * 100.0


def param_count(layers: Sequence[tuple[int, int, int]]) -> int:
    """Total factored parameter count: sum of m*r + n*r + r*r per layer."""
    total = 0
    for m_l, n_l, r_l in layers:
        if m_l <= 0 or n_l <= 0 or r_l < 0:
            raise ValueError(f"bad layer dims ({m_l}, {n_l}, {r_l})")
        total += m_l * r_l + n_l * r_l + r_l * r_l
    return total
