"""One training step per integrator, driven by a gradient oracle.

Five steppers share the factored-state conventions of the lowrank module:

* ``euler_full_step``: dense explicit-Euler baseline.
* ``psi_step``: fixed-rank projector splitting over K, S, L subflows; the
  S subflow runs against the descent direction.
* ``bc_psi_step``: splitting with the S subflow replaced by a projection
  of the previous core onto the new left basis, so no substep moves
  against the descent direction.
* ``bug_fixed_step``: K and L subflows advanced in parallel from the same
  initial state, then a Galerkin core step in the fresh bases.
* ``abc_psi_step``: the rank-adaptive method. The left basis is augmented
  with the pre-step K factor, the core is projected into the enlarged
  basis, the right factor is evolved there, and the result is truncated
  back by a relative singular-value criterion.

All subflows are discretized by explicit Euler; ``StepConfig.substeps``
repeats the gradient step inside the K and L subflows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import Matrix, as_matrix, householder_qr, ortho_augment
from .lowrank import LowRankState, TruncationPolicy, truncate_state

__all__ = [
    "GradientOracle",
    "StepConfig",
    "StepAudit",
    "OdeProblem",
    "quadratic_oracle",
    "synthetic_quadratic_problem",
    "robbins_monro_step",
    "euler_full_step",
    "psi_step",
    "bc_psi_step",
    "bug_fixed_step",
    "abc_psi_step",
    "s_step_loss_delta_psi",
    "ode_error_study",
    "INTEGRATOR_NAMES",
]

INTEGRATOR_NAMES = ("full", "psi", "bc-psi", "bug", "abc-psi")


class GradientOracle:
    """Supplies the loss gradient, and optionally its factored contractions.

    Parameters
    ----------
    eval_full : callable, optional
        y (m, n) -> gradient (m, n).
    eval_kgrad : callable, optional
        (k (m, r), v (n, r)) -> gradient of the loss at k @ v.T,
        right-multiplied by v; shape (m, r).
    eval_lgrad : callable, optional
        (u (m, q), l (n, q)) -> transposed gradient of the loss at
        u @ l.T, right-multiplied by u; shape (n, q).
    loss : callable, optional
        y (m, n) -> scalar loss, needed only by audits and loss probes.

    At least eval_full or both contracted forms must be given; missing
    contractions fall back to materializing the full gradient.
    """

    def __init__(self, eval_full=None, eval_kgrad=None, eval_lgrad=None, loss=None):
        if eval_full is None and (eval_kgrad is None or eval_lgrad is None):
            raise ValueError("need eval_full or both eval_kgrad and eval_lgrad")
        self.eval_full = eval_full
        self.eval_kgrad = eval_kgrad
        self.eval_lgrad = eval_lgrad
        self.loss = loss

    def full(self, y: Matrix) -> Matrix:
        if self.eval_full is None:
            raise ValueError("oracle has no full-gradient form")
        return self.eval_full(y)

    def kgrad(self, k: Matrix, v: Matrix) -> Matrix:
        if self.eval_kgrad is not None:
            return self.eval_kgrad(k, v)
        return self.full(k @ v.T) @ v

    def lgrad(self, u: Matrix, l: Matrix) -> Matrix:
        if self.eval_lgrad is not None:
            return self.eval_lgrad(u, l)
        return self.full(u @ l.T).T @ u

    def loss_at(self, y: Matrix) -> float:
        if self.loss is None:
            raise ValueError("oracle has no loss form")
        return float(self.loss(y))


@dataclass(frozen=True)
class StepConfig:
    """Step size, inner gradient-step count, and the truncation policy
    (the policy is consumed by abc_psi_step only)."""

    h: float
    substeps: int = 1
    policy: Optional[TruncationPolicy] = None

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")


@dataclass
class StepAudit:
    """Optional sink for intermediate step quantities.

    Pass an instance to a stepper to have it filled in place.  Which
    fields are populated depends on the stepper; audits that need losses
    or the basis-projected gradient require the oracle's loss and full
    forms and densify the iterate, so use them at small scale only.
    """

    k0: Optional[Matrix] = None
    k1: Optional[Matrix] = None
    u_hat: Optional[Matrix] = None
    s_mid: Optional[Matrix] = None
    loss_before: Optional[float] = None
    loss_flow: Optional[float] = None
    proj_grad_sq: Optional[float] = None
    rank_out: Optional[int] = None


def euler_full_step(w: Matrix, oracle: GradientOracle, h: float) -> Matrix:
    """Dense explicit-Euler descent step w - h * grad(w)."""
    w = as_matrix(w, "w")
    g = as_matrix(oracle.full(w), "gradient")
    return w - h * g


def _k_sweep(k: Matrix, v: Matrix, oracle: GradientOracle, cfg: StepConfig) -> Matrix:
    for _ in range(cfg.substeps):
        k = k - cfg.h * oracle.kgrad(k, v)
    return k


def _l_sweep(l: Matrix, u: Matrix, oracle: GradientOracle, cfg: StepConfig) -> Matrix:
    for _ in range(cfg.substeps):
        l = l - cfg.h * oracle.lgrad(u, l)
    return l


def psi_step(
    state: LowRankState,
    oracle: GradientOracle,
    cfg: StepConfig,
    audit: Optional[StepAudit] = None,
) -> LowRankState:
    """One fixed-rank projector-splitting step (K, S, L sweeps).

    The S sweep moves along the positive gradient direction; that is the
    splitting's backward-in-time substep, not a bug.
    """
    u0, s0, v0 = state.u, state.s, state.v
    h = cfg.h
    # K sweep: evolve the left factor with the right basis frozen
    k = _k_sweep(u0 @ s0, v0, oracle, cfg)
    u1, s_tilde = householder_qr(k)
    # S sweep (single explicit-Euler step, positive sign)
    s1 = s_tilde + h * (u1.T @ oracle.kgrad(u1 @ s_tilde, v0))
    # L sweep: evolve the right factor in the updated left basis
    l = _l_sweep(v0 @ s1.T, u1, oracle, cfg)
    v1, r_l = householder_qr(l)
    if audit is not None:
        audit.k1 = k
        audit.s_mid = s1
    return LowRankState(u1, np.ascontiguousarray(r_l.T), v1)


def bc_psi_step(
    state: LowRankState,
    oracle: GradientOracle,
    cfg: StepConfig,
    audit: Optional[StepAudit] = None,
) -> LowRankState:
    """Fixed-rank splitting step with the S sweep replaced by a projection.

    After the K sweep, the new core is taken as u1.T @ k0 (the previous
    iterate expressed in the fresh left basis) instead of integrating the
    core backward.
    """
    u0, s0, v0 = state.u, state.s, state.v
    k0 = u0 @ s0
    k = _k_sweep(k0, v0, oracle, cfg)
    u1, _ = householder_qr(k)
    s_bar = u1.T @ k0
    l = _l_sweep(v0 @ s_bar.T, u1, oracle, cfg)
    v1, r_l = householder_qr(l)
    if audit is not None:
        audit.k1 = k
        audit.s_mid = s_bar
    return LowRankState(u1, np.ascontiguousarray(r_l.T), v1)


def bug_fixed_step(
    state: LowRankState,
    oracle: GradientOracle,
    cfg: StepConfig,
    audit: Optional[StepAudit] = None,
) -> LowRankState:
    """Fixed-rank basis-update and Galerkin step.

    K and L sweeps both start from the current state (they are
    independent and could run in parallel); the core is then rebuilt in
    the two fresh bases and advanced by one explicit-Euler step.
    """
    u0, s0, v0 = state.u, state.s, state.v
    h = cfg.h
    k = _k_sweep(u0 @ s0, v0, oracle, cfg)
    l = _l_sweep(v0 @ s0.T, u0, oracle, cfg)
    u1, _ = householder_qr(k)
    v1, _ = householder_qr(l)
    s_init = (u1.T @ u0) @ s0 @ (v0.T @ v1)
    s1 = s_init - h * (u1.T @ oracle.kgrad(u1 @ s_init, v1))
    if audit is not None:
        audit.k1 = k
        audit.s_mid = s_init
    return LowRankState(u1, s1, v1)


def abc_psi_step(
    state: LowRankState,
    oracle: GradientOracle,
    cfg: StepConfig,
    audit: Optional[StepAudit] = None,
) -> LowRankState:
    """Rank-adaptive step: augment the left basis, correct, evolve, truncate.

    Order of operations:

    1. K sweep from k0 = u0 @ s0.
    2. Enlarged left basis u_hat from one QR of [k0 | k1]; dependent
       trailing columns are dropped, so its width q is at most 2r.
    3. Core correction folded into the right factor: l0 = v0 @ k0.T @ u_hat
       (the current iterate expressed against u_hat).
    4. L sweep in the enlarged basis.
    5. Truncation of u_hat @ l1.T by the policy's singular-value
       criterion, then a small QR to restore the orthonormal-times-core
       form.

    The cost profile per step is one QR on the m x (2r) augmented block,
    one SVD of the n x q right factor, and one q x r1 bookkeeping QR.
    """
    if cfg.policy is None:
        raise ValueError("abc_psi_step requires cfg.policy")
    u0, s0, v0 = state.u, state.s, state.v
    k0 = u0 @ s0
    k1 = _k_sweep(k0, v0, oracle, cfg)
    u_hat = ortho_augment(k0, k1)
    l0 = v0 @ (k0.T @ u_hat)
    if audit is not None:
        # audit quantities at the pre-step point; needs full/loss forms
        audit.k0 = k0
        audit.k1 = k1
        audit.u_hat = u_hat
        if oracle.loss is not None and oracle.eval_full is not None:
            y0 = u0 @ (s0 @ v0.T)
            audit.loss_before = oracle.loss_at(y0)
            g0 = oracle.full(y0)
            audit.proj_grad_sq = float(np.sum((u_hat.T @ g0) ** 2))
    l1 = _l_sweep(l0, u_hat, oracle, cfg)
    if audit is not None and oracle.loss is not None:
        audit.loss_flow = oracle.loss_at(u_hat @ l1.T)
    k_star, v_star = truncate_state(u_hat, l1, cfg.policy)
    # small re-factorization: k_star lies in span(u_hat), so QR the
    # q x r1 coefficient block instead of the full m x r1 factor
    core = u_hat.T @ k_star
    w, s_new = householder_qr(core)
    u_new = u_hat @ w
    if audit is not None:
        audit.rank_out = v_star.shape[1]
    return LowRankState(u_new, s_new, v_star)


def s_step_loss_delta_psi(
    state: LowRankState, oracle: GradientOracle, cfg: StepConfig
) -> tuple[float, float]:
    """Loss before and after the core sweep of a projector-splitting step.

    Runs only the K sweep and the single-step S sweep, evaluating the loss
    at u1 @ s @ v0.T on both sides.  The S sweep integrates against the
    descent direction, so the returned delta is non-negative to leading
    order (about h times the squared norm of the projected gradient).
    """
    if oracle.loss is None:
        raise ValueError("s_step_loss_delta_psi requires the oracle's loss form")
    u0, s0, v0 = state.u, state.s, state.v
    h = cfg.h
    k = _k_sweep(u0 @ s0, v0, oracle, cfg)
    u1, s_tilde = householder_qr(k)
    loss_before = oracle.loss_at(u1 @ (s_tilde @ v0.T))
    s1 = s_tilde + h * (u1.T @ oracle.kgrad(u1 @ s_tilde, v0))
    loss_after = oracle.loss_at(u1 @ (s1 @ v0.T))
    return loss_before, loss_after


def quadratic_oracle(a: Matrix) -> GradientOracle:
    """Oracle for the quadratic loss 0.5 * ||y - a||_F^2.

    The gradient is y - a; the contracted forms avoid materializing it.
    """
    a = as_matrix(a, "a")

    def eval_full(y):
        return y - a

    def eval_kgrad(k, v):
        # (k v^T - a) v without the m x n intermediate
        return k @ (v.T @ v) - a @ v

    def eval_lgrad(u, l):
        # (u l^T - a)^T u without the m x n intermediate
        return l @ (u.T @ u) - a.T @ u

    def loss(y):
        d = y - a
        return 0.5 * float(np.sum(d * d))

    return GradientOracle(eval_full=eval_full, eval_kgrad=eval_kgrad,
                          eval_lgrad=eval_lgrad, loss=loss)


def synthetic_quadratic_problem(
    m: int,
    n: int,
    rank: int,
    eps: float,
    seed: int,
    start_offset: float = 0.02,
) -> OdeProblem:
    """Quadratic flow toward a low-rank target plus a full-rank perturbation.

    The target is a = a_r + eps * e with a_r a seeded random rank-``rank``
    matrix (singular values 2, 1, 0.5, ...) and e a unit-norm dense draw.
    The initial state shares the target's singular bases but carries a
    perturbed core of size ``start_offset``, so for eps = 0 the flow stays
    exactly rank-``rank`` and the dense reference starts on the manifold.
    """
    rng = np.random.default_rng(seed)
    u_a = householder_qr(rng.standard_normal((m, rank))).q
    v_a = householder_qr(rng.standard_normal((n, rank))).q
    sigma_a = 2.0 * 0.5 ** np.arange(rank)
    a = (u_a * sigma_a) @ v_a.T
    if eps != 0.0:
        e = rng.standard_normal((m, n))
        a = a + eps * (e / np.linalg.norm(e))
    s0 = np.diag(sigma_a) + start_offset * rng.standard_normal((rank, rank)) / np.sqrt(rank)
    y0 = LowRankState(u_a, s0, v_a)
    return OdeProblem(oracle=quadratic_oracle(a), y0=y0, w0=y0.densify())


def robbins_monro_step(h0: float, t: int) -> float:
    """Decaying step size h0 / t (t counted from 1) for the convergence
    harness; the sequence sums to infinity while its squares stay summable."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    return h0 / t


_STEPPERS: dict[str, Callable] = {
    "psi": psi_step,
    "bc-psi": bc_psi_step,
    "bug": bug_fixed_step,
    "abc-psi": abc_psi_step,
}


@dataclass(frozen=True)
class OdeProblem:
    """A deterministic matrix gradient flow for the robustness study.

    ``oracle`` must expose the full gradient; ``y0`` is the factored
    initial point and ``w0`` the dense initial point of the reference
    flow (normally the densified ``y0``; an offset models an initial
    approximation gap).
    """

    oracle: GradientOracle
    y0: LowRankState
    w0: Matrix


def _integrate_dense(problem: OdeProblem, h: float, steps: int) -> Matrix:
    w = problem.w0
    for _ in range(steps):
        w = euler_full_step(w, problem.oracle, h)
    return w


def _steps_for(h: float, t_end: float) -> int:
    steps = int(round(t_end / h))
    if steps < 1 or abs(steps * h - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"step size {h} does not divide t_end {t_end}")
    return steps


def ode_error_study(
    problem: OdeProblem,
    integrator: str,
    h_list: Sequence[float],
    t_end: float,
    ref_h: float,
    cfg_template: Optional[StepConfig] = None,
) -> list[tuple[float, float]]:
    """Terminal-time error of an integrator against a fine dense reference.

    The reference trajectory is the dense explicit-Euler flow from
    problem.w0 with step ref_h.  For each h the chosen integrator runs
    from problem.y0 (or w0 for the dense baseline) to t_end, and the
    Frobenius distance to the reference endpoint is recorded.

    Returns a list of (h, error) rows in the order of ``h_list``.
    ``cfg_template`` carries substeps and the truncation policy for the
    rank-adaptive stepper.
    """
    if integrator not in INTEGRATOR_NAMES:
        raise ValueError(f"unknown integrator {integrator!r}")
    w_ref = _integrate_dense(problem, ref_h, _steps_for(ref_h, t_end))
    rows: list[tuple[float, float]] = []
    for h in h_list:
        steps = _steps_for(h, t_end)
        if integrator == "full":
            w = _integrate_dense(problem, h, steps)
            err = float(np.linalg.norm(w - w_ref))
        else:
            stepper = _STEPPERS[integrator]
            cfg = StepConfig(
                h=h,
                substeps=cfg_template.substeps if cfg_template else 1,
                policy=cfg_template.policy if cfg_template else None,
            )
            y = problem.y0
            for _ in range(steps):
                y = stepper(y, problem.oracle, cfg)
            err = float(np.linalg.norm(y.densify() - w_ref))
        rows.append((float(h), err))
    return rows
