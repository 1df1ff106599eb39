"""Recursive evaluation of the streaming objective and its gradients.

For a history at horizon tau with final per-time marginals pi_1, ..., pi_tau
(the product the state encodes), the objective is

    L_tau = E_q[ln p(s_{1:tau}, o_{1:tau}) - ln q(s_{1:tau})].

It folds left to right through a carried K-vector V:

    V_1(l)  = ln mu(l) + ln A[l][o_1] - ln pi_1(l)
    V_t(l)  = sum_k w_t(k) [ V_{t-1}(k) + ln B[k][l] + ln A[l][o_t]
                             - ln m_t(l | k) ]
    L_tau   = sum_l pi_tau(l) V_tau(l)

where w_t is the snapshot-t revision marginal and m_t the extension factor.
The - ln pi_1 term in the base case is what makes the fold equal the exact
expectation above: every later - ln q factor is carried by - ln m_t, and the
first marginal's own log term has nowhere else to live (dropping it shifts
the total by exactly E_q[ln pi_1]).  This is verified against brute-force
summation in the tests.

The parameter gradient folds the same way through a K x dim(theta) matrix U
whose carried part is averaged at the summed-over previous state, mirroring
V.  An alternative propagation that carries the summary at the terminal
index instead is kept behind a flag for reference; it does not pass the
finite-difference oracle.

Cost per fold step is O(K^2 * dim(theta)), independent of tau, which is the
whole point: the learner carries (V, U) across observations instead of
recomputing the fold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import (
    ConstraintError,
    GenerativeHMM,
    ModelParams,
    StateSpace,
    _check_values,
    log_softmax_row,
    softmax_row,
)
from .mfa import MfaHistory


# -- gradient containers ------------------------------------------------------

@dataclass(frozen=True)
class ThetaGrad:
    """Dense parameter gradient with pinned coordinates identically zero."""

    dalpha: np.ndarray  # (K, M)
    dbeta: np.ndarray   # (K, K)

    def dense_vector(self) -> np.ndarray:
        return np.concatenate([self.dalpha.ravel(), self.dbeta.ravel()])

    def free_vector(self) -> np.ndarray:
        return np.concatenate([self.dalpha[:, 1:].ravel(),
                               self.dbeta[:, 1:].ravel()])


def theta_dense_dim(K: int, M: int) -> int:
    return K * M + K * K


def params_free_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([params.alpha_tilde[:, 1:].ravel(),
                           params.beta_tilde[:, 1:].ravel()])


def params_from_free(space: StateSpace, vec: np.ndarray) -> ModelParams:
    K, M = space.K, space.M
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (K * (M - 1) + K * (K - 1),):
        raise ConstraintError("free vector has wrong length")
    at = np.zeros((K, M))
    bt = np.zeros((K, K))
    na = K * (M - 1)
    if M > 1:
        at[:, 1:] = vec[:na].reshape(K, M - 1)
    if K > 1:
        bt[:, 1:] = vec[na:].reshape(K, K - 1)
    return ModelParams(alpha_tilde=at, beta_tilde=bt)


def apply_theta_step(params: ModelParams, grad: ThetaGrad, step: float) -> ModelParams:
    # pinned columns are zero in the gradient, so pinning is preserved exactly
    return ModelParams(alpha_tilde=params.alpha_tilde + step * grad.dalpha,
                       beta_tilde=params.beta_tilde + step * grad.dbeta)


@dataclass(frozen=True)
class PsiGradient:
    """Gradient over the updatable blocks only.

    prev_block is None at horizon 1.  Dense per-block rows keep the pinned
    slot at zero; free_vector() emits exactly the unfrozen free coordinates
    (2K-2 of them for horizon >= 2, K-1 at horizon 1) and nothing else.
    """

    prev_block: Optional[np.ndarray]
    curr_block: np.ndarray

    def free_vector(self) -> np.ndarray:
        parts = []
        if self.prev_block is not None:
            parts.append(self.prev_block[1:])
        parts.append(self.curr_block[1:])
        return np.concatenate(parts)


# -- carried summaries --------------------------------------------------------

@dataclass(frozen=True)
class VSummary:
    """Carried objective summary: the K-vector V at time t."""

    values: np.ndarray
    t: int


@dataclass(frozen=True)
class USummary:
    """Carried gradient summary: K rows of dense theta gradients at time t."""

    values: np.ndarray  # (K, K*M + K*K)
    t: int


@dataclass(frozen=True)
class ElboSummaries:
    """The (V, U) pair carried between time steps by the streaming learner."""

    v: VSummary
    u: USummary


def _u_fresh(hmm: GenerativeHMM, w: np.ndarray, o_idx: int) -> np.ndarray:
    """Dense fresh-step gradient rows, one per terminal state l.

    Emission part: row l of dalpha gets onehot(o) - A[l].  Transition part:
    row k of dbeta gets w(k) (onehot(l) - B[k]).  Pinned columns zeroed:
    that is the free-coordinate projection, by exclusion not subtraction.
    """
    K, M = hmm.K, hmm.M
    fa = np.zeros((K, K, M))
    eo = np.zeros(M)
    eo[o_idx] = 1.0
    idx = np.arange(K)
    fa[idx, idx, :] = eo[None, :] - hmm.A
    fb = w[None, :, None] * (np.eye(K)[:, None, :] - hmm.B[None, :, :])
    fa[:, :, 0] = 0.0
    fb[:, :, 0] = 0.0
    return np.concatenate([fa.reshape(K, -1), fb.reshape(K, -1)], axis=1)


def base_summaries(hmm: GenerativeHMM, history: MfaHistory, o1: int) -> ElboSummaries:
    """Summaries at t = 1 for observation value o1 (1-based)."""
    o_idx = int(o1) - 1
    if not 0 <= o_idx < hmm.M:
        raise ConstraintError(f"observation values must lie in 1..{hmm.M}")
    log_pi1 = log_softmax_row(history.superseded_logits(1))
    v = hmm.log_mu() + hmm.log_A[:, o_idx] - log_pi1
    K, M = hmm.K, hmm.M
    u = np.zeros((K, K * M + K * K))
    fa = np.zeros((K, K, M))
    eo = np.zeros(M)
    eo[o_idx] = 1.0
    idx = np.arange(K)
    fa[idx, idx, :] = eo[None, :] - hmm.A
    fa[:, :, 0] = 0.0
    u[:, : K * M] = fa.reshape(K, -1)
    return ElboSummaries(v=VSummary(values=v, t=1),
                         u=USummary(values=u, t=1))


def _step_blocks(history: MfaHistory, t: int) -> tuple:
    """(log revision marginal, log current marginal, log superseded
    marginal of t-1) for fold step t >= 2."""
    prev_rev, curr = history._snapshots[t - 1]
    return (log_softmax_row(prev_rev), log_softmax_row(curr),
            log_softmax_row(history.superseded_logits(t - 1)))


def step_summaries(prev: ElboSummaries, hmm: GenerativeHMM, history: MfaHistory,
                   t: int, o_t: int, variant_carry_terminal: bool = False) -> ElboSummaries:
    """One fold step: advance (V, U) from time t-1 to time t."""
    if prev.v.t != t - 1:
        raise ConstraintError(f"summaries are at t = {prev.v.t}, expected {t - 1}")
    o_idx = int(o_t) - 1
    if not 0 <= o_idx < hmm.M:
        raise ConstraintError(f"observation values must lie in 1..{hmm.M}")
    log_w, log_curr, log_sup = _step_blocks(history, t)
    w = np.exp(log_w)
    base = float(w @ (prev.v.values + log_sup - log_w))
    v = base + w @ hmm.log_B + hmm.log_A[:, o_idx] - log_curr
    fresh = _u_fresh(hmm, w, o_idx)
    if variant_carry_terminal:
        u = prev.u.values + fresh
    else:
        u = (w @ prev.u.values)[None, :] + fresh
    return ElboSummaries(v=VSummary(values=v, t=t), u=USummary(values=u, t=t))


def streaming_update_summaries(prev: ElboSummaries, observation: int,
                               hmm: GenerativeHMM, history: MfaHistory) -> ElboSummaries:
    """Advance carried summaries to the history's current horizon.

    The history must already hold the (final) snapshot for the new time
    step; the result is bit-identical to recomputing the whole fold as long
    as theta and the frozen blocks are unchanged, because it is the same
    step function applied once.
    """
    return step_summaries(prev, hmm, history, history.horizon, observation)


def finish(summaries: ElboSummaries, history: MfaHistory) -> float:
    """Contract a summary against the newest marginal: L = pi_tau . V_tau."""
    if summaries.v.t != history.horizon:
        raise ConstraintError("summaries are not at the current horizon")
    return float(history.belief(history.horizon) @ summaries.v.values)


def scratch_summaries(hmm: GenerativeHMM, history: MfaHistory,
                      observations: Sequence[int],
                      variant_carry_terminal: bool = False) -> ElboSummaries:
    """Recompute the whole fold from t = 1 at the current parameters."""
    o = _check_values(observations, hmm.M, "observation")
    if o.shape[0] != history.horizon:
        raise ConstraintError("need exactly one observation per time step")
    s = base_summaries(hmm, history, int(o[0]) + 1)
    for t in range(2, history.horizon + 1):
        s = step_summaries(s, hmm, history, t, int(o[t - 1]) + 1,
                           variant_carry_terminal=variant_carry_terminal)
    return s


# -- public objective and gradients -------------------------------------------

def v_term(hmm: GenerativeHMM, m_table: np.ndarray, k: int, l: int, o_t: int) -> float:
    """ln B[k][l] + ln A[l][o_t] - ln m(l | k) for 1-based k, l, o_t."""
    ki, li = int(k) - 1, int(l) - 1
    oi = int(o_t) - 1
    if not (0 <= ki < hmm.K and 0 <= li < hmm.K and 0 <= oi < hmm.M):
        raise ConstraintError("state or symbol out of range")
    m = np.asarray(m_table, dtype=float)
    if m.shape != (hmm.K, hmm.K) or m[ki, li] <= 0.0:
        raise ConstraintError("extension table must be K x K with positive mass")
    return float(hmm.log_B[ki, li] + hmm.log_A[li, oi] - np.log(m[ki, li]))


def elbo_recursive(hmm: GenerativeHMM, history: MfaHistory,
                   observations: Sequence[int]) -> tuple:
    """Objective value at the current horizon, plus the final V summary."""
    s = scratch_summaries(hmm, history, observations)
    return finish(s, history), s.v


def grad_theta(hmm: GenerativeHMM, history: MfaHistory, observations: Sequence[int],
               variant_carry_terminal: bool = False) -> ThetaGrad:
    """Exact parameter gradient of elbo_recursive at the current theta."""
    s = scratch_summaries(hmm, history, observations,
                          variant_carry_terminal=variant_carry_terminal)
    dense = history.belief(history.horizon) @ s.u.values
    K, M = hmm.K, hmm.M
    return ThetaGrad(dalpha=dense[: K * M].reshape(K, M),
                     dbeta=dense[K * M:].reshape(K, K))


def local_psi_gradient(W: np.ndarray, G: np.ndarray, rho_prev: np.ndarray,
                       rho_curr: np.ndarray, double_prev_entropy: bool = False) -> tuple:
    """Gradient of pi_a . (W - ln pi_a) + pi_a G pi_b + H[pi_b] over the two
    pinned logit blocks, with everything older held fixed.

    double_prev_entropy doubles the - ln pi_a charge; that is the local
    shape of the literal pairwise objective, where consecutive terms each
    charge the shared marginal once.
    """
    log_pa = log_softmax_row(rho_prev)
    log_pb = log_softmax_row(rho_curr)
    pa, pb = np.exp(log_pa), np.exp(log_pb)
    ent = 2.0 if double_prev_entropy else 1.0
    ca = W + G @ pb - ent * log_pa
    ga = pa * (ca - float(pa @ ca))
    cb = G.T @ pa - log_pb
    gb = pb * (cb - float(pb @ cb))
    ga[0] = 0.0
    gb[0] = 0.0
    return ga, gb


def local_psi_gradient_first(base_log: np.ndarray, rho1: np.ndarray) -> np.ndarray:
    """Horizon-1 case: gradient of pi . (base_log - ln pi) over the single
    block."""
    log_p = log_softmax_row(rho1)
    p = np.exp(log_p)
    c = base_log - log_p
    g = p * (c - float(p @ c))
    g[0] = 0.0
    return g


def local_elbo(W: np.ndarray, G: np.ndarray, rho_prev: np.ndarray,
               rho_curr: np.ndarray) -> float:
    """The objective the local gradients ascend, cheap enough to evaluate
    inside a line search."""
    log_pa = log_softmax_row(rho_prev)
    log_pb = log_softmax_row(rho_curr)
    pa, pb = np.exp(log_pa), np.exp(log_pb)
    return float(pa @ (W - log_pa) + pa @ G @ pb - pb @ log_pb)


def local_elbo_first(base_log: np.ndarray, rho1: np.ndarray) -> float:
    """Horizon-1 counterpart of local_elbo: pi . (base_log - ln pi)."""
    log_p = log_softmax_row(rho1)
    p = np.exp(log_p)
    return float(p @ (base_log - log_p))


def step_inputs(hmm: GenerativeHMM, v_prev: np.ndarray, history: MfaHistory,
                o_t: int) -> tuple:
    """(W, G) for the final fold step at the current horizon.

    W folds the carried V with the superseded log marginal it is always
    paired with; G is the fresh transition-plus-emission table.
    """
    o_idx = int(o_t) - 1
    log_sup = log_softmax_row(history.superseded_logits(history.horizon - 1))
    W = v_prev + log_sup
    G = hmm.log_B + hmm.log_A[:, o_idx][None, :]
    return W, G


def grad_psi(hmm: GenerativeHMM, history: MfaHistory,
             observations: Sequence[int]) -> PsiGradient:
    """Gradient over the updatable blocks of the newest snapshot.

    The carried V through time tau - 1 does not depend on those blocks, so
    only the final fold step differentiates; frozen-block coordinates are
    not emitted at all.
    """
    o = _check_values(observations, hmm.M, "observation")
    if o.shape[0] != history.horizon:
        raise ConstraintError("need exactly one observation per time step")
    if history.horizon == 1:
        base = hmm.log_mu() + hmm.log_A[:, o[0]]
        g = local_psi_gradient_first(base, history.superseded_logits(1))
        return PsiGradient(prev_block=None, curr_block=g)
    prefix = history_prefix(history)
    s = scratch_summaries(hmm, prefix, [int(x) + 1 for x in o[:-1]])
    W, G = step_inputs(hmm, s.v.values, history, int(o[-1]) + 1)
    rho_prev, rho_curr = history.updatable_logits()
    ga, gb = local_psi_gradient(W, G, rho_prev, rho_curr)
    return PsiGradient(prev_block=ga, curr_block=gb)


def history_prefix(history: MfaHistory) -> MfaHistory:
    """A horizon tau - 1 view sharing the frozen snapshots.

    The newest snapshot is dropped; the time tau - 1 belief reverts to the
    snapshot tau - 1 block, which is exactly the state before augmentation.
    """
    if history.horizon < 2:
        raise ConstraintError("no prefix below horizon 1")
    prefix = MfaHistory.__new__(MfaHistory)
    prefix._snapshots = history._snapshots[:-1]
    return prefix
