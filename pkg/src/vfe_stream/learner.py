"""Streaming coordinate-ascent learner.

Per observation: grow the horizon, run a fixed budget of ascent steps on the
two updatable belief blocks, then a fixed budget on the model parameters
(using the just-updated beliefs), then advance the carried (V, U) summaries
and append a trace record.  Per-observation cost is constant in the horizon.

The carried summaries absorb each time step's terms at the parameter values
in effect when the step was folded in.  That staleness is the price of the
constant-cost contract; with parameter updates disabled the carried values
are bit-identical to recomputing the fold from scratch.  The pure functions
in elbo/oracle recompute everything at the current parameters and are the
audit path.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import elbo as elbo_mod
from .mfa import MfaFamily, MfaHistory, augment
from .model import ConstraintError, GenerativeHMM, ModelParams, build_hmm
from .oracle import forward_filter


@dataclass(frozen=True)
class Schedule:
    """Per-observation update budget and step sizes.

    theta_step is relative to the per-observation average of the objective:
    the applied step is theta_step / tau.  The cumulative gradient grows
    linearly with the horizon while its carried part is constant within one
    ingest, so an unscaled step would move the parameters by an amount
    proportional to tau on every observation and saturate them; dividing by
    tau keeps one config value stable across the whole stream without
    changing the maximizer.
    """

    psi_updates_per_obs: int = 80
    theta_updates_per_obs: int = 50
    psi_step: float = 0.1
    theta_step: float = 0.01
    line_search: bool = False

    def __post_init__(self):
        if self.psi_updates_per_obs < 0 or self.theta_updates_per_obs < 0:
            raise ConstraintError("update counts must be >= 0")
        for s in (self.psi_step, self.theta_step):
            if not (np.isfinite(s) and s > 0.0):
                raise ConstraintError("step sizes must be positive reals")


def ascent_step(x: np.ndarray, gradient: np.ndarray, step: float,
                line_search: bool = False, objective=None) -> tuple:
    """x + step * gradient, optionally backtracking.

    With line_search, the step is halved (at most 20 times) until the
    objective does not decrease beyond rounding; on exhaustion the old x is
    kept and the step reported as stalled.  A non-finite gradient always
    stalls; nothing is clipped.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        return x, True
    if not line_search:
        return x + step * g, False
    if objective is None:
        raise ConstraintError("line_search needs an objective")
    f0 = objective(x)
    slack = 1e-12 * max(1.0, abs(f0))
    s = step
    for _ in range(21):
        xn = x + s * g
        if objective(xn) >= f0 - slack:
            return xn, False
        s *= 0.5
    return x, True


@dataclass
class TraceRecord:
    tau: int
    elbo: float
    log_evidence: Optional[float]
    gap: Optional[float]
    filter_l1: Optional[float]
    psi_updates: int
    theta_updates: int
    stalls: int
    wall_ms: float


TRACE_HEADER = "tau,elbo,log_evidence,gap,filter_l1,psi_updates,theta_updates,stalls,wall_ms"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class StreamTrace:
    """One record per observation, monotone in tau.

    The CSV form writes wall_ms as 0: repeat runs must be byte-identical,
    and wall time is the one column that cannot be.  Real timings stay on
    the in-memory records for benchmarking.
    """

    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.tau != self.records[-1].tau + 1:
            raise ConstraintError("trace tau must increase by 1")
        self.records.append(rec)

    def to_csv_text(self) -> str:
        lines = [TRACE_HEADER]
        for r in self.records:
            lines.append(",".join([
                str(r.tau), _cell(r.elbo), _cell(r.log_evidence), _cell(r.gap),
                _cell(r.filter_l1), str(r.psi_updates), str(r.theta_updates),
                str(r.stalls), "0",
            ]))
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


@dataclass
class LearnerState:
    """Mutable stream state: current model, belief history, carried
    summaries, accumulated observations and stall count."""

    mu: np.ndarray
    params: ModelParams
    hmm: GenerativeHMM
    schedule: Schedule
    family: MfaFamily = MfaFamily.REVERSED
    init_rule: str = "prediction"
    oracle_mode: str = "off"
    reference: Optional[GenerativeHMM] = None
    history: Optional[MfaHistory] = None
    summaries: Optional[elbo_mod.ElboSummaries] = None
    tau: int = 0
    observations: list = field(default_factory=list)
    stalls_total: int = 0
    hat_carried: float = 0.0
    ref_pred: Optional[np.ndarray] = None
    ref_logz: float = 0.0


def init_learner(params: ModelParams, mu, schedule: Schedule,
                 family: MfaFamily = MfaFamily.REVERSED,
                 init_rule: str = "prediction",
                 oracle_mode: str = "off",
                 reference: Optional[GenerativeHMM] = None) -> LearnerState:
    if family is MfaFamily.FORWARD_MARKOV:
        raise ConstraintError("the forward-Markov family has no streaming path")
    if oracle_mode not in ("off", "self", "reference"):
        raise ConstraintError("oracle_mode must be off, self or reference")
    if oracle_mode == "reference" and reference is None:
        raise ConstraintError("reference oracle mode needs a reference model")
    if init_rule not in ("uniform", "zeros", "prediction"):
        raise ConstraintError(f"unknown init_rule {init_rule!r}")
    hmm = build_hmm(mu, params)
    state = LearnerState(mu=hmm.mu, params=params, hmm=hmm, schedule=schedule,
                         family=family, init_rule=init_rule,
                         oracle_mode=oracle_mode, reference=reference)
    if reference is not None:
        state.ref_pred = reference.mu.copy()
    return state


def _first_block(state: LearnerState) -> np.ndarray:
    if state.init_rule == "prediction" and np.all(state.mu > 0.0):
        logits = np.log(state.mu)
        return logits - logits[0]
    return np.zeros(state.hmm.K)


def _psi_phase(state: LearnerState, o: int) -> int:
    """Ascent on the updatable blocks; returns applied update count."""
    sched = state.schedule
    hist = state.history
    decoupled = state.family is MfaFamily.FULLY_DECOUPLED
    applied = 0
    if state.tau == 1:
        base = state.hmm.log_mu() + state.hmm.log_A[:, o - 1]
        b = hist.superseded_logits(1).copy()
        for _ in range(sched.psi_updates_per_obs):
            g = elbo_mod.local_psi_gradient_first(base, b)
            b, stalled = ascent_step(
                b, g, sched.psi_step, sched.line_search,
                objective=lambda x: elbo_mod.local_elbo_first(base, x))
            if stalled:
                state.stalls_total += 1
                break
            applied += 1
        b[0] = 0.0
        hist.set_updatable(rho_curr=b)
        return applied
    if decoupled:
        W = _decoupled_W(state)
    else:
        W, _ = elbo_mod.step_inputs(state.hmm, state.summaries.v.values, hist, o)
    G = state.hmm.log_B + state.hmm.log_A[:, o - 1][None, :]
    a, b = (x.copy() for x in hist.updatable_logits())
    K = a.shape[0]

    def objective(x):
        if decoupled:
            return _decoupled_local(W, G, x[:K], x[K:])
        return elbo_mod.local_elbo(W, G, x[:K], x[K:])

    x = np.concatenate([a, b])
    for _ in range(sched.psi_updates_per_obs):
        ga, gb = elbo_mod.local_psi_gradient(W, G, x[:K], x[K:],
                                             double_prev_entropy=decoupled)
        x, stalled = ascent_step(x, np.concatenate([ga, gb]), sched.psi_step,
                                 sched.line_search, objective=objective)
        if stalled:
            state.stalls_total += 1
            break
        applied += 1
    x[0] = 0.0
    x[K] = 0.0
    hist.set_updatable(rho_prev=x[:K], rho_curr=x[K:])
    return applied


def _decoupled_W(state: LearnerState) -> np.ndarray:
    """Fresh-neighbour content for the revision block under the pairwise
    objective: the time tau-1 term's dependence on its own marginal."""
    hist = state.history
    hmm = state.hmm
    o_prev = state.observations[-2] - 1
    if state.tau == 2:
        return hmm.log_mu() + hmm.log_A[:, o_prev]
    older = hist.belief(state.tau - 2)
    return older @ hmm.log_B + hmm.log_A[:, o_prev]


def _decoupled_local(W, G, rho_prev, rho_curr) -> float:
    log_pa = elbo_mod.log_softmax_row(rho_prev)
    log_pb = elbo_mod.log_softmax_row(rho_curr)
    pa, pb = np.exp(log_pa), np.exp(log_pb)
    return float(pa @ (W - 2.0 * log_pa) + pa @ G @ pb - pb @ log_pb)


def _theta_phase(state: LearnerState, o: int) -> int:
    """Ascent on the parameters using the just-updated beliefs; the carried
    gradient rows are contracted once, the fresh final-step part tracks the
    moving parameters."""
    sched = state.schedule
    if sched.theta_updates_per_obs == 0:
        return 0
    hist = state.history
    K, M = state.hmm.K, state.hmm.M
    pb = hist.belief(state.tau)
    if state.tau == 1:
        pa = None
        ubar = np.zeros(K * M + K * K)
    else:
        pa = elbo_mod.softmax_row(hist.updatable_logits()[0])
        ubar = pa @ state.summaries.u.values
    eo = np.zeros(M)
    eo[o - 1] = 1.0
    applied = 0
    params = state.params
    hmm = state.hmm

    def fresh_grad(h: GenerativeHMM) -> elbo_mod.ThetaGrad:
        da = pb[:, None] * (eo[None, :] - h.A)
        if pa is None:
            db = np.zeros((K, K))
        else:
            db = pa[:, None] * (pb[None, :] - h.B)
        da[:, 0] = 0.0
        db[:, 0] = 0.0
        return elbo_mod.ThetaGrad(dalpha=da, dbeta=db)

    def objective_of(vec_params: ModelParams) -> float:
        # the full fold at the candidate parameters: O(tau) per evaluation,
        # paid only when line_search monitors the true objective
        h = build_hmm(state.mu, vec_params)
        s = elbo_mod.scratch_summaries(h, hist, state.observations)
        return elbo_mod.finish(s, hist)

    eff_step = sched.theta_step / state.tau
    for _ in range(sched.theta_updates_per_obs):
        fresh = fresh_grad(hmm)
        dense = ubar + fresh.dense_vector()
        if not np.all(np.isfinite(dense)):
            state.stalls_total += 1
            break
        grad = elbo_mod.ThetaGrad(dalpha=dense[: K * M].reshape(K, M),
                                  dbeta=dense[K * M:].reshape(K, K))
        if sched.line_search:
            f0 = objective_of(params)
            slack = 1e-12 * max(1.0, abs(f0))
            s = eff_step
            accepted = False
            for _ in range(21):
                cand = elbo_mod.apply_theta_step(params, grad, s)
                if objective_of(cand) >= f0 - slack:
                    params = cand
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                state.stalls_total += 1
                break
        else:
            params = elbo_mod.apply_theta_step(params, grad, eff_step)
        hmm = build_hmm(state.mu, params)
        applied += 1
    state.params = params
    state.hmm = hmm
    return applied


def _hat_term_tail(state: LearnerState) -> float:
    """Last two terms of the pairwise objective at the current blocks."""
    hist = state.history
    hmm = state.hmm
    o = state.observations[-1] - 1
    pb = hist.belief(state.tau)
    log_pb = np.log(pb)
    if state.tau == 1:
        return float(pb @ (hmm.log_mu() + hmm.log_A[:, o] - log_pb))
    pa = hist.belief(state.tau - 1)
    log_pa = np.log(pa)
    G = hmm.log_B + hmm.log_A[:, o][None, :]
    term_tau = float(pa @ G @ pb - pa @ log_pa - pb @ log_pb)
    o_prev = state.observations[-2] - 1
    if state.tau == 2:
        prev_content = hmm.log_mu() + hmm.log_A[:, o_prev]
        term_prev = float(pa @ (prev_content - log_pa))
    else:
        older = hist.belief(state.tau - 2)
        prev_content = older @ hmm.log_B + hmm.log_A[:, o_prev]
        term_prev = float(pa @ (prev_content - log_pa) - older @ np.log(older))
    return term_prev + term_tau


def _absorb_hat_term(state: LearnerState) -> None:
    """Move the oldest still-unabsorbed pairwise term into the carried total.

    Called at the start of ingest tau, before augmentation.  The marginal
    for time tau-1 is about to become revisable again, so the newest term
    whose blocks are all final is the one for time tau-2; the tail of the
    objective (times tau-1 and tau) is recomputed at record time instead.
    """
    u = state.tau - 2
    if u < 1:
        return
    hist = state.history
    hmm = state.hmm
    o_u = state.observations[u - 1] - 1
    pa = hist.belief(u)
    log_pa = np.log(pa)
    if u == 1:
        content = hmm.log_mu() + hmm.log_A[:, o_u]
        state.hat_carried += float(pa @ (content - log_pa))
    else:
        older = hist.belief(u - 1)
        content = older @ hmm.log_B + hmm.log_A[:, o_u]
        state.hat_carried += float(pa @ (content - log_pa) - older @ np.log(older))


def ingest(state: LearnerState, observation: int) -> TraceRecord:
    """Consume one observation: augment, update beliefs, update parameters,
    refresh summaries, record."""
    t_start = time.perf_counter()
    o = int(observation)
    if not 1 <= o <= state.hmm.M:
        raise ConstraintError(
            f"observation {o} out of range 1..{state.hmm.M} at tau={state.tau + 1}")
    state.tau += 1
    state.observations.append(o)
    stalls_before = state.stalls_total
    try:
        if state.tau == 1:
            state.history = MfaHistory(_first_block(state))
        else:
            if state.family is MfaFamily.FULLY_DECOUPLED:
                _absorb_hat_term(state)
            augment(state.history, state.init_rule, state.hmm)
        psi_applied = _psi_phase(state, o)
        theta_applied = _theta_phase(state, o)
        if state.tau == 1:
            state.summaries = elbo_mod.base_summaries(state.hmm, state.history, o)
        else:
            state.summaries = elbo_mod.streaming_update_summaries(
                state.summaries, o, state.hmm, state.history)
    except Exception as exc:
        raise type(exc)(f"ingest failed at tau={state.tau}: {exc}") from exc

    if state.family is MfaFamily.FULLY_DECOUPLED:
        stream_elbo = state.hat_carried + _hat_term_tail(state)
    else:
        stream_elbo = elbo_mod.finish(state.summaries, state.history)

    log_evidence = gap = filter_l1 = None
    elbo_value = stream_elbo
    if state.oracle_mode == "self":
        filt = forward_filter(state.hmm, state.observations)
        exact, _ = elbo_mod.elbo_recursive(state.hmm, state.history,
                                           state.observations)
        elbo_value = exact
        log_evidence = filt.log_evidence
        gap = log_evidence - exact
        filter_l1 = float(np.abs(state.history.belief(state.tau)
                                 - filt.marginals[-1]).sum())
    elif state.oracle_mode == "reference":
        ref = state.reference
        w = state.ref_pred * ref.A[:, o - 1]
        c = float(w.sum())
        marg = w / c
        state.ref_logz += float(np.log(c))
        state.ref_pred = ref.B.T @ marg
        log_evidence = state.ref_logz
        filter_l1 = float(np.abs(state.history.belief(state.tau) - marg).sum())

    wall_ms = (time.perf_counter() - t_start) * 1000.0
    return TraceRecord(tau=state.tau, elbo=elbo_value, log_evidence=log_evidence,
                       gap=gap, filter_l1=filter_l1, psi_updates=psi_applied,
                       theta_updates=theta_applied,
                       stalls=state.stalls_total - stalls_before,
                       wall_ms=wall_ms)


@dataclass
class RunResult:
    trace: StreamTrace
    state: LearnerState


def run_stream(initial_params: ModelParams, mu, source: Iterable[int],
               schedule: Schedule, oracle_enabled=False,
               family: MfaFamily = MfaFamily.REVERSED,
               init_rule: str = "prediction",
               reference: Optional[GenerativeHMM] = None) -> RunResult:
    """Fold a whole observation source; deterministic given the source and
    schedule.  An empty source yields an empty trace."""
    if oracle_enabled is True:
        mode = "self"
    elif oracle_enabled in (False, None):
        mode = "off"
    else:
        mode = str(oracle_enabled)
    state = init_learner(initial_params, mu, schedule, family=family,
                         init_rule=init_rule, oracle_mode=mode,
                         reference=reference)
    trace = StreamTrace()
    for obs in source:
        trace.append(ingest(state, obs))
    return RunResult(trace=trace, state=state)


def summary_dict(result: RunResult) -> dict:
    """Deterministic end-of-run summary: final parameters, final history
    snapshot and aggregate metrics."""
    state, trace = result.state, result.trace
    n = len(trace.records)
    out = {
        "tau": state.tau,
        "family": state.family.value,
        "oracle_mode": state.oracle_mode,
        "final_params": {
            "alpha_tilde": [[float(x) for x in r] for r in state.params.alpha_tilde],
            "beta_tilde": [[float(x) for x in r] for r in state.params.beta_tilde],
        },
        "final_A": [[float(x) for x in r] for r in state.hmm.A],
        "final_B": [[float(x) for x in r] for r in state.hmm.B],
        "history": state.history.to_dict() if state.history is not None else None,
        "metrics": {
            "stalls": state.stalls_total,
            "final_elbo": trace.records[-1].elbo if n else None,
            "final_avg_vfe": (-trace.records[-1].elbo / state.tau) if n else None,
        },
    }
    l1 = [r.filter_l1 for r in trace.records if r.filter_l1 is not None]
    if l1:
        tail = l1[-1000:]
        out["metrics"]["mean_filter_l1_tail"] = float(np.mean(tail))
    gaps = [r.gap for r in trace.records if r.gap is not None]
    if gaps:
        out["metrics"]["min_gap"] = float(min(gaps))
    return out


def align_states(A_hat, B_hat, A_true, B_true) -> tuple:
    """Best state relabeling by total variation.

    Returns (permutation, max_row_tv) where permutation maps true index i to
    estimated index perm[i], and max_row_tv is the largest half-L1 row
    distance across both matrices after relabeling.
    """
    A_hat, B_hat = np.asarray(A_hat), np.asarray(B_hat)
    A_true, B_true = np.asarray(A_true), np.asarray(B_true)
    K = A_true.shape[0]
    best = None
    for perm in itertools.permutations(range(K)):
        p = list(perm)
        a_tv = 0.5 * np.abs(A_hat[p, :] - A_true).sum(axis=1)
        b_tv = 0.5 * np.abs(B_hat[np.ix_(p, p)] - B_true).sum(axis=1)
        total = float(a_tv.sum() + b_tv.sum())
        worst = float(max(a_tv.max(), b_tv.max()))
        if best is None or total < best[0]:
            best = (total, perm, worst)
    return best[1], best[2]
