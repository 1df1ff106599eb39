"""Command-line surface: generate, fit, compare, gradcheck.

Every command is a pure function of (config, input files, seed): repeat runs
produce byte-identical outputs.  Exit codes: 0 success, 2 bad input or
config, 3 completed with stalls or failed checks.  Output files are written
atomically (temp file in the target directory, then rename).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import elbo as elbo_mod
from .learner import Schedule, run_stream, summary_dict
from .mfa import (
    MfaFamily,
    MfaHistory,
    augment,
    full_q,
    hat_elbo,
    pairwise_tables_from_history,
)
from .model import (
    ConstraintError,
    GenerativeHMM,
    ModelParams,
    StateSpace,
    build_hmm,
    hmm_from_config,
    sample_trajectory,
)
from .oracle import (
    ENUMERATION_GUARD,
    GuardError,
    brute_force_elbo,
    finite_diff_grad,
    forward_filter,
    enumerate_posterior,
    max_grad_error,
    vfe,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALLS = 3


class ConfigError(ValueError):
    pass


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.tmp{os.getpid()}")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _require_keys(doc: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} fields: {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise ConfigError(f"missing {where} fields: {sorted(missing)}")


_FAMILIES = {f.value: f for f in MfaFamily}


@dataclass
class ExperimentConfig:
    """Validated run description; see README for the JSON schema."""

    hmm: GenerativeHMM
    seed: int
    init_seed: int
    length: int
    schedule: Schedule
    family: MfaFamily
    init_rule: str
    oracle: str
    out: dict = field(default_factory=dict)

    @staticmethod
    def parse(doc: dict) -> "ExperimentConfig":
        allowed = {"model", "seed", "init_seed", "length", "schedule",
                   "family", "init_rule", "oracle", "out"}
        _require_keys(doc, allowed, {"model", "seed", "length"}, "config")
        try:
            hmm = hmm_from_config(doc["model"])
        except ConstraintError as exc:
            raise ConfigError(f"model: {exc}") from exc
        seed = int(doc["seed"])
        init_seed = int(doc.get("init_seed", seed))
        length = int(doc["length"])
        if length < 0:
            raise ConfigError("length must be >= 0")
        sched_doc = doc.get("schedule", {})
        _require_keys(sched_doc,
                      {"psi_updates_per_obs", "theta_updates_per_obs",
                       "psi_step", "theta_step", "line_search"}, set(),
                      "schedule")
        try:
            schedule = Schedule(**sched_doc)
        except (ConstraintError, TypeError) as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        family_name = doc.get("family", "reversed")
        if family_name not in _FAMILIES:
            raise ConfigError(f"unknown family {family_name!r}")
        family = _FAMILIES[family_name]
        if family is MfaFamily.FORWARD_MARKOV:
            raise ConfigError("the forward-Markov family has no streaming path")
        init_rule = doc.get("init_rule", "prediction")
        if init_rule not in ("uniform", "zeros", "prediction"):
            raise ConfigError(f"unknown init_rule {init_rule!r}")
        oracle = doc.get("oracle", "off")
        if oracle is True:
            oracle = "self"
        if oracle is False or oracle is None:
            oracle = "off"
        if oracle not in ("off", "self", "reference"):
            raise ConfigError("oracle must be off, self, reference or a boolean")
        out = doc.get("out", {})
        _require_keys(out, {"data", "states", "trace", "summary", "report"},
                      set(), "out")
        return ExperimentConfig(hmm=hmm, seed=seed, init_seed=init_seed,
                                length=length, schedule=schedule, family=family,
                                init_rule=init_rule, oracle=oracle, out=dict(out))


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.parse(doc)


def _out_path(cfg: ExperimentConfig, key: str, out_dir: str, default: str) -> str:
    name = cfg.out.get(key, default)
    return os.path.join(out_dir, name)


# -- generate -----------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out_dir: str, quiet: bool) -> int:
    traj = sample_trajectory(cfg.hmm, cfg.length, seed=cfg.seed)
    lines = [json.dumps({"t": t, "o": o}, sort_keys=True)
             for t, o in enumerate(traj.observations, start=1)]
    data_path = _out_path(cfg, "data", out_dir, "data.jsonl")
    _atomic_write(data_path, "\n".join(lines) + ("\n" if lines else ""))
    if "states" in cfg.out:
        slines = [json.dumps({"ground_truth": True, "length": cfg.length},
                             sort_keys=True)]
        slines += [json.dumps({"s": s, "t": t}, sort_keys=True)
                   for t, s in enumerate(traj.states, start=1)]
        _atomic_write(os.path.join(out_dir, cfg.out["states"]),
                      "\n".join(slines) + "\n")
    if not quiet:
        print(f"wrote {cfg.length} observations to {data_path}")
    return EXIT_OK


# -- fit ----------------------------------------------------------------------

def read_observations(path: str, M: int) -> list:
    """Strict JSONL reader: each line exactly {"t": n, "o": m} with
    consecutive t from 1.  A states file (any line carrying "s" or the
    ground-truth marker) is rejected so fits cannot consume ground truth."""
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{i}: invalid JSON ({exc})") from exc
            if not isinstance(doc, dict) or set(doc) != {"t", "o"}:
                raise ConfigError(f"{path}:{i}: expected exactly t and o fields")
            t, o = int(doc["t"]), int(doc["o"])
            if t != len(out) + 1:
                raise ConfigError(f"{path}:{i}: t must be consecutive from 1")
            if not 1 <= o <= M:
                raise ConfigError(f"{path}:{i}: o out of range 1..{M}")
            out.append(o)
    return out


def _run_config(cfg: ExperimentConfig, observations: list):
    space = StateSpace(cfg.hmm.K, cfg.hmm.M)
    params0 = ModelParams.random(space, seed=cfg.init_seed)
    reference = cfg.hmm if cfg.oracle == "reference" else None
    return run_stream(params0, cfg.hmm.mu, observations, cfg.schedule,
                      oracle_enabled=cfg.oracle, family=cfg.family,
                      init_rule=cfg.init_rule, reference=reference)


def cmd_fit(cfg: ExperimentConfig, data_path: str, out_dir: str, quiet: bool) -> int:
    observations = read_observations(data_path, cfg.hmm.M)
    result = _run_config(cfg, observations)
    trace_path = _out_path(cfg, "trace", out_dir, "trace.csv")
    _atomic_write(trace_path, result.trace.to_csv_text())
    summary = summary_dict(result)
    summary["config_seed"] = cfg.seed
    summary_path = _out_path(cfg, "summary", out_dir, "summary.json")
    _atomic_write(summary_path, _json_text(summary))
    stalls = result.state.stalls_total
    if not quiet:
        final = result.trace.records[-1].elbo if result.trace.records else None
        print(f"fit: tau={result.state.tau} final_elbo={final} stalls={stalls}")
        print(f"wrote {trace_path} and {summary_path}")
    return EXIT_STALLS if stalls else EXIT_OK


# -- compare ------------------------------------------------------------------

def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("VFE_STREAM_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if cap < 1:
        raise ConfigError("VFE_STREAM_THREADS must be >= 1")
    return max(1, min(cap, n_tasks))


def _evaluate_candidate(cfg: ExperimentConfig, observations: list) -> dict:
    result = _run_config(cfg, observations)
    state = result.state
    tau = state.tau
    if cfg.family is MfaFamily.FULLY_DECOUPLED:
        objective = hat_elbo(state.hmm,
                             pairwise_tables_from_history(state.history),
                             observations, literal_pairwise=True)
    elif state.hmm.K == 1:
        # one state: beliefs are trivial, so the objective at the final
        # parameters is the iid log-likelihood in closed form
        objective, _ = elbo_mod.elbo_recursive(state.hmm, state.history,
                                               observations)
    else:
        # the streaming value the run actually attained; re-scoring frozen
        # early beliefs at the final parameters would charge them for
        # parameter movement they could not have seen
        objective = elbo_mod.finish(state.summaries, state.history)
    exact_elbo, _ = elbo_mod.elbo_recursive(state.hmm, state.history,
                                            observations)
    log_evidence = forward_filter(state.hmm, observations).log_evidence
    return {
        "objective": objective,
        "avg_vfe": -objective / tau,
        "exact_elbo": exact_elbo,
        "exact_log_evidence": log_evidence,
        "avg_nll": -log_evidence / tau,
        "stalls": state.stalls_total,
        "K": state.hmm.K,
        "family": cfg.family.value,
    }


def cmd_compare(compare_doc: dict, out_dir: str, quiet: bool,
                data_override: Optional[str]) -> int:
    _require_keys(compare_doc, {"data", "candidates", "out"}, {"candidates"},
                  "compare config")
    data_path = data_override or compare_doc.get("data")
    if not data_path:
        raise ConfigError("compare needs a data file (config field or --data)")
    candidates = compare_doc["candidates"]
    if not isinstance(candidates, list) or len(candidates) < 1:
        raise ConfigError("candidates must be a non-empty list")
    parsed = []
    for i, cand in enumerate(candidates):
        _require_keys(cand, {"name", "config"}, {"name", "config"},
                      f"candidate {i}")
        inner = dict(cand["config"])
        if "out" in inner and inner["out"]:
            raise ConfigError(f"candidate {cand['name']}: out paths belong to "
                              "the compare config")
        data_field = inner.pop("data", None)
        if data_field is not None and data_field != data_path:
            raise ConfigError(f"candidate {cand['name']}: data file mismatch")
        inner.setdefault("length", 0)
        parsed.append((str(cand["name"]), ExperimentConfig.parse(inner)))
    names = [n for n, _ in parsed]
    if len(set(names)) != len(names):
        raise ConfigError("candidate names must be unique")
    max_m = max(cfg.hmm.M for _, cfg in parsed)
    observations = read_observations(data_path, max_m)
    if not observations:
        raise ConfigError("compare needs a non-empty data file")
    for name, cfg in parsed:
        bad = [o for o in observations if o > cfg.hmm.M]
        if bad:
            raise ConfigError(f"candidate {name}: data symbol {bad[0]} exceeds M={cfg.hmm.M}")

    rows = [None] * len(parsed)
    with concurrent.futures.ThreadPoolExecutor(
            max_workers=_worker_count(len(parsed))) as pool:
        futures = {pool.submit(_evaluate_candidate, cfg, observations): i
                   for i, (_, cfg) in enumerate(parsed)}
        for fut in concurrent.futures.as_completed(futures):
            rows[futures[fut]] = fut.result()
    for (name, _), row in zip(parsed, rows):
        row["name"] = name
    ranking = sorted(range(len(rows)), key=lambda i: (rows[i]["avg_vfe"], names[i]))
    report = {
        "data": data_path,
        "tau": len(observations),
        "candidates": rows,
        "ranking": [names[i] for i in ranking],
    }
    out = compare_doc.get("out", {})
    report_path = os.path.join(out_dir, out.get("report", "compare.json")) \
        if isinstance(out, dict) else os.path.join(out_dir, "compare.json")
    _atomic_write(report_path, _json_text(report))
    if not quiet:
        for i in ranking:
            print(f"{rows[i]['avg_vfe']:.6f}  {names[i]}")
        print(f"wrote {report_path}")
    stalls = sum(r["stalls"] for r in rows)
    return EXIT_STALLS if stalls else EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def _random_history(K: int, tau: int, rng) -> MfaHistory:
    def pin(v):
        v = np.asarray(v, dtype=float).copy()
        v[0] = 0.0
        return v

    h = MfaHistory(pin(rng.normal(size=K)))
    for _ in range(2, tau + 1):
        augment(h, "uniform")
        h.set_updatable(pin(0.7 * rng.normal(size=K)), pin(rng.normal(size=K)))
    return h


def _gradcheck_instance(K: int, M: int, tau: int, seed: int,
                        corrupt: bool) -> dict:
    rng = np.random.default_rng(seed)
    space = StateSpace(K, M)
    params = ModelParams.random(space, seed=seed)
    mu = rng.dirichlet(np.ones(K))
    hmm = build_hmm(mu, params)
    obs = [int(rng.integers(1, M + 1)) for _ in range(tau)]
    hist = _random_history(K, tau, rng)

    rec, _ = elbo_mod.elbo_recursive(hmm, hist, obs)
    if corrupt:
        # negative-control fixture: behave as if the base case forgot its
        # -ln pi_1 charge, the most tempting wrong simplification
        pi1 = hist.superseded(1)
        rec = rec - float(pi1 @ np.log(pi1))
    q = full_q(hist, MfaFamily.REVERSED)
    bf = brute_force_elbo(hmm, q.table, obs)
    recursion_err = abs(rec - bf)

    free0 = elbo_mod.params_free_vector(params)

    def f_theta(v):
        p2 = elbo_mod.params_from_free(space, v)
        return elbo_mod.elbo_recursive(build_hmm(mu, p2), hist, obs)[0]

    g_theta = elbo_mod.grad_theta(hmm, hist, obs).free_vector()
    theta_err = max_grad_error(g_theta, finite_diff_grad(f_theta, free0)) \
        if free0.size else 0.0

    gp = elbo_mod.grad_psi(hmm, hist, obs)
    if tau >= 2 and K > 1:
        a0, b0 = hist.updatable_logits()
        x0 = np.concatenate([a0[1:], b0[1:]])

        def f_psi(v):
            h2 = MfaHistory.from_dict(hist.to_dict())
            h2.set_updatable(np.concatenate([[0.0], v[: K - 1]]),
                             np.concatenate([[0.0], v[K - 1:]]))
            return elbo_mod.elbo_recursive(hmm, h2, obs)[0]

        psi_err = max_grad_error(gp.free_vector(), finite_diff_grad(f_psi, x0))
    elif K > 1:
        b0 = hist.updatable_logits()[1]

        def f_psi1(v):
            h2 = MfaHistory(np.concatenate([[0.0], v]))
            return elbo_mod.elbo_recursive(hmm, h2, obs)[0]

        psi_err = max_grad_error(gp.free_vector(),
                                 finite_diff_grad(f_psi1, b0[1:].copy()))
    else:
        psi_err = 0.0

    log_z = forward_filter(hmm, obs).log_evidence
    gap = log_z - rec
    post = enumerate_posterior(hmm, obs)
    v_post = vfe(hmm, post, obs)
    identity_err = abs(v_post + log_z)

    return {
        "seed": seed, "K": K, "M": M, "tau": tau,
        "recursion_abs_err": recursion_err,
        "theta_grad_scaled_err": theta_err,
        "psi_grad_scaled_err": psi_err,
        "bound_gap": gap,
        "posterior_vfe_identity_err": identity_err,
    }


def cmd_gradcheck(doc: dict, out_dir: str, quiet: bool) -> int:
    allowed = {"K", "M", "tau", "instances", "seed", "negative_control", "out"}
    _require_keys(doc, allowed, set(), "gradcheck config")
    K = int(doc.get("K", 2))
    M = int(doc.get("M", 2))
    tau = int(doc.get("tau", 5))
    instances = int(doc.get("instances", 10))
    seed0 = int(doc.get("seed", 0))
    corrupt = bool(doc.get("negative_control", False))
    if K < 1 or M < 1 or tau < 1 or instances < 1:
        raise ConfigError("K, M, tau, instances must be >= 1")
    if K ** tau > ENUMERATION_GUARD:
        raise ConfigError(f"K^tau = {K ** tau} exceeds the enumeration guard "
                          f"{ENUMERATION_GUARD}")

    per_instance = []
    for i in range(instances):
        per_instance.append(_gradcheck_instance(K, M, tau, seed0 + i, corrupt))

    checks = {
        "recursion_matches_enumeration":
            max(r["recursion_abs_err"] for r in per_instance) <= 1e-9,
        "theta_gradient_matches_fd":
            max(r["theta_grad_scaled_err"] for r in per_instance) <= 1.0,
        "psi_gradient_matches_fd":
            max(r["psi_grad_scaled_err"] for r in per_instance) <= 1.0,
        "bound_gap_nonnegative":
            min(r["bound_gap"] for r in per_instance) >= -1e-10,
        "posterior_vfe_is_neg_evidence":
            max(r["posterior_vfe_identity_err"] for r in per_instance) <= 1e-10,
    }
    report = {
        "config": {"K": K, "M": M, "tau": tau, "instances": instances,
                   "seed": seed0, "negative_control": corrupt},
        "tolerances": {"recursion_abs": 1e-9, "grad_scaled": 1.0,
                       "gap_slack": 1e-10, "identity_abs": 1e-10},
        "checks": checks,
        "passed": all(checks.values()),
        "instances": per_instance,
    }
    out = doc.get("out", {})
    report_path = os.path.join(out_dir, out.get("report", "gradcheck.json")) \
        if isinstance(out, dict) else os.path.join(out_dir, "gradcheck.json")
    _atomic_write(report_path, _json_text(report))
    if not quiet:
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
        print(f"wrote {report_path}")
    return EXIT_OK if report["passed"] else EXIT_STALLS


# -- entry point --------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vfe-stream",
        description="Streaming variational inference and learning for "
                    "discrete-state hidden Markov models.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_data in (("generate", False), ("fit", True),
                             ("compare", False), ("gradcheck", False)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--data", required=needs_data)
        sp.add_argument("--out", default=".")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--oracle", action="store_true",
                        help="force-enable the self oracle")
        sp.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command in ("generate", "fit"):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = ExperimentConfig(
                    hmm=cfg.hmm, seed=args.seed, init_seed=args.seed,
                    length=cfg.length, schedule=cfg.schedule,
                    family=cfg.family, init_rule=cfg.init_rule,
                    oracle=cfg.oracle, out=cfg.out)
            if args.oracle and cfg.oracle == "off":
                cfg.oracle = "self"
            if args.command == "generate":
                return cmd_generate(cfg, args.out, args.quiet)
            return cmd_fit(cfg, args.data, args.out, args.quiet)
        with open(args.config) as fh:
            doc = json.load(fh)
        if args.command == "compare":
            return cmd_compare(doc, args.out, args.quiet, args.data)
        if args.seed is not None:
            doc["seed"] = args.seed
        return cmd_gradcheck(doc, args.out, args.quiet)
    except (ConfigError, ConstraintError, GuardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON in {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
