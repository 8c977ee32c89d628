"""Experiment driver: JSON config in, CSV tables and JSON reports out.

Exit codes: 0 success, 2 stepsize conditions fail (override with
``--force``), 3 invalid configuration, 4 input/output failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bounds import (
    AddLedger,
    ConditionError,
    ConditionReport,
    MultLedger,
    add_bound_curve,
    add_fixed_time_curve,
    add_ledger_for,
    condition1_min_h,
    condition2_min_h,
    mult_bound_curve,
    mult_ledger_for,
    validate_conditions,
)
from .core import NormSpec, StepSchedule
from .engine import SAProblem, affine_gaussian_problem, run_ensemble
from .hard_example import (
    ENUMERATION_CAP,
    HardExampleSpec,
    exact_rescaled_mgf,
    find_epsilon_witness,
    first_exceedance,
    hard_example_problem,
    mgf_lower_bound,
)
from .linear_sa import linear_sa_from_pairs
from .moreau import MoreauConfig, choose_mu, q_learning_config
from .rl import (
    ISFactors,
    OffPolicyTD,
    Policy,
    QLearning,
    constant_reward_mdp,
    garnet_mdp,
    load_mdp,
    tdlfa_build,
    tdlfa_problem,
)
from .verify import (
    audit_violations,
    check_mgf_recursion,
    check_supermartingale,
    empirical_ccdf,
    fit_tail_exponent,
)

EXIT_OK = 0
EXIT_CONDITIONS = 2
EXIT_CONFIG = 3
EXIT_IO = 4

EXPERIMENTS = ("simulate", "bounds", "audit", "tailfit", "hard_example", "verify_machinery", "rl_demo")
TABLE_HEADER = ("k", "bound", "q05", "q50", "q95", "max")
# stepsize multiple of the smallest admissible alpha used when alpha is "auto"
AUTO_ALPHA_FACTOR = 2.2

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_VEC = {"type": "array", "items": _NUM}
_MAT = {"type": "array", "items": _VEC}
_TABLE = {"type": "array", "items": _VEC}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "problem": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"const": "hard_example"}, "a": _POS, "N": _POS, "x0": _POS},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "affine"},
                        "A": {"oneOf": [_NUM, _MAT]},
                        "b": {"oneOf": [_NUM, _VEC]},
                        "noise_scale": _POS,
                        "x0": {"oneOf": [_NUM, _VEC]},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "A", "b"],
                    "properties": {
                        "kind": {"const": "linear_sa"},
                        "A": {"type": "array", "items": _MAT, "minItems": 1},
                        "b": {"type": "array", "items": _VEC, "minItems": 1},
                        "probs": _VEC,
                        "x0": _VEC,
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "mdp"},
                        "source": {
                            "type": "object",
                            "additionalProperties": False,
                            "properties": {
                                "file": {"type": "string"},
                                "garnet": {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "required": ["n_states", "n_actions", "branching", "gamma", "seed"],
                                    "properties": {
                                        "n_states": _INT1,
                                        "n_actions": _INT1,
                                        "branching": _INT1,
                                        "gamma": _POS,
                                        "seed": _INT0,
                                    },
                                },
                                "constant_reward": {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "properties": {"n_states": _INT1, "n_actions": _INT1, "gamma": _POS, "reward": _NUM},
                                },
                            },
                            "minProperties": 1,
                            "maxProperties": 1,
                        },
                        "algorithm": {"enum": ["q_learning", "offpolicy_td", "td_lfa"]},
                        "noise": {"enum": ["additive", "multiplicative"]},
                        "behavior": _TABLE,
                        "target": _TABLE,
                        "n_step": _INT1,
                        "c_cap": _POS,
                        "rho_cap": _POS,
                        "features": {"oneOf": [{"const": "identity"}, _MAT]},
                    },
                },
            ]
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"oneOf": [_POS, {"const": "auto"}]},
                "h": {"oneOf": [{"type": "number", "minimum": 1}, {"const": "auto"}]},
                "z": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _INT1,
                "k_max": _INT1,
                "K": _INT0,
                "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "master_seed": _INT0,
                "variants": {"type": "array", "items": {"type": "string"}},
                "k_tail": _INT1,
                "n_boot": _INT0,
                "lambda": _POS,
                "beta_tilde": _POS,
                "mgf_k_max": {"type": "integer", "minimum": 0, "maximum": ENUMERATION_CAP},
                "bound_k_max": _INT1,
                "check_k_max": _INT1,
                "negative_controls": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "uniqueItems": True},
            },
        },
    },
}

_PROBLEM_DEFAULTS = {
    "hard_example": {"a": 0.5, "N": 1.0, "x0": 1.0},
    "affine": {"A": 0.5, "b": 0.0, "noise_scale": 1.0, "x0": 1.0},
    "linear_sa": {},
    "mdp": {
        "source": {"constant_reward": {}},
        "algorithm": "q_learning",
        "noise": "additive",
        "n_step": 1,
        "c_cap": 1.0,
        "rho_cap": 1.0,
        "features": "identity",
    },
}

_EXPERIMENT_DEFAULTS = {
    "simulate": {"problem": {"kind": "hard_example"}, "run": {"n": 1000, "k_max": 1000}},
    "bounds": {"problem": {"kind": "hard_example"}, "run": {"k_max": 100_000}},
    "audit": {"problem": {"kind": "hard_example"}, "run": {"n": 2000, "k_max": 10_000}},
    "tailfit": {"problem": {"kind": "affine"}, "run": {"n": 100_000, "k_max": 1000}},
    "hard_example": {
        "problem": {"kind": "hard_example"},
        "schedule": {"alpha": 4.4, "h": "auto"},
        "run": {"n": 1000, "k_max": 1000},
    },
    "verify_machinery": {"problem": {"kind": "affine"}, "run": {"n": 100_000, "check_k_max": 50}},
    "rl_demo": {"problem": {"kind": "mdp"}, "run": {"n": 2000, "k_max": 10_000}},
}

_RUN_DEFAULTS = {
    "n": 1000,
    "k_max": 1000,
    "K": 0,
    "delta": 0.05,
    "master_seed": 0,
    "n_boot": 200,
    "lambda": 1.0,
    "beta_tilde": 2.0,
    "mgf_k_max": 20,
    "bound_k_max": 1_000_000,
    "check_k_max": 50,
    "negative_controls": False,
}


class ConfigError(ValueError):
    """Configuration is malformed or describes an invalid instance."""


class OutputError(OSError):
    """A file could not be read or written."""


# configuration --------------------------------------------------------------------


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(doc) -> None:
    """Raise :class:`ConfigError` unless ``doc`` matches the config schema."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def resolve_config(doc: dict) -> dict:
    """Validate and fill defaults; the result is what the manifest records."""
    validate_config(doc)
    exp = doc["experiment"]
    out = _merge({"run": _RUN_DEFAULTS, "schedule": {"alpha": "auto", "h": "auto", "z": 1.0},
                  "output": {"directory": "out", "formats": ["csv", "json"]}}, _EXPERIMENT_DEFAULTS[exp])
    if "problem" in doc and doc["problem"].get("kind") != out["problem"]["kind"]:
        out["problem"] = {}
    out = _merge(out, doc)
    user_problem = doc.get("problem", {})
    out["problem"] = _merge(_PROBLEM_DEFAULTS[out["problem"]["kind"]], out["problem"])
    if "source" in user_problem:
        out["problem"]["source"] = copy.deepcopy(user_problem["source"])
    if "k_tail" not in out["run"]:
        out["run"]["k_tail"] = out["run"]["k_max"]
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OutputError(f"cannot read config {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


# instances ---------------------------------------------------------------------------


@dataclass
class Instance:
    """A problem resolved from the config with its schedule and constants."""

    problem: SAProblem
    moreau: MoreauConfig
    schedule: StepSchedule
    ledger: MultLedger | AddLedger | None
    report: ConditionReport
    hard: HardExampleSpec | None = None
    qlearning: QLearning | None = None
    extra: dict = field(default_factory=dict)


def _mdp(cfg: dict):
    (kind, args), = cfg["source"].items()
    if kind == "file":
        try:
            return load_mdp(args)
        except OSError as exc:
            raise OutputError(f"cannot read MDP file {args}: {exc}") from exc
    if kind == "garnet":
        return garnet_mdp(args["n_states"], args["n_actions"], args["branching"], args["gamma"], args["seed"])
    return constant_reward_mdp(**args)


def _euclid_moreau(norm: NormSpec) -> MoreauConfig:
    return MoreauConfig(norm, norm, 1.0)


def _schedule_mult(p: SAProblem, moreau: MoreauConfig, sched: dict, *, alpha0_below: float | None = None):
    z = float(sched["z"])
    alpha = sched["alpha"]
    if alpha == "auto":
        gt = p.gamma_c * moreau.u_cM / moreau.l_cM
        alpha = AUTO_ALPHA_FACTOR * 2.0 / (2.0 * (1.0 - gt))
    h = sched["h"]
    if h == "auto":
        h = condition1_min_h(alpha, p.gamma_c, p.noise.sigma, moreau, z)
        if alpha0_below is not None:
            h = max(h, (alpha / alpha0_below) ** (1.0 / z) * (1.0 + 1e-9))
    return StepSchedule(float(alpha), float(h), z)


def _schedule_add(p: SAProblem, moreau: MoreauConfig, sched: dict):
    z = float(sched["z"])
    alpha = sched["alpha"]
    if alpha == "auto":
        gt = p.gamma_c * moreau.u_cM / moreau.l_cM
        alpha = AUTO_ALPHA_FACTOR * 2.0 / (2.0 * (1.0 - gt))
    h = sched["h"]
    if h == "auto":
        nz = p.noise
        h = condition2_min_h(alpha, z, p.gamma_c, nz.sigma_bar, nz.c_d, moreau)
    return StepSchedule(float(alpha), float(h), z)


def _finish(p, moreau, schedule, **kw) -> Instance:
    if p.noise.kind == "multiplicative":
        ledger = mult_ledger_for(p, moreau, schedule)
    else:
        ledger = add_ledger_for(p, moreau, schedule)
    return Instance(p, moreau, schedule, ledger, validate_conditions(ledger), **kw)


def build_instance(cfg: dict) -> Instance:
    """Problem, Moreau setup, schedule and ledger from a resolved config.

    The hard_example experiment only needs ``alpha_0 < 1/2``: its automatic
    ``h`` is the smallest such value and the remaining stepsize clauses are
    reported without gating the run.
    """
    prob, sched = cfg["problem"], cfg["schedule"]
    kind = prob["kind"]
    try:
        if kind == "hard_example":
            e1 = NormSpec.euclidean(1)
            moreau = _euclid_moreau(e1)
            probe = hard_example_problem(HardExampleSpec(prob["a"], prob["N"], prob["x0"], StepSchedule(1.0, 10.0)))
            if cfg["experiment"] == "hard_example":
                alpha = sched["alpha"] if sched["alpha"] != "auto" else 2.2 / (1.0 - prob["a"])
                z = float(sched["z"])
                h = sched["h"] if sched["h"] != "auto" else max(1.0 + 1e-6, (2.0 * alpha) ** (1.0 / z) * (1.0 + 1e-9))
                schedule = StepSchedule(float(alpha), float(h), z)
            else:
                schedule = _schedule_mult(probe, moreau, sched, alpha0_below=0.5)
            spec = HardExampleSpec(prob["a"], prob["N"], prob["x0"], schedule)
            inst = _finish(hard_example_problem(spec), moreau, schedule, hard=spec)
            if cfg["experiment"] == "hard_example":
                inst.report = ConditionReport(tuple(replace(it, gating=False) for it in inst.report.items))
            return inst
        if kind == "affine":
            A = np.atleast_2d(np.asarray(prob["A"], dtype=float))
            d = A.shape[0]
            b = np.broadcast_to(np.asarray(prob["b"], dtype=float), (d,))
            x0 = np.broadcast_to(np.asarray(prob["x0"], dtype=float), (d,))
            p = affine_gaussian_problem(A, b, prob["noise_scale"], x0=x0)
            moreau = _euclid_moreau(p.norm_c)
            return _finish(p, moreau, _schedule_add(p, moreau, sched))
        if kind == "linear_sa":
            spec, p = linear_sa_from_pairs(prob["A"], prob["b"], prob.get("probs"), x0=prob.get("x0"))
            moreau = _euclid_moreau(p.norm_c)
            return _finish(p, moreau, _schedule_mult(p, moreau, sched), extra={"linear_sa": spec.describe()})
        return _mdp_instance(prob, sched)
    except (ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, (ConfigError, ConditionError)):
            raise
        raise ConfigError(f"invalid problem: {exc}") from exc


def _mdp_instance(prob: dict, sched: dict) -> Instance:
    mdp = _mdp(prob)
    behavior = Policy(prob["behavior"]) if "behavior" in prob else Policy.uniform(mdp)
    algo = prob["algorithm"]
    if algo == "q_learning":
        ql = QLearning(mdp, behavior)
        p = ql.problem(noise=prob["noise"])
        moreau = q_learning_config(mdp.n_sa, ql.gamma_hat)
        alpha = None if sched["alpha"] == "auto" else sched["alpha"]
        schedule = ql.default_schedule(alpha)
        if sched["h"] != "auto" or sched["z"] != 1:
            schedule = StepSchedule(schedule.alpha, schedule.h if sched["h"] == "auto" else sched["h"], sched["z"])
        if p.noise.kind == "multiplicative":
            ledger = mult_ledger_for(p, moreau, schedule)
        else:
            ledger = add_ledger_for(p, moreau, schedule)
        return Instance(p, moreau, schedule, ledger, ql.conditions(schedule), qlearning=ql)
    if algo == "offpolicy_td":
        target = Policy(prob["target"]) if "target" in prob else behavior
        factors = ISFactors.ratio(target, behavior, prob["n_step"], c_cap=prob["c_cap"], rho_cap=prob["rho_cap"])
        p = OffPolicyTD(mdp, behavior, target, factors).problem()
        d = mdp.n_sa
        norm_s = NormSpec.p_norm(d, max(2.0, 2.0 * math.log(d)))
        moreau = MoreauConfig(p.norm_c, norm_s, choose_mu(p.norm_c, norm_s, p.gamma_c))
        return _finish(p, moreau, _schedule_mult(p, moreau, sched))
    Phi = np.eye(mdp.n_states) if prob["features"] == "identity" else np.asarray(prob["features"], dtype=float)
    spec, p = tdlfa_problem(tdlfa_build(mdp, behavior, Phi))
    moreau = _euclid_moreau(p.norm_c)
    return _finish(p, moreau, _schedule_mult(p, moreau, sched), extra={"linear_sa": spec.describe()})


# curves --------------------------------------------------------------------------


def default_variants(inst: Instance) -> list[str]:
    if inst.qlearning is not None and isinstance(inst.ledger, AddLedger):
        return ["q_learning"]
    L = inst.ledger
    if isinstance(L, AddLedger):
        return ["thm2", "fixed_time_add"]
    return {"D>0": ["worst_case", "thm1_Dpos", "thm1_prime"], "D=0": ["worst_case", "thm1_D0"]}.get(
        L.regime, ["worst_case"]
    )


def bound_curve(inst: Instance, variant: str, delta: float, K: int, k_range, *, force: bool):
    """One named curve for the instance; values bound ``||x_k - x*||_c^2``."""
    enforce = not force
    if variant == "q_learning":
        if inst.qlearning is None:
            raise ConfigError("the q_learning curve needs a Q-learning problem")
        return inst.qlearning.bound_curve(inst.schedule, delta, K, k_range, enforce_conditions=enforce)
    L = inst.ledger
    if isinstance(L, AddLedger):
        if variant in ("thm2", "thm2_ville"):
            deriv = "ville" if variant == "thm2_ville" else "telescoping"
            return add_bound_curve(L, delta, K, k_range, derivation=deriv, enforce_conditions=enforce)
        if variant == "fixed_time_add":
            return add_fixed_time_curve(L, delta, k_range, enforce_conditions=enforce)
    elif variant in ("worst_case", "thm1_D0", "thm1_Dpos", "thm1_prime", "fixed_time_mult"):
        return mult_bound_curve(L, delta, K, variant, k_range, enforce_conditions=enforce)
    raise ConfigError(f"variant {variant!r} does not apply to this problem")


# output -----------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else f"{v:.17g}"


class Writer:
    """Single writer for every artifact of a run."""

    def __init__(self, directory: Path, formats) -> None:
        self.dir = Path(directory)
        self.formats = set(formats)
        self.written: list[str] = []
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputError(f"cannot create {self.dir}: {exc}") from exc

    def _open(self, name: str):
        try:
            return open(self.dir / name, "w", newline="")
        except OSError as exc:
            raise OutputError(f"cannot write {self.dir / name}: {exc}") from exc

    def table(self, name: str, header, columns) -> None:
        if "csv" not in self.formats:
            return
        n = len(columns[0])
        with self._open(name) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(n):
                w.writerow([str(int(columns[0][i]))] + [_fmt(c[i]) if c is not None else "" for c in columns[1:]])
        self.written.append(name)

    def report(self, name: str, payload: dict, *, always: bool = False) -> None:
        if not always and "json" not in self.formats:
            return
        with self._open(name) as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(name)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def read_table(path) -> dict[str, np.ndarray]:
    """Parse a table written by :class:`Writer`; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [[] for _ in header]
    return {h: np.array([float(x) if x != "" else math.nan for x in c]) for h, c in zip(header, cols)}


def envelope_columns(ens, ks, bound_values=None):
    """``k, bound, q05, q50, q95, max`` over squared errors of non-faulted runs."""
    ok = ens.fault_steps < 0
    sel = np.searchsorted(ens.ks, ks)
    sq = ens.errors[ok][:, sel] ** 2
    if sq.shape[0] == 0:
        q = np.full((3, len(ks)), np.nan)
        mx = np.full(len(ks), np.nan)
    else:
        q = np.quantile(sq, (0.05, 0.5, 0.95), axis=0)
        mx = sq.max(axis=0)
    return [np.asarray(ks), bound_values, q[0], q[1], q[2], mx]


# experiments ------------------------------------------------------------------------


def _ks_between(lo: int, hi: int) -> tuple[int, int]:
    return (int(lo), int(hi))


def _simulate(inst: Instance, run: dict, workers: int, **kw):
    return run_ensemble(inst.problem, inst.schedule, run["k_max"], run["n"], run["master_seed"], workers=workers, **kw)


def _curves(inst, run, force, k_hi):
    variants = run.get("variants") or default_variants(inst)
    return {v: bound_curve(inst, v, run["delta"], run["K"], _ks_between(run["K"], k_hi), force=force) for v in variants}


def exp_simulate(inst, run, w: Writer, workers, force):
    ens = _simulate(inst, run, workers)
    ks = np.arange(run["K"], run["k_max"] + 1)
    curves = _curves(inst, run, force, run["k_max"])
    v0 = next(iter(curves))
    w.table("envelope.csv", TABLE_HEADER, envelope_columns(ens, ks, curves[v0].values))
    return {"primary_variant": v0, "faults": int(ens.faults.size)}


def exp_bounds(inst, run, w: Writer, workers, force):
    curves = _curves(inst, run, force, run["k_max"])
    out = {}
    for v, c in curves.items():
        w.table(f"curve_{v}.csv", TABLE_HEADER, [c.ks, c.values, None, None, None, None])
        out[v] = c.describe()
    return {"curves": out}


def exp_audit(inst, run, w: Writer, workers, force):
    ens = _simulate(inst, run, workers, track_peak_norm=inst.qlearning is not None)
    curves = _curves(inst, run, force, run["k_max"])
    audits = {}
    for v, c in curves.items():
        a = audit_violations(ens, c)
        audits[v] = {**a.as_dict(), "passes": a.passes(run["delta"]) if c.delta is not None else a.violations == 0}
        w.table(f"curve_{v}.csv", TABLE_HEADER, envelope_columns(ens, c.ks, c.values))
    out = {"audits": audits}
    if ens.peak_norms is not None:
        q_max = inst.qlearning.mdp.q_max
        out["peak_norm"] = {"max": float(np.max(ens.peak_norms)), "bound": q_max,
                            "passes": bool(np.max(ens.peak_norms) <= q_max + 1e-9)}
    w.report("audit.json", out)
    return out


def exp_tailfit(inst, run, w: Writer, workers, force):
    k = run["k_tail"]
    s = inst.schedule
    ens = run_ensemble(inst.problem, s, k, run["n"], run["master_seed"], workers=workers, record_ks=[k])
    samples = (k + s.h) ** (s.z / 2.0) * ens.errors[ens.fault_steps < 0, 0]
    cc = empirical_ccdf(samples)
    fit = fit_tail_exponent(cc, n_boot=run["n_boot"], seed=run["master_seed"])
    idx = np.unique(np.linspace(0, cc.values.size - 1, min(2000, cc.values.size)).astype(np.int64))
    if "csv" in w.formats:
        with w._open("ccdf.csv") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(("epsilon", "survival"))
            for i in idx:
                cw.writerow((_fmt(cc.values[i]), _fmt(cc.survival[i])))
        w.written.append("ccdf.csv")
    out = {"k": k, "n_samples": int(samples.size), "fit": fit.as_dict()}
    w.report("tailfit.json", out)
    return out


def exp_hard_example(inst, run, w: Writer, workers, force):
    spec = inst.hard
    if spec is None:
        raise ConfigError("the hard_example experiment needs the hard_example problem")
    lam, bt = run["lambda"], run["beta_tilde"]
    ks_exact = np.arange(0, run["mgf_k_max"] + 1)
    log_mgf = np.array([exact_rescaled_mgf(spec, int(k), lam, bt).log_value for k in ks_exact])
    wit = find_epsilon_witness(spec, bt)
    out = {"lambda": lam, "beta_tilde": bt, "witness": None}
    lower_exact = np.full(ks_exact.size, np.nan)
    if wit is not None:
        kb = np.unique(np.concatenate([np.geomspace(max(wit.k_eps, 1), run["bound_k_max"], 400).astype(np.int64), [wit.k_eps]]))
        lb = mgf_lower_bound(spec, kb, lam, bt, wit.k_eps, beta_prime=None if spec.schedule.z == 1 else bt / 2.0)
        ok = ks_exact >= wit.k_eps
        if np.any(ok):
            lower_exact[ok] = mgf_lower_bound(spec, ks_exact[ok], lam, bt, wit.k_eps,
                                              beta_prime=None if spec.schedule.z == 1 else bt / 2.0)
        w.table("mgf_lower_bound.csv", ("k", "log_lower_bound"), [kb, lb])
        out["witness"] = {"eps": wit.eps, "k_eps": wit.k_eps, "first_k_log_bound_above_100": first_exceedance(lb, kb, 100.0)}
    w.table("mgf_exact.csv", ("k", "log_mgf", "log_lower_bound"), [ks_exact, log_mgf, lower_exact])
    tail = log_mgf[ks_exact >= 10]
    out["exact_increasing_from_k10"] = bool(tail.size > 1 and np.all(np.diff(tail) > 0))
    ens = _simulate(inst, run, workers)
    ks = np.arange(0, run["k_max"] + 1)
    wc = mult_bound_curve(inst.ledger, run["delta"], 0, "worst_case", _ks_between(0, run["k_max"]))
    w.table("envelope.csv", TABLE_HEADER, envelope_columns(ens, ks, wc.values))
    sq = ens.errors[ens.fault_steps < 0] ** 2
    out["worst_case_violations"] = int(np.sum(np.any(sq > wc.values * (1 + 1e-9) + 1e-9, axis=1)))
    w.report("hard_example.json", out)
    return out


def exp_verify_machinery(inst, run, w: Writer, workers, force):
    rng = (0, run["check_k_max"])
    kw = dict(workers=workers, enforce_conditions=not force)
    checks = [("mgf_recursion", check_mgf_recursion, {}), ("supermartingale", check_supermartingale, {})]
    if run["negative_controls"]:
        checks += [
            ("mgf_recursion_lambda_x10", check_mgf_recursion, {"lambda_scale": 10.0}),
            ("supermartingale_drift_x0.01", check_supermartingale, {"drift_scale": 0.01}),
        ]
    out = {}
    for name, fn, extra in checks:
        r = fn(inst.problem, inst.ledger, rng, run["n"], run["master_seed"], **kw, **extra)
        out[name] = r.as_dict()
        w.table(f"machinery_{name}.csv", ("k", "lhs", "rhs", "se", "slack"), [r.ks, r.lhs, r.rhs, r.se, r.slack])
    w.report("machinery.json", out)
    return out


def exp_rl_demo(inst, run, w: Writer, workers, force):
    if inst.qlearning is None:
        raise ConfigError("rl_demo runs Q-learning; set problem.algorithm to q_learning")
    run = dict(run, variants=run.get("variants") or ["q_learning"])
    return exp_audit(inst, run, w, workers, force)


RECIPES = {
    "simulate": exp_simulate,
    "bounds": exp_bounds,
    "audit": exp_audit,
    "tailfit": exp_tailfit,
    "hard_example": exp_hard_example,
    "verify_machinery": exp_verify_machinery,
    "rl_demo": exp_rl_demo,
}


@dataclass
class RunResult:
    status: int
    directory: Path
    manifest: dict
    summary: dict


def run_experiment(config: dict, *, workers: int = 1, force: bool = False, seed: int | None = None,
                   output_dir=None) -> RunResult:
    """Run one experiment and write its artifacts.

    Raises :class:`ConfigError`, :class:`OutputError` or
    :class:`~contractive_sa.bounds.ConditionError`; :func:`main` maps them
    to exit codes.
    """
    cfg = resolve_config(config)
    if seed is not None:
        cfg["run"]["master_seed"] = int(seed)
    directory = Path(output_dir or os.environ.get("OUTPUT_DIR") or cfg["output"]["directory"])
    inst = build_instance(cfg)
    manifest = {
        "package_version": __version__,
        "config": cfg,
        "problem": inst.problem.describe(),
        "schedule": inst.schedule.describe(),
        "ledger": None if inst.ledger is None else inst.ledger.describe(),
        "conditions": inst.report.as_dict(),
        "forced": bool(force and not inst.report.passed),
        "seeds": {"master_seed": cfg["run"]["master_seed"], "streams": [0, cfg["run"].get("n", 1) - 1]},
        **({"q_learning": {"c_q": inst.qlearning.bound_constant(), "gamma_hat": inst.qlearning.gamma_hat,
                           "d_min": inst.qlearning.d_min}} if inst.qlearning is not None else {}),
        **inst.extra,
    }
    if not inst.report.passed and not force:
        raise ConditionError(inst.report)
    w = Writer(directory, cfg["output"]["formats"])
    summary = RECIPES[cfg["experiment"]](inst, cfg["run"], w, workers, force)
    manifest["summary"] = summary
    manifest["artifacts"] = sorted(w.written + ["manifest.json"])
    w.report("manifest.json", manifest, always=True)
    return RunResult(EXIT_OK, directory, manifest, summary)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="contractive-sa", description=__doc__.splitlines()[0])
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("config", nargs="?", help="JSON config; defaults apply when omitted")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--force", action="store_true", help="run even when stepsize conditions fail")
    parser.add_argument("--output", default=None, help="output directory (overrides config and OUTPUT_DIR)")
    args = parser.parse_args(argv)
    try:
        doc = {} if args.config is None else load_config(args.config)
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.get("experiment", args.experiment) != args.experiment:
            raise ConfigError(f"config is for {doc['experiment']!r}, not {args.experiment!r}")
        doc = {**doc, "experiment": args.experiment}
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        res = run_experiment(doc, workers=args.workers, force=args.force, seed=args.seed, output_dir=args.output)
    except ConditionError as exc:
        print(f"stepsize conditions fail: {exc}", file=sys.stderr)
        return EXIT_CONDITIONS
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    print(json.dumps(_jsonable(res.summary), sort_keys=True))
    print(f"artifacts in {res.directory}")
    return EXIT_OK
