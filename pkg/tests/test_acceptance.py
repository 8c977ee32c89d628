"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Statistical gates use the stated sample sizes and tolerances. Seeds are
fixed, so every verdict is reproducible.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np

from _criteria import report
from contractive_sa.bounds import (
    add_bound_curve,
    add_ledger_for,
    condition1_min_h,
    condition2_min_h,
    mult_bound_curve,
    mult_ledger_for,
)
from contractive_sa.cli import run_experiment
from contractive_sa.core import NormSpec, StepSchedule, norm_eval
from contractive_sa.engine import affine_gaussian_problem, run_ensemble
from contractive_sa.hard_example import (
    HardExampleSpec,
    exact_cdf,
    exact_rescaled_mgf,
    find_epsilon_witness,
    hard_example_problem,
    mgf_lower_bound,
    rescaled_samples,
)
from contractive_sa.linear_sa import diagonal_instance, lyapunov_residual, scalar_instance
from contractive_sa.moreau import MoreauConfig, moreau_eval, q_learning_config
from contractive_sa.rl import (
    ISFactors,
    OffPolicyTD,
    Policy,
    QLearning,
    constant_reward_mdp,
    garnet_mdp,
    policy_values,
    tdlfa_build,
    tdlfa_problem,
)
from contractive_sa.verify import (
    audit_violations,
    check_mgf_recursion,
    check_supermartingale,
    empirical_ccdf,
    fit_tail_exponent,
)

E1 = NormSpec.euclidean(1)
MOREAU_1D = MoreauConfig(E1, E1, 1.0)
WORKERS = 4


def hard_instance(alpha: float = 3.0, *, a: float = 0.5, N: float = 1.0):
    """Hard example with ``h`` from the stepsize condition (and ``alpha_0 < 1/2``)."""
    h = max(condition1_min_h(alpha, a, N, MOREAU_1D), 2.0 * alpha * (1.0 + 1e-9))
    spec = HardExampleSpec(a, N, 1.0, StepSchedule(alpha, h))
    return spec, hard_example_problem(spec)


def additive_instance(alpha: float = 4.4, z: float = 1.0, x0: float = 1.0):
    p = affine_gaussian_problem([[0.5]], [0.0], 1.0, x0=[x0])
    h = condition2_min_h(alpha, z, 0.5, 1.0, 1.0, MOREAU_1D)
    return p, StepSchedule(alpha, h, z)


def two_by_two():
    mdp = constant_reward_mdp(2, 2, 0.9)
    return QLearning(mdp, Policy.uniform(mdp))


def mc_mean(apply, draw, x, n, seed, chunk=100_000):
    """Componentwise mean and standard error of ``apply(x, Y)`` over ``n`` draws."""
    gen = np.random.default_rng(seed)
    s1 = np.zeros(x.size)
    s2 = np.zeros(x.size)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        F = apply(np.tile(x, (m, 1)), draw(gen, m))
        s1 += F.sum(axis=0)
        s2 += (F**2).sum(axis=0)
        done += m
    mean = s1 / n
    var = np.maximum(s2 / n - mean**2, 0.0) * n / (n - 1)
    return mean, np.sqrt(var / n)


def z_scores(mean, se, exact):
    diff = np.abs(mean - exact)
    return np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 1e-12, np.inf, 0.0))


def test_criterion_1_almost_sure_envelope():
    t0 = time.time()
    spec, p = hard_instance()
    ledger = mult_ledger_for(p, MOREAU_1D, spec.schedule)
    ens = run_ensemble(p, spec.schedule, 1000, 10_000, 11, workers=WORKERS)
    audit_hard = audit_violations(ens, mult_bound_curve(ledger, 0.05, 0, "worst_case", (0, 1000)))

    ql = two_by_two()
    pq = ql.problem(noise="multiplicative")
    mq = q_learning_config(4, ql.gamma_hat)
    D0 = 2.0 * (1.0 - ql.gamma_hat * mq.u_cM / mq.l_cM)
    alpha = 3.0 / D0
    sched = StepSchedule(alpha, condition1_min_h(alpha, ql.gamma_hat, 2.0, mq))
    lq = mult_ledger_for(pq, mq, sched)
    ens_q = run_ensemble(pq, sched, 1000, 10_000, 12, workers=WORKERS)
    audit_q = audit_violations(ens_q, mult_bound_curve(lq, 0.05, 0, "worst_case", (0, 1000)))
    elapsed = time.time() - t0
    ok = audit_hard.violations == 0 and audit_q.violations == 0 and elapsed <= 120
    report("1", ok, f"violations hard={audit_hard.violations} q_learning={audit_q.violations}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_maximal_multiplicative():
    t0 = time.time()
    spec, p = hard_instance()
    ledger = mult_ledger_for(p, MOREAU_1D, spec.schedule)
    assert ledger.regime == "D>0"
    ens = run_ensemble(p, spec.schedule, 10_000, 2000, 21, workers=WORKERS)
    audit = audit_violations(ens, mult_bound_curve(ledger, 0.05, 0, "thm1_Dpos", (0, 10_000)))
    elapsed = time.time() - t0
    ok = audit.passes(0.05) and elapsed <= 300
    report("2", ok, f"violations={audit.violations} cp_upper={audit.cp_upper:.4g}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_maximal_additive():
    t0 = time.time()
    parts = []
    ok = True
    for z, alpha in ((1.0, 4.4), (0.6, 4.4)):
        p, sched = additive_instance(alpha, z)
        ledger = add_ledger_for(p, MOREAU_1D, sched)
        ens = run_ensemble(p, sched, 10_000, 2000, 31, workers=WORKERS)
        audit = audit_violations(ens, add_bound_curve(ledger, 0.05, 0, (0, 10_000)))
        ok &= audit.passes(0.05)
        parts.append(f"z={z}: violations={audit.violations} cp_upper={audit.cp_upper:.4g}")
    elapsed = time.time() - t0
    ok &= elapsed <= 300
    report("3", ok, "; ".join(parts) + f"; {elapsed:.1f}s")
    assert ok


def test_criterion_4_q_learning_bound():
    ql = two_by_two()
    p = ql.problem()
    sched = ql.default_schedule()
    ens = run_ensemble(p, sched, 10_000, 2000, 41, workers=WORKERS, track_peak_norm=True)
    curve = ql.bound_curve(sched, 0.05, 0, (0, 10_000))
    audit = audit_violations(ens, curve)
    peak = float(np.max(ens.peak_norms))
    ok = audit.passes(0.05) and peak <= ql.mdp.q_max + 1e-9
    report("4", ok, f"c_q={ql.bound_constant():.4g} violations={audit.violations} cp_upper={audit.cp_upper:.4g} "
                    f"max ||Q_k||={peak:.12g} <= {ql.mdp.q_max:.12g}")
    assert ok


def test_criterion_5_tail_dichotomy():
    t0 = time.time()
    p, sched = additive_instance(4.4, 1.0)
    ens = run_ensemble(p, sched, 1000, 100_000, 51, workers=WORKERS, record_ks=[1000])
    add_fit = fit_tail_exponent(empirical_ccdf(math.sqrt(1000 + sched.h) * ens.errors[:, 0]), seed=51)

    # alpha D = 2 with D = a + N - 1 = 0.5
    spec = HardExampleSpec(0.5, 1.0, 1.0, StepSchedule(4.0, 10.0))
    hard_fit = fit_tail_exponent(empirical_ccdf(rescaled_samples(spec, 1000, 100_000, 52, workers=WORKERS)), seed=52)

    log_mgf = [exact_rescaled_mgf(spec, k, 1.0, 2.0).log_value for k in range(10, 21)]
    increasing = bool(np.all(np.diff(log_mgf) > 0))
    wit = find_epsilon_witness(spec, 2.0)
    ks = np.unique(np.geomspace(max(wit.k_eps, 1), 1e6, 2000).astype(np.int64))
    lb = mgf_lower_bound(spec, ks, 1.0, 2.0, wit.k_eps)
    lb_max = float(np.nanmax(lb))
    elapsed = time.time() - t0
    add_ok = 1.6 <= add_fit.ci[0] and add_fit.ci[1] <= 2.4
    hard_ok = hard_fit.ci[1] < 1.5
    ok = add_ok and hard_ok and increasing and lb_max > 100 and elapsed <= 600
    report("5", ok, f"additive beta CI=({add_fit.ci[0]:.3f}, {add_fit.ci[1]:.3f}); hard beta CI=({hard_fit.ci[0]:.4f}, "
                    f"{hard_fit.ci[1]:.4f}); exact MGF increasing on [10,20]={increasing}; "
                    f"eps={wit.eps:g} k_eps={wit.k_eps} max log bound={lb_max:.4g}; {elapsed:.1f}s")
    assert ok


def test_criterion_6_moreau_suite():
    t0 = time.time()
    rng = np.random.default_rng(6)
    e5 = NormSpec.euclidean(5)
    cfg = MoreauConfig(e5, e5, 0.7)
    X = rng.standard_normal((1000, 5)) * 10 ** rng.uniform(-2, 2, (1000, 1))
    closed_gap = float(np.max(np.abs(moreau_eval(cfg, X, method="numeric") - moreau_eval(cfg, X, method="closed"))
                           / np.maximum(1.0, moreau_eval(cfg, X, method="closed"))))

    qcfg = q_learning_config(12, 0.975)
    assert qcfg.l_cs == math.exp(-0.5) and qcfg.u_cs == 1.0 and qcfg.L == qcfg.norm_s.p - 1.0
    Y = rng.standard_normal((10_000, 12)) * 10 ** rng.uniform(-3, 3, (10_000, 1))
    M = moreau_eval(qcfg, Y)
    c2 = np.asarray(norm_eval(qcfg.norm_c, Y)) ** 2
    lower = c2 / (2.0 * qcfg.u_cM**2)
    upper = c2 / (2.0 * qcfg.l_cM**2)
    inside = bool(np.all(lower <= M * (1 + 1e-12)) and np.all(M <= upper * (1 + 1e-12)))
    elapsed = time.time() - t0
    ok = closed_gap <= 1e-8 and inside and elapsed <= 120
    report("6", ok, f"closed vs numeric max gap={closed_gap:.2e}; sandwich holds on 1e4 points={inside}; {elapsed:.1f}s")
    assert ok


def test_criterion_7_linear_sa():
    mdp = garnet_mdp(8, 2, 3, 0.9, 7)
    pi = Policy.uniform(mdp)
    lfa = tdlfa_build(mdp, pi, np.eye(8))
    lfa_spec, _ = tdlfa_problem(lfa)
    specs = {"scalar": scalar_instance()[0], "diagonal": diagonal_instance()[0], "td_lfa": lfa_spec}
    parts = []
    ok = True
    for name, s in specs.items():
        res = lyapunov_residual(s.A_bar, s.P_bar)
        lam = float(np.linalg.eigvalsh(s.P_bar)[-1])
        cap = 1.0 - s.beta / (2.0 * lam)
        good = res <= 1e-10 * s.dim and s.gamma_bar_exact < 1 and s.gamma_bar_exact**2 <= cap + 1e-12
        ok &= good
        parts.append(f"{name}: residual={res:.1e} gamma={s.gamma_bar_exact:.6f} gamma^2<= {cap:.6f}")
    err = float(np.max(np.abs(lfa.theta_star - policy_values(mdp, pi))))
    ok &= err <= 1e-8
    report("7", ok, "; ".join(parts) + f"; TD-LFA theta* vs V^pi max err={err:.1e}")
    assert ok


def test_criterion_8_machinery():
    t0 = time.time()
    n = 100_000
    results = {}
    p1, sched = additive_instance(4.4, 1.0, x0=1.0)
    L1 = add_ledger_for(p1, MOREAU_1D, sched)
    p0, _ = additive_instance(4.4, 1.0, x0=0.0)
    L0 = add_ledger_for(p0, MOREAU_1D, sched)
    results["additive recursion"] = check_mgf_recursion(p1, L1, (0, 50), n, 81, workers=WORKERS)
    results["additive supermartingale"] = check_supermartingale(p1, L1, (0, 50), n, 81, workers=WORKERS)
    results["additive supermartingale at x*"] = check_supermartingale(p0, L0, (0, 50), n, 82, workers=WORKERS)
    spec, ph = hard_instance()
    Lh = mult_ledger_for(ph, MOREAU_1D, spec.schedule)
    results["multiplicative recursion"] = check_mgf_recursion(ph, Lh, (0, 50), n, 83, workers=WORKERS)
    results["multiplicative supermartingale"] = check_supermartingale(ph, Lh, (0, 50), n, 83, workers=WORKERS)
    neg_rec = check_mgf_recursion(p1, L1, (0, 50), n, 81, workers=WORKERS, lambda_scale=10.0)
    neg_sm = check_supermartingale(p0, L0, (0, 50), n, 82, workers=WORKERS, drift_scale=0.01)
    elapsed = time.time() - t0
    nominal = all(r.passed for r in results.values())
    controls = (not neg_rec.passed) and (not neg_sm.passed)
    ok = nominal and controls and elapsed <= 600
    detail = ", ".join(f"{k}={'pass' if r.passed else 'fail'}" for k, r in results.items())
    report("8", ok, f"{detail}; negative controls fail: recursion lambda x10 ({len(neg_rec.failing_ks)} ks), "
                    f"supermartingale drift x0.01 ({len(neg_sm.failing_ks)} ks); {elapsed:.1f}s")
    assert ok


def test_criterion_9_oracle_equivalence():
    n = 1_000_000
    rng = np.random.default_rng(9)
    mdp = garnet_mdp(6, 2, 3, 0.9, 1)
    pb = Policy.uniform(mdp)
    target = Policy(np.tile([0.8, 0.2], (6, 1)))
    worst = {}
    td = OffPolicyTD(mdp, pb, target, ISFactors.ratio(target, pb, 2, c_cap=1.0, rho_cap=1.0))
    Q = rng.standard_normal(mdp.n_sa)
    m, se = mc_mean(td.apply, td.draw, Q, n, 91)
    worst["offpolicy_td"] = float(np.max(z_scores(m, se, td.expected(Q))))
    ql = QLearning(mdp, pb)
    m, se = mc_mean(ql.apply, ql.draw, Q, n, 92)
    worst["q_learning"] = float(np.max(z_scores(m, se, ql.expected(Q))))
    _, lp = tdlfa_problem(tdlfa_build(mdp, pb, np.eye(6)))
    th = rng.standard_normal(6)
    m, se = mc_mean(lp.apply, lp.draw, th, n, 93)
    worst["td_lfa"] = float(np.max(z_scores(m, se, lp.expected(th[None])[0])))

    spec = HardExampleSpec(0.5, 1.0, 1.0, StepSchedule(4.0, 10.0))
    ens = run_ensemble(hard_example_problem(spec), spec.schedule, 15, 100_000, 94, workers=WORKERS, record_ks=[15])
    vals, cdf = exact_cdf(spec, 15)
    emp = np.sort(ens.errors[:, 0])
    # both CDFs are step functions on the exact atoms; compare at and just below each atom
    emp_at = np.searchsorted(emp, vals * (1 + 1e-12), side="right") / emp.size
    emp_below = np.searchsorted(emp, vals * (1 - 1e-12), side="left") / emp.size
    exact_below = np.concatenate([[0.0], cdf[:-1]])
    ks_dist = float(max(np.max(np.abs(emp_at - cdf)), np.max(np.abs(emp_below - exact_below))))
    ok = all(v <= 4.0 for v in worst.values()) and ks_dist <= 0.01
    report("9", ok, ", ".join(f"{k} max z={v:.2f}" for k, v in worst.items()) + f"; hard example KS at k=15={ks_dist:.4f}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    cfg = {
        "experiment": "audit",
        "problem": {"kind": "affine"},
        "schedule": {"alpha": 4.4, "h": "auto", "z": 1.0},
        "run": {"n": 3000, "k_max": 300, "master_seed": 5},
    }
    outs = {}
    for w in (1, 3, 8):
        res = run_experiment(cfg, workers=w, output_dir=tmp_path / f"w{w}")
        outs[w] = {f: (res.directory / f).read_bytes() for f in res.manifest["artifacts"]}
    same_files = outs[1].keys() == outs[3].keys() == outs[8].keys()
    identical = same_files and all(outs[1][f] == outs[3][f] == outs[8][f] for f in outs[1])
    q_cfg = {"experiment": "rl_demo", "run": {"n": 1500, "k_max": 200, "master_seed": 3}}
    a = run_experiment(q_cfg, workers=1, output_dir=tmp_path / "q1")
    b = run_experiment(q_cfg, workers=5, output_dir=tmp_path / "q5")
    identical &= all((a.directory / f).read_bytes() == (b.directory / f).read_bytes() for f in a.manifest["artifacts"])
    manifest = json.loads((tmp_path / "w1" / "manifest.json").read_text())
    report("10", identical, f"{len(outs[1])} artifacts bit-identical across workers 1/3/8 and Q-learning run "
                            f"across 1/5; manifest seed={manifest['seeds']['master_seed']}")
    assert identical
