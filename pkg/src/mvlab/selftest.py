"""Quick oracle batteries used by ``mvlab selftest`` and the transport-selftest experiment."""

import math

import numpy as np

from . import _backend, _fallback
from .chaos import ChaosReport
from .kernels import CATALOG, check_assumptions, make_builtin
from .transport import (
    CostSpec,
    EmpiricalMeasure,
    brute_force_wasserstein,
    dual_lower_bound,
    exact_wasserstein_eta,
    sinkhorn_wasserstein_eta,
)

# Philox4x64-10 known-answer vector: zero counter, zero key
PHILOX_KAT = (0x16554D9ECA36314C, 0xDB20FE9D672D0FDC, 0xD7E772CEE186176B, 0x7E68B68AEC7BA23B)
TOL = 1e-10


def _random_pair(rng, max_size, m=None, d=None, same_size=True):
    P = int(rng.integers(1, max_size + 1))
    Q = P if same_size else int(rng.integers(1, max_size + 1))
    m = m or int(rng.integers(1, 4))
    d = d or int(rng.integers(1, 3))
    scale = rng.choice([0.1, 1.0, 5.0])
    mu = EmpiricalMeasure(scale * rng.normal(size=(P, m, d)))
    nu = EmpiricalMeasure(scale * rng.normal(size=(Q, m, d)) + rng.normal())
    return mu, nu


def transport_battery(instances=1000, max_size=7, seed=0):
    rng = np.random.default_rng(seed)
    etas = (0.3, 0.5, 1.0)
    worst = {"oracle": 0.0, "duality": -np.inf, "symmetry": 0.0, "triangle": -np.inf,
             "jensen": -np.inf, "plan_marginal": 0.0, "sinkhorn_below_exact": -np.inf}
    for i in range(instances):
        eta = etas[i % 3]
        mu, nu = _random_pair(rng, max_size)
        cost = CostSpec(eta, mu.m, mu.d)
        ex = exact_wasserstein_eta(mu, nu, cost)
        worst["oracle"] = max(worst["oracle"], abs(ex.value - brute_force_wasserstein(mu, nu, cost)))
        worst["duality"] = max(worst["duality"], dual_lower_bound(mu, nu, cost, 64, i) - ex.value)
        worst["symmetry"] = max(worst["symmetry"], abs(exact_wasserstein_eta(nu, mu, cost).value - ex.value))
        rho = EmpiricalMeasure(rng.normal(size=(mu.size, mu.m, mu.d)))
        tri = (exact_wasserstein_eta(mu, rho, cost).value + exact_wasserstein_eta(rho, nu, cost).value)
        worst["triangle"] = max(worst["triangle"], ex.value - tri)
        plan = ex.coupling()
        worst["plan_marginal"] = max(worst["plan_marginal"], np.abs(plan.sum(1) - mu.weights).max(),
                                     np.abs(plan.sum(0) - nu.weights).max())
        if mu.m == 1:
            w1 = exact_wasserstein_eta(mu, nu, CostSpec(1.0, 1, mu.d)).value
            worst["jensen"] = max(worst["jensen"], ex.value - w1 ** eta)
        if i % 20 == 0:
            sk = sinkhorn_wasserstein_eta(mu, nu, cost)
            worst["sinkhorn_below_exact"] = max(worst["sinkhorn_below_exact"], ex.value - sk.value)
            sp = sk.plan
            worst["plan_marginal"] = max(worst["plan_marginal"], np.abs(sp.sum(1) - mu.weights).max(),
                                         np.abs(sp.sum(0) - nu.weights).max())
    # general-weight LP on unequal sizes
    for i in range(max(1, instances // 20)):
        P, Q = rng.integers(2, 8, size=2)
        wa = rng.dirichlet(np.ones(P))
        wb = rng.dirichlet(np.ones(Q))
        mu = EmpiricalMeasure(rng.normal(size=(P, 1, 1)), wa)
        nu = EmpiricalMeasure(rng.normal(size=(Q, 1, 1)), wb)
        res = exact_wasserstein_eta(mu, nu, CostSpec(0.5))
        worst["plan_marginal"] = max(worst["plan_marginal"], res.marginal_error)
    # Dirac pairs are tight
    dirac_gap = 0.0
    for i in range(20):
        x = rng.normal(size=(1, 1, 2)) * 3
        c = CostSpec(etas[i % 3], 1, 2)
        mu, nu = EmpiricalMeasure(np.zeros((1, 1, 2))), EmpiricalMeasure(x)
        dirac_gap = max(dirac_gap, abs(exact_wasserstein_eta(mu, nu, c).value
                                       - dual_lower_bound(mu, nu, c, 1, i)))
    checks = {
        "oracle_equality": worst["oracle"] <= TOL,
        "weak_duality": worst["duality"] <= TOL,
        "dirac_tightness": dirac_gap < 1e-8,
        "symmetry": worst["symmetry"] <= TOL,
        "triangle": worst["triangle"] <= TOL,
        "jensen": worst["jensen"] <= TOL,
        "plan_marginals": worst["plan_marginal"] <= 1e-8,
        "sinkhorn_above_exact": worst["sinkhorn_below_exact"] <= 1e-8,
    }
    report = ChaosReport("transport-selftest",
                         config={"instances": instances, "max_size": max_size, "seed": seed},
                         checks={k: bool(v) for k, v in checks.items()},
                         measurements={"worst": worst, "dirac_gap": dirac_gap},
                         provenance={"seed": seed})
    return report


def core_battery(seed=0):
    """Philox KAT, compiled/Python agreement, OU oracle and catalog assumption checks."""
    from .noise import brownian_increments
    from .simulate import SimConfig, run_interacting_batch

    checks, meas = {}, {}
    kat = tuple(int(v) for v in _backend.philox_raw(0, 0, 0, 0, 0, 0))
    checks["philox_known_answer"] = kat == PHILOX_KAT
    ref = np.random.Philox(counter=[6, 3, 1, 0], key=[11, 5]).random_raw(4)
    checks["philox_matches_numpy"] = bool(np.array_equal(_backend.philox_raw(11, 5, 7, 3, 1, 0), ref))
    seeds = np.array([1, 2, 3], dtype=np.uint64)
    streams = np.arange(5, dtype=np.uint64)
    checks["backends_agree"] = bool(np.array_equal(
        _backend.normals_grid(seeds, streams, 9, 0, 3), _fallback.normals_grid(seeds, streams, 9, 0, 3)))
    meas["backend"] = _backend.BACKEND
    z = brownian_increments([seed], np.arange(20000), 0, 1.0, 1).ravel()
    meas["normal_mean"], meas["normal_var"] = float(z.mean()), float(z.var())
    checks["normal_moments"] = abs(z.mean()) < 4 / math.sqrt(z.size) and abs(z.var() - 1) < 0.05
    ou = make_builtin("constant-diffusion-ou", {})
    cfg = SimConfig(N=1, dt=1e-2, T=1.0, seed=seed)
    R = 4000
    xT = run_interacting_batch(cfg, ou, np.ones((R, 1, 1)), list(range(R)))[:, 0, 0]
    mean_exact = (1 - cfg.dt) ** cfg.num_steps
    meas["ou_mean"] = float(xT.mean())
    checks["ou_mean"] = abs(xT.mean() - mean_exact) <= 4 * xT.std(ddof=1) / math.sqrt(R)
    for name in CATALOG:
        rep = check_assumptions(make_builtin(name, {}), probe_count=200, seed=seed)
        checks[f"assumptions_{name}"] = rep.all_pass
    return ChaosReport("selftest", config={"seed": seed}, checks={k: bool(v) for k, v in checks.items()},
                       measurements=meas, provenance={"seed": seed})
