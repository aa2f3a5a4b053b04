import math

import numpy as np
import pytest
from dataclasses import replace

from mvlab.io import read_point_cloud, write_bundle, write_flow
from mvlab.kernels import make_builtin
from mvlab.noise import brownian_increments
from mvlab.simulate import (
    EnsembleState,
    GaussianLaw,
    SimConfig,
    SimulationError,
    deterministic_flow,
    run_decoupled,
    run_interacting,
    run_limit_copies,
    solve_meanfield_flow,
    step_interacting,
)

OU = make_builtin("constant-diffusion-ou", {"s": 1.0})


def test_ou_step_without_noise():
    out = step_interacting(EnsembleState(0.0, [[1.0]]), OU, 0.01, [[0.0]])
    assert out.states[0, 0] == pytest.approx(0.99)
    assert out.t == pytest.approx(0.01)


def test_attraction_preserves_mean_without_noise():
    spec = make_builtin("linear-attraction", {"a": 0.0, "c": 1.0, "eps": 0.0})
    x = np.array([[-1.0], [0.5], [2.0]])
    out = step_interacting(EnsembleState(0.0, x), spec, 0.1, np.zeros((3, 1)))
    assert out.states.sum() == pytest.approx(x.sum(), abs=1e-14)
    assert out.states[0, 0] == pytest.approx(-1.0 + 0.1 * (0.5 + 1.0))


def test_kinetic_free_transport():
    spec = make_builtin("kinetic-linear", {"a": 0.0, "g": 0.0, "c": 0.0})
    out = step_interacting(EnsembleState(0.0, [[0.0, 1.0]]), spec, 0.1, [[0.0]])
    assert out.states[0] == pytest.approx([0.1, 1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(N=0)
    with pytest.raises(ValueError):
        SimConfig(N=2, dt=0.3, T=1.0)
    with pytest.raises(ValueError):
        SimConfig(N=2, dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(N=2, kind="third-order")
    cfg = SimConfig(N=2, dt=0.1, T=1.0, snapshot_stride=3)
    assert cfg.num_steps == 10
    assert cfg.snapshot_steps.tolist() == [0, 3, 6, 9, 10]


def test_config_model_mismatch():
    with pytest.raises(ValueError):
        run_interacting(SimConfig(N=2, d=2), OU, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        run_interacting(SimConfig(N=3), OU, np.zeros((2, 1)))


def test_ou_mean_within_four_standard_errors():
    cfg = SimConfig(N=10 ** 4, dt=0.01, T=1.0, seed=3)
    out = run_interacting(cfg, OU, np.ones((cfg.N, 1)))
    xT = out.terminal[:, 0]
    mean = (1 - cfg.dt) ** cfg.num_steps
    var = (1 - (1 - cfg.dt) ** (2 * cfg.num_steps)) / (1 - (1 - cfg.dt) ** 2) * cfg.dt
    assert abs(xT.mean() - mean) <= 4 * math.sqrt(var / cfg.N)


def test_determinism_and_snapshots():
    spec = make_builtin("linear-attraction", {"eps": 0.3})
    cfg = SimConfig(N=50, dt=0.01, T=0.2, seed=9, snapshot_stride=5)
    x0 = GaussianLaw(1.0, 0.5)(np.random.default_rng(0), 50)
    a = run_interacting(cfg, spec, x0)
    b = run_interacting(cfg, spec, x0)
    assert np.array_equal(a.states, b.states)
    assert a.grid == pytest.approx([0, 0.05, 0.1, 0.15, 0.2])
    pw = run_interacting(replace(cfg, interaction="pairwise"), spec, x0)
    assert np.allclose(pw.states, a.states, atol=1e-10)


def test_exchangeability():
    spec = make_builtin("smooth-bounded", {"A": 1.0, "B": 1.0})
    cfg = SimConfig(N=7, dt=0.01, T=0.1, seed=2)
    x0 = np.random.default_rng(1).normal(size=(7, 1))
    perm = np.random.default_rng(2).permutation(7)
    a = run_interacting(cfg, spec, x0).terminal
    b = run_interacting(cfg, spec, x0[perm], stream_ids=perm).terminal
    assert np.allclose(a[perm], b, atol=1e-12)


def test_strong_error_shrinks_with_dt():
    spec = make_builtin("linear-attraction", {"eps": 0.5, "c": 1.0})
    N, T, fine = 200, 0.5, 256
    x0 = np.random.default_rng(0).normal(size=(N, 1))
    incs = np.stack([brownian_increments([11], np.arange(N), k, T / fine, 1)[0] for k in range(fine)])

    def solve(steps):
        block = fine // steps
        st = EnsembleState(0.0, x0)
        for k in range(steps):
            st = step_interacting(st, spec, T / steps, incs[k * block:(k + 1) * block].sum(axis=0))
        return st.states

    ref = solve(fine)
    errs = [np.sqrt(np.mean((solve(s) - ref) ** 2)) for s in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]


def _ou_flow(M=4000, T=0.5, dt=0.01, seed=0):
    cfg = SimConfig(N=1, dt=dt, T=T, seed=seed)
    return cfg, solve_meanfield_flow(cfg, OU, GaussianLaw(2.0, 0.3), M, 0.05)


def test_ou_flow_single_iteration_and_mean():
    cfg, flow = _ou_flow()
    assert flow.converged and flow.iterations == 1
    assert flow.support.shape == (cfg.num_steps + 1, 4000, 1)
    m = flow.support[-1].mean()
    se = flow.support[-1].std() / math.sqrt(4000)
    assert abs(m - 2.0 * (1 - cfg.dt) ** cfg.num_steps) <= 4 * se


def test_flow_tolerances_and_errors():
    spec = make_builtin("linear-attraction", {"a": 0.5, "c": 2.0, "eps": 0.3})
    cfg = SimConfig(N=1, dt=0.01, T=0.5)
    law = GaussianLaw(1.0, 0.5)
    loose = solve_meanfield_flow(cfg, spec, law, 500, 1e6)
    assert loose.iterations == 1 and loose.converged
    with pytest.raises(ValueError):
        solve_meanfield_flow(cfg, spec, law, 1, 0.1)
    with pytest.warns(RuntimeWarning):
        tight = solve_meanfield_flow(cfg, spec, law, 500, 1e-12, max_iter=2)
    assert not tight.converged and tight.iterations == 2
    flow = solve_meanfield_flow(cfg, spec, law, 2000, 0.05)
    assert flow.converged and flow.history[-1] <= 0.05
    assert flow.history == sorted(flow.history, reverse=True)


def test_limit_copies_match_particles_when_measure_irrelevant():
    cfg, flow = _ou_flow()
    cfg = SimConfig(N=30, dt=0.01, T=0.5, seed=4)
    x0 = np.random.default_rng(0).normal(size=(30, 1))
    parts = run_interacting(cfg, OU, x0)
    copies = run_limit_copies(cfg, OU, flow, x0, paired=parts)
    assert np.array_equal(parts.states, copies.states)
    assert np.all(copies.running_sup_dev == 0)
    indep = run_limit_copies(cfg, OU, flow, x0, share_noise_with_particles=False)
    assert not np.allclose(indep.terminal, parts.terminal)


def test_limit_copies_grid_mismatch():
    _, flow = _ou_flow()
    with pytest.raises(ValueError):
        run_limit_copies(SimConfig(N=3, dt=0.02, T=0.5), OU, flow, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        run_limit_copies(SimConfig(N=3, dt=0.01, T=1.0), OU, flow, np.zeros((3, 1)))


def test_decoupled_one_step_is_euler():
    spec = make_builtin("linear-attraction", {"eps": 0.4})
    cfg = SimConfig(N=1, dt=0.01, T=0.1)
    flow = solve_meanfield_flow(cfg, spec, GaussianLaw(0.5, 1.0), 500, 0.05)
    x = np.array([0.7])
    out = run_decoupled(0.02, 0.03, x, flow, spec, 5, seed=8)
    ybar = flow.support[2].mean()
    mod = 1 + 0.4 * math.sin(x[0]) * np.mean(np.sin(flow.support[2][:, 0]))
    dW = brownian_increments([8], np.arange(5), 2, 0.01, 1)[0, :, 0]
    drift = -1.0 * x[0] + 0.5 * (ybar - x[0])
    assert out[:, 0] == pytest.approx(x[0] + drift * 0.01 + mod * dW, abs=1e-12)


def test_decoupled_ou_moments():
    _, flow = _ou_flow()
    out = run_decoupled(0.0, 0.5, [1.0], flow, OU, 20000, seed=1)[:, 0]
    mean = (1 - 0.01) ** 50
    var = (1 - (1 - 0.01) ** 100) / (1 - 0.99 ** 2) * 0.01
    assert abs(out.mean() - mean) <= 4 * math.sqrt(var / 20000)
    assert abs(out.var() - var) <= 0.05 * var
    with pytest.raises(ValueError):
        run_decoupled(0.3, 0.3, [1.0], flow, OU, 10, seed=1)


def test_deterministic_flow():
    _, flow = _ou_flow()
    assert deterministic_flow(0.1, 0.1, [1.3], flow, OU) == pytest.approx([1.3])
    assert deterministic_flow(0.0, 0.5, [1.0], flow, OU) == pytest.approx([math.exp(-0.5)], abs=1e-6)
    kin = make_builtin("kinetic-linear", {"a": 0.0, "g": 0.0, "c": 0.0})
    cfg = SimConfig(N=1, kind="kinetic", dt=0.01, T=0.5)
    kflow = solve_meanfield_flow(cfg, kin, GaussianLaw(0.0, 1.0, q=2), 200, 1.0)
    assert deterministic_flow(0.0, 0.5, [0.2, 1.0], kflow, kin) == pytest.approx([0.7, 1.0], abs=1e-12)


def test_non_finite_state_reported():
    def drift(t, x, y):
        return np.broadcast_to(1e300 * x ** 3, np.broadcast_shapes(x.shape, y.shape)).copy()

    spec = replace(OU, name="blow-up", drift_kernel=drift, model_code=None)
    cfg = SimConfig(N=2, dt=0.1, T=1.0)
    with pytest.raises(SimulationError, match="particle"), np.errstate(over="ignore", invalid="ignore"):
        run_interacting(cfg, spec, np.ones((2, 1)))


def test_io_round_trip(tmp_path):
    cfg = SimConfig(N=5, dt=0.01, T=0.05, seed=1)
    b = run_interacting(cfg, OU, np.random.default_rng(0).normal(size=(5, 1)))
    write_bundle(tmp_path / "p.csv", b)
    assert np.array_equal(read_point_cloud(tmp_path / "p.csv"), b.terminal)
    assert np.array_equal(read_point_cloud(tmp_path / "p.csv", time=b.grid[2]), b.states[2])
    _, flow = _ou_flow(M=50)
    write_flow(tmp_path / "f.csv", flow, stride=10)
    assert np.array_equal(read_point_cloud(tmp_path / "f.csv", time=flow.grid[10]), flow.support[10])
