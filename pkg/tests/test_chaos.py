import json
import math

import numpy as np
import pytest
from dataclasses import replace

from mvlab.chaos import (
    ChaosReport,
    Constant,
    ConvergenceError,
    HolderCone,
    HolderWave,
    fit_rate,
    flow_deviation_check,
    fluctuation_check,
    gradient_scaling_scan,
    holder_wave_family,
    moment_sanity,
    poc_wasserstein_experiment,
    strong_error_experiment,
)
from mvlab.kernels import make_builtin
from mvlab.simulate import GaussianLaw, SimConfig, solve_meanfield_flow

OU = make_builtin("constant-diffusion-ou", {"s": 1.0})
ATTRACT = make_builtin("linear-attraction", {"a": 0.0, "c": 5.0, "eps": 0.3})


def test_fit_rate_recovers_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    fit = fit_rate(x, 3.0 * x ** -0.5)
    assert fit.slope == pytest.approx(-0.5)
    assert fit.r2 == pytest.approx(1.0)
    assert math.exp(fit.intercept) == pytest.approx(3.0)


def test_fit_rate_rejects_non_positive():
    fit = fit_rate([1, 2, 4], [1.0, 0.0, 0.25])
    assert len(fit.rejected) == 1 and fit.abscissas == [1.0, 4.0]
    with pytest.raises(ValueError):
        fit_rate([1, 2], [1.0, -1.0])


def test_report_serialisation(tmp_path):
    rep = ChaosReport("x", {"a": np.float64(1.5)}, fits={"r": fit_rate([1, 2], [1, 0.5])},
                      checks={"ok": np.bool_(True)})
    paths = rep.write(tmp_path)
    data = json.loads(open(paths[0]).read())
    assert data["passed"] is True and data["config"]["a"] == 1.5
    assert open(paths[1]).read().splitlines()[0] == "abscissa,ordinate,stderr"


def test_holder_functions_have_unit_seminorm():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2)) * 0.01
    y = x + y
    dist = np.linalg.norm(x - y, axis=-1)
    for eta in (0.3, 0.5, 1.0):
        for f in [HolderCone([0.1, 0.2], eta, R=1.0), HolderWave([1, 1], 17, eta, 0.3)]:
            assert np.all(np.abs(f(x) - f(y)) <= dist ** eta + 1e-12)
    assert np.all(Constant(2.0)(x) == 2.0)
    assert len(holder_wave_family(0.5, 2, [0, 1], [1, 2, 4])) == 12


def test_strong_error_is_exactly_zero_for_measure_free_model():
    cfg = SimConfig(N=1, dt=0.01, T=0.2, seed=1)
    rep = strong_error_experiment([10, 20], cfg, OU, 200, 5)
    assert rep.checks == {"exact_zero": True}
    assert rep.measurements["per_particle_sup_error"] == [0.0, 0.0]


def test_strong_error_decreases():
    spec = make_builtin("linear-attraction", {"eps": 0.3})
    cfg = SimConfig(N=1, dt=0.01, T=0.5, seed=2)
    rep = strong_error_experiment([10, 40, 160], cfg, spec, 4000, 40)
    m = rep.measurements["per_particle_sup_error"]
    assert m[0] > m[1] > m[2] > 0
    assert -0.8 < rep.fits["strong_error"].slope < -0.2


def test_unconverged_flow_refused():
    spec = make_builtin("linear-attraction", {"eps": 0.3})
    cfg = SimConfig(N=1, dt=0.01, T=0.2)
    with pytest.warns(RuntimeWarning):
        flow = solve_meanfield_flow(cfg, spec, GaussianLaw(1, 0.5), 100, 1e-12, max_iter=1)
    with pytest.raises(ConvergenceError):
        strong_error_experiment([4], cfg, spec, None, 2, flow=flow)


def test_fluctuation_constant_and_identity():
    law = GaussianLaw(0.0, 1.0)
    rep = fluctuation_check("constant", law, [10, 100], 50, seed=0)
    assert rep.checks == {"exact_zero": True}
    rep = fluctuation_check("identity", law, [10, 40, 160, 640], 2000, seed=0, ref_samples=10 ** 5)
    assert rep.fits["fluctuation"].slope == pytest.approx(-1.0, abs=0.1)
    assert rep.passed
    with pytest.raises(ValueError):
        fluctuation_check("nope", law, [10], 5, seed=0)
    with pytest.raises(ValueError):
        fluctuation_check("drift", law, [10], 5, seed=0)


def _ou_flow(T=0.5, dt=0.01):
    cfg = SimConfig(N=1, dt=dt, T=T)
    return cfg, solve_meanfield_flow(cfg, OU, GaussianLaw(0.0, 1.0), 500, 0.05)


def test_constant_function_has_zero_gradient():
    _, flow = _ou_flow()
    rep = gradient_scaling_scan(OU, flow, [Constant()], 0.5, 1, "full", 0.0, [0.1, 0.2],
                                [[0.0], [1.0]], 0.01, 100, seed=0)
    assert rep.checks == {"all_zero": True}


def test_gradient_scan_argument_checks():
    _, flow = _ou_flow()
    fam = [HolderWave([1.0], 4, 0.5)]
    with pytest.raises(ValueError):
        gradient_scaling_scan(OU, flow, fam, 0.5, 3, "full", 0.0, [0.1], [[0.0]], 0.01, 10, 0)
    with pytest.raises(ValueError):
        gradient_scaling_scan(OU, flow, fam, 0.5, 1, "full", 0.0, [0.01], [[0.0]], 0.1, 10, 0)
    with pytest.raises(ValueError):
        gradient_scaling_scan(OU, flow, fam, 0.5, 1, "position", 0.0, [0.1], [[0.0]], 0.01, 10, 0)


def test_flow_deviation_ou():
    _, flow = _ou_flow()
    rep = flow_deviation_check(OU, flow, [[0.0], [1.0]], 0.0, [0.0, 0.01, 0.02, 0.05, 0.1], 20000, seed=3)
    msd = rep.measurements["mean_square_deviation"]
    assert msd[0] == 0.0
    # the characteristic is the noiseless flow, so the deviation is the OU variance
    var = (1 - math.exp(-2 * 0.1)) / 2
    assert msd[4] == pytest.approx(var, rel=0.05)
    assert rep.passed


def test_moment_sanity():
    def zero(t, x, y):
        return np.zeros(np.broadcast_shapes(x.shape, y.shape))

    def nodiff(t, x, y):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))

    frozen = replace(OU, name="frozen", drift_kernel=zero, diffusion_kernel=nodiff, model_code=None)
    cfg = SimConfig(N=100, dt=0.01, T=0.2)
    rep = moment_sanity(cfg, frozen, 100)
    assert rep.measurements["particles"]["ratio"] == 1.0
    assert rep.measurements["limit"]["ratio"] == 1.0
    rep = moment_sanity(replace(cfg, N=4000, T=2.0), OU, 500, init_law=GaussianLaw(0.0, 0.1))
    assert rep.measurements["particles"]["max_second_moment"] <= 0.5 + 0.1
    rep = moment_sanity(cfg, make_builtin("linear-attraction", {"eps": 0.3}), 1000)
    assert rep.passed


def test_poc_single_particle_ou_matches_limit():
    cfg = SimConfig(N=1, dt=0.02, T=0.2, seed=5)
    rep = poc_wasserstein_experiment(1, [1], 0.5, 0.2, cfg, OU, outer_samples=200, flow_M=400,
                                     batches=20, init_law=GaussianLaw(0.0, 1.0))
    m, se = rep.measurements["corrected_distance"][0], rep.measurements["stderr"][0]
    assert abs(m) <= 3 * se + 1e-12


def test_poc_perturbed_start_is_farther_from_chaos():
    cfg = SimConfig(N=1, dt=0.02, T=0.1, seed=6)
    kw = dict(outer_samples=200, flow_M=2000, batches=4, init_law=GaussianLaw(0.0, 1.0))
    prod = poc_wasserstein_experiment(2, [2, 4], 0.5, 0.1, cfg, ATTRACT, "product", **kw)
    pert = poc_wasserstein_experiment(2, [2, 4], 0.5, 0.1, cfg, ATTRACT, "perturbed-exchangeable", **kw)
    assert np.all(np.array(pert.measurements["corrected_distance"])
                  > np.array(prod.measurements["corrected_distance"]))
    again = poc_wasserstein_experiment(2, [2, 4], 0.5, 0.1, cfg, ATTRACT, "product", **kw)
    assert again.to_json() == prod.to_json()


def test_poc_argument_checks():
    cfg = SimConfig(N=1, dt=0.02, T=0.1)
    with pytest.raises(ValueError, match="floor"):
        poc_wasserstein_experiment(1, [2], 0.5, 0.1, cfg, OU, outer_samples=50)
    with pytest.raises(ValueError):
        poc_wasserstein_experiment(3, [2, 4], 0.5, 0.1, cfg, OU, outer_samples=200)
    with pytest.raises(ValueError):
        poc_wasserstein_experiment(1, [2], 0.5, 0.1, cfg, OU, init_mode="weird")
