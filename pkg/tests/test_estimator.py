import numpy as np
import pytest

from hypograd.control import phi_parabolic, xi_case1
from hypograd.errors import MethodMisuseError, RunDegenerateError
from hypograd.estimator import (EstimatorConfig, bismut_gradient,
                                closed_form_gradient, covariance_flow,
                                default_weights, duality_gap, fd_gradient,
                                gaussian_bump_f, indicator_f, ito_delta,
                                linear_f, path_increments, pathwise_gradient,
                                quadratic_f, skorokhod_delta)
from hypograd.flow import NoisePath, TimeGrid, simulate_path
from hypograd.model import ModelSpec, builtin_model
from tests.conftest import brute_force_divergence, case1_profile

KOU_TRUE_V1 = 0.6597001533917016   # (exp M)_11 for M = [[0,1],[-1,-1]]
KOU_TRUE_V2 = 0.5335071951146929   # (exp M)_12


# ---------------------------------------------------------------------------
# divergences
# ---------------------------------------------------------------------------

def test_ito_delta_zero_integrand():
    noise = NoisePath(np.random.default_rng(0).standard_normal((32, 2)))
    assert ito_delta(np.zeros((32, 2)), noise) == 0.0


def test_ito_delta_gaussian_moments():
    # deterministic hdot: E delta = 0 and Var delta = sum |hdot|^2 dt
    grid = TimeGrid(1.0, 64)
    rng = np.random.default_rng(1)
    h_dot = rng.standard_normal((64, 1))
    n = 100_000
    inc = rng.standard_normal((n, 64, 1)) * np.sqrt(grid.dt)
    deltas = ito_delta(h_dot, NoisePath(inc))
    var_true = float(np.sum(h_dot**2) * grid.dt)
    se_mean = np.sqrt(var_true / n)
    assert abs(np.mean(deltas)) <= 4 * se_mean
    se_var = np.std(deltas**2, ddof=1) / np.sqrt(n)
    assert abs(np.var(deltas) - var_true) <= 4 * se_var


def test_discrete_divergence_convention_single_step():
    # hdot_1 = dW_1 gives delta = dW^2 - dt; the finite-dimensional Gaussian
    # duality then fixes E[delta] = 0, E[dW delta] = 0, E[dW^2 delta] = 2 dt^2
    dt = 0.25
    rng = np.random.default_rng(2)
    w = rng.standard_normal(400_000) * np.sqrt(dt)
    delta = w**2 - dt
    for f_vals, truth in ((np.ones_like(w), 0.0), (w, 0.0), (w**2, 2 * dt**2)):
        prod = f_vals * delta
        se = np.std(prod, ddof=1) / np.sqrt(w.size)
        assert abs(np.mean(prod) - truth) <= 4 * se


def test_skorokhod_equals_ito_for_adapted_chain():
    # constant jac_z1 forced through the anticipative machinery: every
    # sensitivity tensor vanishes, so the trace term is exactly zero
    base = builtin_model("kinetic_ou", {"m": 1})
    forced = ModelSpec(m=1, d=1, z1=base.z1, z2=base.z2, jac_z1=base.jac_z1,
                       jac_z2=base.jac_z2, sigma=base.sigma, b0=base.b0,
                       epsilon=0.0, constant_jac_z1=False)  # hess via FD
    grid = TimeGrid(1.0, 32)
    inc = path_increments(grid, 1, 7, 0, 16)
    prof = case1_profile(base, 1.0)
    v = np.array([0.8, -0.6])
    d_forced, corr = skorokhod_delta(forced, np.array([1.0, 1.0]), grid,
                                     NoisePath(inc), v, prof, return_parts=True)
    d_fast = skorokhod_delta(base, np.array([1.0, 1.0]), grid,
                             NoisePath(inc), v, prof)
    assert np.max(np.abs(corr)) <= 1e-8
    assert np.max(np.abs(d_forced - d_fast)) <= 1e-8


@pytest.mark.parametrize("v", [np.array([0.7, -0.4]),
                               np.array([1.0, 0.0]),
                               np.array([0.0, 1.0])])
def test_skorokhod_trace_matches_brute_force(anticipative_spec, v):
    spec = anticipative_spec
    grid = TimeGrid(0.5, 12)
    prof = case1_profile(spec, 0.5, c_bound=3.0)
    rng = np.random.default_rng(3)
    x0 = np.array([0.3, -0.2])
    for _ in range(3):
        w = rng.standard_normal((12, 1)) * np.sqrt(grid.dt)
        oracle = brute_force_divergence(spec, x0, grid, w, v, prof)
        fast = skorokhod_delta(spec, x0, grid, NoisePath(w), v, prof)
        assert abs(oracle - fast) <= 1e-7 * max(1.0, abs(oracle))


def test_bismut_ito_rejects_anticipative_model(anticipative_spec):
    cfg = EstimatorConfig(n_paths=10, master_seed=0, method="bismut_ito")
    with pytest.raises(MethodMisuseError):
        bismut_gradient(anticipative_spec, [0.3, -0.2], [1.0, 0.0],
                        linear_f([1.0, 0.0]), TimeGrid(0.5, 8), cfg)


# ---------------------------------------------------------------------------
# bismut estimator
# ---------------------------------------------------------------------------

def test_constant_f_gives_statistical_zero(kinetic_spec):
    grid = TimeGrid(1.0, 64)
    cfg = EstimatorConfig(n_paths=20000, master_seed=5, method="bismut_ito")
    est = bismut_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0],
                          linear_f([0.0, 0.0], b=3.0), grid, cfg)
    assert abs(est.value) <= 4 * est.std_error + 1e-12
    assert abs(est.delta_mean) <= 4 * est.delta_se


def test_kinetic_gradient_matches_closed_form(kinetic_spec):
    grid = TimeGrid(1.0, 512)
    f = linear_f([1.0, 0.0])
    for v, truth in ((np.array([1.0, 0.0]), KOU_TRUE_V1),
                     (np.array([0.0, 1.0]), KOU_TRUE_V2)):
        cfg = EstimatorConfig(n_paths=20000, master_seed=42, method="bismut_ito")
        est = bismut_gradient(kinetic_spec, [1.0, 1.0], v, f, grid, cfg)
        assert abs(est.value - truth) <= 4 * est.std_error
        assert closed_form_gradient(kinetic_spec, [1.0, 1.0], v, f, 1.0) == \
            pytest.approx(truth, abs=1e-9)


def test_weight_mean_zero_and_statistics(kinetic_spec):
    grid = TimeGrid(1.0, 128)
    cfg = EstimatorConfig(n_paths=30000, master_seed=9, method="bismut_ito")
    est = bismut_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0],
                          linear_f([1.0, 0.0]), grid, cfg)
    assert abs(est.delta_mean) <= 4 * est.delta_se
    assert est.weight_l2 > 0
    assert est.kurtosis > 0
    assert isinstance(est.moment_flagged, bool)
    assert est.n_effective + est.rejected == cfg.n_paths
    assert est.value_cv is not None and est.std_error_cv <= est.std_error


def test_antithetic_runs_and_skips_cv(kinetic_spec):
    grid = TimeGrid(1.0, 64)
    cfg = EstimatorConfig(n_paths=4000, master_seed=3, method="bismut_ito",
                          antithetic=True)
    est = bismut_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0],
                          linear_f([1.0, 0.0]), grid, cfg)
    assert est.value_cv is None
    truth = 0.66
    assert abs(est.value - truth) <= 6 * est.std_error + 0.05


def test_reproducibility_bitwise(kinetic_spec):
    grid = TimeGrid(1.0, 64)
    f = linear_f([1.0, 0.0])
    runs = []
    for threads in (1, 1, 4):
        cfg = EstimatorConfig(n_paths=8000, master_seed=77, method="bismut_ito",
                              n_threads=threads)
        runs.append(bismut_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0], f,
                                    grid, cfg))
    assert runs[0].value == runs[1].value == runs[2].value
    assert runs[0].std_error == runs[2].std_error
    assert runs[0].weight_l2 == runs[2].weight_l2


def test_seed_changes_estimate_but_not_structure(kinetic_spec):
    grid = TimeGrid(1.0, 64)
    f = linear_f([1.0, 0.0])
    ests = []
    for seed in (1, 2):
        cfg = EstimatorConfig(n_paths=20000, master_seed=seed, method="bismut_ito")
        ests.append(bismut_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0], f,
                                    grid, cfg))
    comb = np.hypot(ests[0].std_error, ests[1].std_error)
    assert ests[0].value != ests[1].value
    assert abs(ests[0].value - ests[1].value) <= 8 * comb


# ---------------------------------------------------------------------------
# pathwise / finite differences / closed form
# ---------------------------------------------------------------------------

def test_pathwise_linear_model_zero_variance(chain_spec):
    grid = TimeGrid(1.0, 256)
    a = np.array([1.0, -0.5, 0.25])
    v = np.array([0.3, 0.2, -0.4])
    cfg = EstimatorConfig(n_paths=500, master_seed=0, method="pathwise")
    est = pathwise_gradient(chain_spec, np.zeros(3), v, linear_f(a), grid, cfg)
    step = np.eye(3) + grid.dt * chain_spec.drift_matrix
    truth = a @ (np.linalg.matrix_power(step, 256) @ v)
    assert est.std_error <= 1e-14
    assert est.value == pytest.approx(truth, rel=1e-12)


def test_pathwise_constant_f_exactly_zero(kinetic_spec):
    grid = TimeGrid(1.0, 32)
    cfg = EstimatorConfig(n_paths=100, master_seed=1, method="pathwise")
    est = pathwise_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0],
                            linear_f([0.0, 0.0], b=1.0), grid, cfg)
    assert est.value == 0.0 and est.std_error == 0.0


def test_pathwise_needs_gradient(kinetic_spec):
    cfg = EstimatorConfig(n_paths=10, master_seed=0, method="pathwise")
    with pytest.raises(MethodMisuseError):
        pathwise_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0],
                          indicator_f(0, 0.0), TimeGrid(1.0, 8), cfg)


def test_fd_exact_for_linear_model_and_f(chain_spec):
    grid = TimeGrid(1.0, 128)
    a = np.array([1.0, 0.0, 0.5])
    v = np.array([1.0, 0.0, 0.0])
    vals = []
    for eta in (1e-2, 1e-4):
        cfg = EstimatorConfig(n_paths=50, master_seed=3,
                              method="finite_difference", fd_bump=eta)
        vals.append(fd_gradient(chain_spec, np.zeros(3), v, linear_f(a), grid,
                                cfg).value)
    assert vals[0] == pytest.approx(vals[1], rel=1e-9)


def test_fd_matches_continuous_closed_form_at_fine_grid(kinetic_spec):
    # linear model, linear f: no bump bias; discretization |exp(M)-(I+M/N)^N|
    # is the whole error and drops below 1e-5 at N = 65536
    grid = TimeGrid(1.0, 65536)
    cfg = EstimatorConfig(n_paths=8, master_seed=4, method="finite_difference",
                          fd_bump=1e-3)
    est = fd_gradient(kinetic_spec, [1.0, 1.0], [1.0, 0.0], linear_f([1.0, 0.0]),
                      grid, cfg)
    assert abs(est.value - KOU_TRUE_V1) <= 1e-5 + 4 * est.std_error


def test_fd_variance_blowup_on_indicator(kinetic_spec):
    # CRN differences of a discontinuous payoff degenerate as eta -> 0 (the
    # per-path difference is 0 or +-1/(2 eta)) while the derivative-formula
    # weight is eta-free; start near the threshold so flips actually occur
    grid = TimeGrid(1.0, 128)
    n = 40000
    x0 = [0.0, 0.5]
    f = indicator_f(0, 0.0)
    fd_cfg = EstimatorConfig(n_paths=n, master_seed=8,
                             method="finite_difference", fd_bump=1e-4)
    fd_est = fd_gradient(kinetic_spec, x0, [1.0, 0.0], f, grid, fd_cfg)
    bi_cfg = EstimatorConfig(n_paths=n, master_seed=8, method="bismut_ito")
    bi_est = bismut_gradient(kinetic_spec, x0, [1.0, 0.0], f, grid, bi_cfg)
    assert fd_est.std_error > 5 * bi_est.std_error


def test_closed_form_short_horizon_identity(kinetic_spec):
    f = quadratic_f([[0.5, 0.1], [0.0, 0.2]], b=[1.0, -2.0])
    x0 = np.array([0.3, 0.7])
    v = np.array([0.6, -0.8])
    got = closed_form_gradient(kinetic_spec, x0, v, f, 1e-8)
    expect = float(f.grad_f(x0) @ v)
    assert got == pytest.approx(expect, rel=1e-6)


def test_closed_form_quadratic_identity(kinetic_spec):
    # f = |z|^2: grad_v E f = 2 <exp(TG) x0, exp(TG) v>; cross-check against a
    # central difference of the closed-form map itself
    from scipy.linalg import expm
    f = quadratic_f(np.eye(2))
    x0 = np.array([1.0, -0.5])
    v = np.array([0.4, 0.9])
    got = closed_form_gradient(kinetic_spec, x0, v, f, 1.0)
    etg = expm(kinetic_spec.drift_matrix)
    assert got == pytest.approx(2 * float((etg @ x0) @ (etg @ v)), abs=1e-12)
    eta = 1e-6
    sig = covariance_flow(kinetic_spec, 1.0)

    def closed_value(x):
        mu = etg @ x
        return float(mu @ mu + np.trace(sig))

    fd = (closed_value(x0 + eta * v) - closed_value(x0 - eta * v)) / (2 * eta)
    assert got == pytest.approx(fd, abs=1e-8 * max(1, abs(got)))


def test_closed_form_rejects_nonlinear(anticipative_spec):
    with pytest.raises(MethodMisuseError):
        closed_form_gradient(anticipative_spec, [0.0, 0.0], [1.0, 0.0],
                             linear_f([1.0, 0.0]), 1.0)
    with pytest.raises(MethodMisuseError):
        closed_form_gradient(builtin_model("kinetic_ou", {"m": 1}),
                             [0.0, 0.0], [1.0, 0.0], gaussian_bump_f([0, 0]), 1.0)


# ---------------------------------------------------------------------------
# cross-estimator agreement and duality
# ---------------------------------------------------------------------------

def test_estimator_equivalence_adapted(kinetic_spec):
    grid = TimeGrid(1.0, 256)
    x0 = [1.0, 1.0]
    v = [1.0, 0.0]
    f = quadratic_f([[0.3, 0.0], [0.1, 0.2]], b=[1.0, 0.5])
    ests = {}
    cfg = lambda m: EstimatorConfig(n_paths=30000, master_seed=17, method=m)
    ests["bismut"] = bismut_gradient(kinetic_spec, x0, v, f, grid, cfg("bismut_ito"))
    ests["pathwise"] = pathwise_gradient(kinetic_spec, x0, v, f, grid,
                                         cfg("pathwise"))
    ests["fd"] = fd_gradient(kinetic_spec, x0, v, f, grid,
                             cfg("finite_difference"))
    closed = closed_form_gradient(kinetic_spec, x0, v, f, 1.0)
    allow = 10.0 * 1.0 / 256
    pairs = [("bismut", "pathwise"), ("bismut", "fd"), ("pathwise", "fd")]
    for a, b in pairs:
        gap = abs(ests[a].value - ests[b].value)
        comb = np.hypot(ests[a].std_error, ests[b].std_error)
        assert gap <= 4 * comb + allow, (a, b, gap, comb)
    for name, est in ests.items():
        assert abs(est.value - closed) <= 4 * est.std_error + allow, name


def test_duality_identity_small_n(anticipative_spec):
    grid = TimeGrid(0.5, 10)
    cfg = EstimatorConfig(n_paths=60000, master_seed=11,
                          method="bismut_skorokhod", chunk_size=4000)
    prof = case1_profile(anticipative_spec, 0.5, c_bound=3.0)
    for f in (linear_f([1.0, 2.0]), quadratic_f(np.eye(2) + 0.1)):
        gap, se, _, _ = duality_gap(anticipative_spec, [0.3, -0.2], [0.7, -0.4],
                                    f, grid, cfg, weights=prof)
        assert abs(gap) <= 4 * se


def test_run_degenerate_on_explosive_model():
    spec = builtin_model("hamiltonian", {"v_expr": "-5*x1^4"})
    grid = TimeGrid(4.0, 32)
    cfg = EstimatorConfig(n_paths=2000, master_seed=0, method="bismut_ito")
    with pytest.raises(RunDegenerateError):
        bismut_gradient(spec, [2.5, 2.5], [1.0, 0.0], linear_f([1.0, 0.0]),
                        grid, cfg)


def test_default_weights_selects_case(kinetic_spec, chain_spec):
    grid = TimeGrid(1.0, 32)
    assert default_weights(kinetic_spec, grid).xi_case == "case1"
    assert default_weights(chain_spec, grid).xi_case == "case2"


def test_builder_gradients_consistent():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(20, 2))
    for f in (linear_f([1.0, -0.5], b=0.3),
              quadratic_f([[0.5, 0.1], [0.0, 0.2]], b=[1.0, -2.0], c=0.4),
              gaussian_bump_f([0.3, -0.1], width=0.9)):
        assert f.check_gradient(pts)
    bad = quadratic_f(np.eye(2))
    broken = type(bad)(f=bad.f, grad_f=lambda x: 0.5 * bad.grad_f(x),
                       tag=bad.tag, params=bad.params)
    assert not broken.check_gradient(pts)


@pytest.mark.parametrize("model_cfg,x0", [
    # nonlinear first block, square noise: stresses all tensor index orders
    ({"m": 2, "d": 2,
      "z1": ["x3 + 0.3*x1*x4", "x4 + 0.2*x2^2 + 0.1*x3"],
      "z2": ["-x1 - x3", "-x2 - 0.5*x4 + 0.1*x1^2"],
      "sigma": [[1.0, 0.2], [0.0, 0.8]],
      "b0": [[1.0, 0.1], [0.0, 1.0]], "epsilon": 0.5},
     [0.3, -0.2, 0.1, 0.4]),
    # rectangular full-row-rank B0
    ({"m": 1, "d": 2,
      "z1": ["x2 + 0.4*x3 + 0.1*x1^2*x2"],
      "z2": ["-x1 - x2", "-x3 + 0.2*x1^2"],
      "sigma": [[1.0, 0.0], [0.3, 0.9]],
      "b0": [[1.0, 0.4]], "epsilon": 0.6},
     [0.2, -0.1, 0.3]),
])
def test_skorokhod_trace_multidimensional(model_cfg, x0):
    from hypograd.cli import build_model
    spec = build_model({"custom": model_cfg})
    assert not spec.constant_jac_z1
    t_final, n_steps = 0.4, 8
    grid = TimeGrid(t_final, n_steps)
    prof = xi_case1(None, spec.b0, phi_parabolic(t_final), 2.0, t_final)
    rng = np.random.default_rng(5)
    x0 = np.asarray(x0)
    for _ in range(2):
        v = rng.standard_normal(spec.dim)
        w = rng.standard_normal((n_steps, spec.d)) * np.sqrt(grid.dt)
        oracle = brute_force_divergence(spec, x0, grid, w, v, prof)
        fast = float(skorokhod_delta(spec, x0, grid, NoisePath(w), v, prof))
        assert abs(oracle - fast) <= 1e-6 * max(1.0, abs(oracle))
