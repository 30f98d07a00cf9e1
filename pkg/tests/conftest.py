import numpy as np
import pytest

from hypograd.control import build_alpha, build_bridge, phi_parabolic, xi_case1
from hypograd.flow import NoisePath, simulate_path, terminal_flow
from hypograd.model import builtin_model


@pytest.fixture(scope="session")
def kinetic_spec():
    return builtin_model("kinetic_ou", {"m": 1})


@pytest.fixture(scope="session")
def chain_spec():
    # integrator chain with Kalman index k = 1
    return builtin_model("integrator_chain", {"a": [[0.0, 1.0], [0.0, 0.0]],
                                              "b0": [[0.0], [1.0]]})


@pytest.fixture(scope="session")
def hamiltonian_spec():
    # the nonlinear-potential, unit-mass model: constant jac_z1, adapted
    return builtin_model("hamiltonian", {"v_expr": "0.5*x1^2 + 0.1*x1^4"})


@pytest.fixture(scope="session")
def anticipative_spec():
    # state-dependent mass: jac_z1 varies along paths, the control anticipates
    return builtin_model("hamiltonian", {"v_expr": "0.5*x1^2 + 0.1*x1^4",
                                         "mass_expr": "1 + 0.2*x1^2",
                                         "c_mass": 1.0})


def control_chain_hdot(spec, x0, grid, increments, v, profile):
    """Full deterministic chain increments -> hdot for one path."""
    states = simulate_path(spec, x0, grid, NoisePath(increments=increments))
    k = terminal_flow(spec, states, grid)
    ad = build_alpha(spec, states, k, grid, v, profile)
    _, h_dot, _ = build_bridge(spec, states, k, ad, grid, v)
    return h_dot


def brute_force_divergence(spec, x0, grid, increments, v, profile, eta=1e-6):
    """Skorokhod divergence by brute-force bumping of every increment.

    delta = sum <hdot, dW> - dt * sum_i,l d hdot[i,l]/d dW[i,l], with the
    derivative taken by central differences through the whole chain.  The
    independent oracle for the factored implementation.
    """
    h_dot = control_chain_hdot(spec, x0, grid, increments, v, profile)
    base = float(np.sum(h_dot * increments))
    trace = 0.0
    n_steps, d = increments.shape
    for i in range(n_steps):
        for l in range(d):
            wp = increments.copy()
            wp[i, l] += eta
            wm = increments.copy()
            wm[i, l] -= eta
            hp = control_chain_hdot(spec, x0, grid, wp, v, profile)
            hm = control_chain_hdot(spec, x0, grid, wm, v, profile)
            trace += (hp[i, l] - hm[i, l]) / (2.0 * eta)
    return base - grid.dt * trace


def case1_profile(spec, t_final, c_bound=0.0):
    return xi_case1(None, spec.b0, phi_parabolic(t_final), c_bound, t_final)
