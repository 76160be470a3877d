"""Panel simulation: steady states, reproducibility, latent identities,
stationarity, and the CSV round trip."""

import numpy as np
import pytest

from mpne_lab import (
    ExplosiveSampleError,
    SimOptions,
    SolverOptions,
    SpecError,
    benchmark_spec,
    deterministic_steady_state,
    panel_from_csv,
    panel_to_csv,
    simulate_panel,
    solve_mpne,
    solve_myopic,
    spec_fingerprint,
)
from mpne_lab.simulate import _draw

from test_solver import scalar_spec, two_activity_spec

FIG_W = np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


@pytest.fixture(scope="module")
def bench():
    spec = benchmark_spec()
    sol = solve_mpne(spec, SolverOptions())
    return spec, sol


@pytest.fixture(scope="module")
def small():
    spec = two_activity_spec()
    sol = solve_mpne(spec, SolverOptions())
    return spec, sol


# ============================================================
# Steady state
# ============================================================


def test_steady_state_pure_transfers():
    # no interactions, phi = 0: the allocator passes tau_bar through
    spec = scalar_spec()
    spec.payoff.Lambda = np.zeros((1, 1))
    spec.payoff.rho = np.zeros((1, 1))
    spec.payoff.P = np.zeros((1, 1))
    spec.payoff.phi = np.zeros(1)
    sol = solve_mpne(spec, SolverOptions())
    Y_ss, g_ss, X_ss = deterministic_steady_state(spec, sol)
    assert np.allclose(g_ss, np.ones(3), atol=1e-10)


def test_steady_state_self_consistent(bench):
    spec, sol = bench
    Y_ss, g_ss, X_ss = deterministic_steady_state(spec, sol)
    n, ms, K = spec.dims.n, spec.dims.m_star, spec.dims.K
    Pi = spec.payoff.Pi
    lift = [np.kron(Pi[k][:, None], np.eye(n)) for k in range(K)]
    tile = np.kron(np.ones((ms, 1)), np.eye(n))
    vecY = Y_ss.flatten(order="F")
    xs = [X_ss[:, k] for k in range(K)]
    g_next = (sol.c_g + sol.A_g @ vecY
              + sol.B_g @ spec.allocator.tau_bar
              + sum(sol.C_g[k] @ (lift[k] @ xs[k]) for k in range(K)))
    vecY_next = (sol.c_y + sol.A_y @ vecY + sol.B_y @ (tile @ g_next)
                 + sum(sol.C_y[k] @ (lift[k] @ xs[k]) for k in range(K)))
    assert np.allclose(g_next, g_ss, atol=1e-10)
    assert np.allclose(vecY_next, vecY, atol=1e-10)


def test_steady_state_respects_network_symmetry():
    # agents 2 and 3 are exchangeable in this network
    spec = two_activity_spec(n=3)
    spec.network.W = FIG_W
    sol = solve_mpne(spec, SolverOptions())
    Y_ss, g_ss, _ = deterministic_steady_state(spec, sol)
    assert np.allclose(Y_ss[1], Y_ss[2], atol=1e-10)
    assert abs(g_ss[1] - g_ss[2]) < 1e-10


# ============================================================
# Simulation basics
# ============================================================


def test_zero_shock_panel_is_constant(small):
    spec, sol = small
    spec = two_activity_spec()
    spec.shocks.Sigma = np.zeros((2, 2))
    spec.allocator.sigma2_tau = 0.0
    spec.process.sigma2 = np.zeros(2)
    sol = solve_mpne(spec, SolverOptions())
    opts = SimOptions(burn_in=0,
                      x_tau=np.zeros((spec.dims.T, spec.dims.n, 2)))
    panel, _ = simulate_panel(spec, sol, opts, seed=1)
    Y_ss, g_ss, X_ss = deterministic_steady_state(spec, sol)
    for t in range(panel.T):
        assert np.allclose(panel.Y[t], Y_ss, atol=1e-9)
        assert np.allclose(panel.g[t], g_ss, atol=1e-9)
        assert np.allclose(panel.X[t], X_ss, atol=1e-9)
    assert np.allclose(panel.Y0, Y_ss, atol=1e-9)


def test_same_seed_reproduces_bitwise(small):
    spec, sol = small
    p1, t1 = simulate_panel(spec, sol, SimOptions(), seed=42)
    p2, t2 = simulate_panel(spec, sol, SimOptions(), seed=42)
    assert np.array_equal(p1.Y, p2.Y)
    assert np.array_equal(p1.g, p2.g)
    assert np.array_equal(p1.X, p2.X)
    assert np.array_equal(p1.X_tau, p2.X_tau)
    assert np.array_equal(t1.E, t2.E)
    p3, _ = simulate_panel(spec, sol, SimOptions(), seed=43)
    assert not np.array_equal(p1.Y, p3.Y)
    assert p1.meta["fingerprint"] == spec_fingerprint(spec)


def test_latent_trace_recomposes(small):
    spec, sol = small
    panel, tr = simulate_panel(spec, sol, SimOptions(), seed=7)
    n, ms, K = spec.dims.n, spec.dims.m_star, spec.dims.K
    Pi = spec.payoff.Pi
    lift = [np.kron(Pi[k][:, None], np.eye(n)) for k in range(K)]
    tile = np.kron(np.ones((ms, 1)), np.eye(n))
    fe = spec.fixed_effects
    for t in range(panel.T):
        vecE = tr.E[t].flatten(order="F")
        g_re = (tr.g_L[t] + sol.Ce_g @ vecE + tr.g_A[t]
                + sol.B_g @ tr.e_tau[t])
        assert np.allclose(g_re, panel.g[t], atol=1e-10)
        # grant stage from states
        Ylag = panel.Y0 if t == 0 else panel.Y[t - 1]
        vecYlag = Ylag.flatten(order="F")
        xs = [panel.X[t][:, k] for k in range(K)]
        tau = (spec.allocator.tau_bar + panel.X_tau[t] @
               spec.allocator.beta + fe.alpha_mean[ms] + fe.alpha[t, ms]
               + tr.e_tau[t])
        g_dir = (sol.c_g + sol.A_g @ vecYlag + sol.B_g @ tau
                 + sum(sol.C_g[k] @ (lift[k] @ xs[k]) for k in range(K))
                 + sol.Ce_g @ vecE)
        assert np.allclose(g_dir, panel.g[t], atol=1e-10)
        # agents' stage from states
        U = fe.eta + (fe.alpha_mean[:ms] + fe.alpha[t, :ms])[None, :] \
            + tr.E[t]
        vecY = (sol.c_y + sol.A_y @ vecYlag
                + sol.B_y @ (tile @ panel.g[t])
                + sum(sol.C_y[k] @ (lift[k] @ xs[k]) for k in range(K))
                + sol.Cu_y @ U.flatten(order="F"))
        assert np.allclose(vecY, panel.Y[t].flatten(order="F"),
                           atol=1e-10)


def test_long_run_stationarity(bench):
    spec, sol = bench
    spec = benchmark_spec(T=2000)
    panel, _ = simulate_panel(spec, sol, SimOptions(), seed=3)
    V = panel.Y.reshape(panel.T, -1)
    V = V - V.mean(axis=0)
    sd = V.std(axis=0)
    lag1 = np.diag(V[1:].T @ V[:-1]) / (panel.T - 1) / sd**2
    lag30 = (V[30:].T @ V[:-30]) / (panel.T - 30)
    corr30 = lag30 / np.outer(sd, sd)
    # short-run persistence is real, thirty periods out it is sampling
    # noise (max of ~9e3 correlations, each with sd T^{-1/2})
    assert lag1.mean() > 0.05
    assert np.abs(corr30).max() < 6.0 / np.sqrt(panel.T)
    # second moments agree across halves
    h = panel.T // 2
    v0 = V[:h].var(axis=0)
    v1 = V[h:].var(axis=0)
    assert np.abs(v1 / v0 - 1.0).max() < 0.35


def test_grants_ignore_lagged_activities_when_phi_zero():
    from mpne_lab import FixedEffects

    spec = two_activity_spec(phi=0.0, theta_E="AB", n=6, seed=1)
    spec.dims.T = 400
    spec.fixed_effects = FixedEffects.zeros(spec.dims)
    sol = solve_mpne(spec, SolverOptions())
    panel, _ = simulate_panel(spec, sol, SimOptions(), seed=9)
    resp, regs = [], []
    for t in range(1, panel.T):
        resp.append(panel.g[t])
        regs.append(panel.Y[t - 1].flatten(order="F"))
    y = np.concatenate(resp)
    # pooled regression of g_{i,t} on all lagged activities plus const
    Ymat = np.repeat(np.asarray(regs), 6, axis=0)
    Xmat = np.column_stack([np.ones_like(y), Ymat])
    coef, *_ = np.linalg.lstsq(Xmat, y, rcond=None)
    resid = y - Xmat @ coef
    dof = len(y) - Xmat.shape[1]
    s2 = resid @ resid / dof
    cov = s2 * np.linalg.inv(Xmat.T @ Xmat)
    se = np.sqrt(np.diag(cov))
    tstats = np.abs(coef[1:]) / se[1:]
    assert np.max(tstats) < 3.0


def test_burn_in_insensitivity(bench):
    # periods draw from (seed, period)-keyed streams, so doubling the
    # burn-in leaves retained draws fixed and only initialization memory
    # (which dies geometrically) can move the panel
    spec, sol = bench
    p30, _ = simulate_panel(spec, sol, SimOptions(burn_in=30), seed=5)
    p60, _ = simulate_panel(spec, sol, SimOptions(burn_in=60), seed=5)
    assert np.allclose(p30.Y, p60.Y, atol=1e-7)
    assert np.allclose(p30.g, p60.g, atol=1e-7)
    assert np.allclose(p30.Y0, p60.Y0, atol=1e-7)
    assert not np.array_equal(p30.Y, p60.Y)


def test_explosive_dynamics_guard():
    # myopic policies with explosive lag dynamics blow up in burn-in
    spec = scalar_spec()
    spec.payoff.rho = np.array([[2.5]])
    sol = solve_myopic(spec)
    with pytest.raises(ExplosiveSampleError):
        simulate_panel(spec, sol, SimOptions(burn_in=200), seed=0)


def test_nonnormal_draws_are_standardized():
    rng = np.random.default_rng(0)
    for dist in ("chi2", "t5"):
        z = _draw(rng, dist, 400000)
        assert abs(z.mean()) < 0.01
        assert abs(z.var() - 1.0) < 0.02
    with pytest.raises(SpecError):
        _draw(rng, "cauchy", 10)


def test_x_tau_override(small):
    spec, sol = small
    fixed = np.full((spec.dims.T, spec.dims.n, spec.dims.Q), 0.25)
    panel, _ = simulate_panel(spec, sol, SimOptions(x_tau=fixed), seed=2)
    assert np.array_equal(panel.X_tau, fixed)


# ============================================================
# CSV round trip
# ============================================================


def test_csv_round_trip(tmp_path, small):
    spec, sol = small
    panel, _ = simulate_panel(spec, sol, SimOptions(), seed=11)
    path = tmp_path / "panel.csv"
    panel_to_csv(panel, path)
    back = panel_from_csv(path, dims=spec.dims)
    assert np.array_equal(back.Y, panel.Y)
    assert np.array_equal(back.g, panel.g)
    assert np.array_equal(back.X, panel.X)
    assert np.array_equal(back.X_tau, panel.X_tau)


def test_csv_rejects_malformed_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("agent,period,y1,q\n1,1,0.0,0.0\n")
    with pytest.raises(SpecError):
        panel_from_csv(path)
