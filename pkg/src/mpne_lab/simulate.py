"""Equilibrium panel generation.

Simulates the closed-loop system implied by a solved policy profile:
characteristics evolve first, the allocator moves on its information
set (which includes the current activity shocks but not the time
effects), agents respond, and the next period repeats.  Trajectories
start at the deterministic steady state and run through a burn-in
before the retained window.
"""

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._linalg import LUFactor
from .errors import ExplosiveSampleError, SpecError

__all__ = [
    "SimOptions",
    "PanelData",
    "LatentTrace",
    "simulate_panel",
    "deterministic_steady_state",
    "spec_fingerprint",
    "panel_to_csv",
    "panel_from_csv",
]


@dataclass
class SimOptions:
    """Simulation controls.

    shock_dist selects the innovation family ("normal", "chi2", "t5");
    the non-normal families are standardized to zero mean and unit
    variance before the covariance scaling, so second moments always
    match the spec.  x_tau, when given, overrides the i.i.d. draws of
    the allocator indicators with a fixed T(+burn_in is not required)
    x n x Q array for application-style runs.
    """

    burn_in: int = 30
    shock_dist: str = "normal"
    x_tau: np.ndarray = None
    magnitude_guard: float = 1e8


@dataclass
class PanelData:
    """Observables: activities, grants, characteristics, indicators."""

    Y: np.ndarray
    g: np.ndarray
    X: np.ndarray
    X_tau: np.ndarray
    Y0: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def m_star(self):
        return self.Y.shape[2]


@dataclass
class LatentTrace:
    """Shock draws and the responsive/autonomous grant split."""

    E: np.ndarray
    e_tau: np.ndarray
    e_x: np.ndarray
    g_L: np.ndarray
    g_A: np.ndarray


def spec_fingerprint(spec):
    """Short stable digest of every numeric field of the spec."""
    h = hashlib.sha256()
    d = spec.dims
    h.update(np.array([d.n, d.m_star, d.K, d.Q, d.T],
                      dtype=np.int64).tobytes())
    h.update(np.float64(spec.delta).tobytes())
    parts = [spec.network.W, spec.payoff.Lambda, spec.payoff.rho,
             spec.payoff.P, spec.payoff.Psi, spec.payoff.phi,
             spec.payoff.Pi, spec.process.gamma, spec.process.varrho,
             spec.process.gamma_y, spec.process.varrho_y,
             spec.process.gamma_g, spec.process.varrho_g,
             spec.process.sigma2, spec.allocator.beta,
             spec.allocator.tau_bar,
             np.atleast_1d(spec.allocator.sigma2_tau),
             spec.shocks.Sigma]
    fe = spec.fixed_effects
    if fe is not None:
        parts += [fe.eta, fe.c_x, fe.alpha, fe.alpha_mean,
                  fe.alpha_x, fe.alpha_x_mean]
    for arr in parts:
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# ============================================================
# Shock draws
# ============================================================

# offset added to the retained-period index when keying per-period
# generators, so burn-in periods (negative indices) stay nonnegative
_PERIOD_BASE = 1 << 20


def _draw(rng, dist, shape):
    if dist == "normal":
        return rng.standard_normal(shape)
    if dist == "chi2":
        return (rng.chisquare(1, shape) - 1.0) / np.sqrt(2.0)
    if dist == "t5":
        return rng.standard_t(5, shape) * np.sqrt(3.0 / 5.0)
    raise SpecError(f"unknown shock_dist {dist!r}")


def _psd_factor(S):
    """Lower factor L with L L' = S for any symmetric PSD S."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(S)
        if vals.min() < -1e-10 * max(1.0, vals.max()):
            raise SpecError("shock covariance is not positive semidefinite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


# ============================================================
# Steady state
# ============================================================


def deterministic_steady_state(spec, sol):
    """Shock-free fixed point of the processes and both policy stages."""
    d = spec.dims
    n, ms, K = d.n, d.m_star, d.K
    nm = n * ms
    W = spec.network.W
    Axk = spec.process.A_x(W)
    Bxk = spec.process.B_x(W)
    Cxk = spec.process.C_x(W)
    fe = spec.fixed_effects
    Pi = spec.payoff.Pi
    lift = [np.kron(Pi[k][:, None], np.eye(n)) for k in range(K)]
    tile = np.kron(np.ones((ms, 1)), np.eye(n))

    tau_ss = spec.allocator.tau_bar + fe.alpha_mean[ms] * np.ones(n)
    vecU_ss = (fe.eta.flatten(order="F")
               + np.kron(fe.alpha_mean[:ms], np.ones(n)))
    cx_ss = [fe.c_x[k] + fe.alpha_x_mean[k] * np.ones(n)
             for k in range(K)]

    # unknowns stacked as (vec Y, g, x_1..x_K)
    dim = nm + n + n * K
    A = np.eye(dim)
    b = np.zeros(dim)
    sY = slice(0, nm)
    sg = slice(nm, nm + n)
    sx = [slice(nm + n + k * n, nm + n + (k + 1) * n) for k in range(K)]

    A[sY, sY] -= sol.A_y
    A[sY, sg] -= sol.B_y @ tile
    for k in range(K):
        A[sY, sx[k]] -= sol.C_y[k] @ lift[k]
    b[sY] = sol.c_y + sol.Cu_y @ vecU_ss

    A[sg, sY] -= sol.A_g
    for k in range(K):
        A[sg, sx[k]] -= sol.C_g[k] @ lift[k]
    b[sg] = sol.c_g + sol.B_g @ tau_ss

    for k in range(K):
        A[sx[k], sx[k]] -= Axk[k]
        A[sx[k], sY] -= Bxk[k]
        A[sx[k], sg] -= Cxk[k]
        b[sx[k]] = cx_ss[k]

    z = LUFactor(A, name="steady state").solve(b)
    Y_ss = z[sY].reshape(ms, n).T
    g_ss = z[sg]
    X_ss = np.column_stack([z[sx[k]] for k in range(K)])
    return Y_ss, g_ss, X_ss


# ============================================================
# Panel simulation
# ============================================================


def simulate_panel(spec, sol, opts=None, seed=0):
    """Simulate T retained periods after a burn-in.

    Returns (PanelData, LatentTrace).  The trace stores the retained
    shock draws and the grant decomposition into the responsive part
    (lagged activities and characteristics) and the autonomous part
    (indicators, constants and time effects).

    Each period draws from its own generator keyed by (seed, period
    index), so lengthening the burn-in changes the retained panel only
    through initialization memory, not through different shock draws.
    """
    opts = opts or SimOptions()
    d = spec.dims
    n, ms, K, Q, T = d.n, d.m_star, d.K, d.Q, d.T
    nm = n * ms
    if T <= 0:
        raise SpecError("spec.dims.T must be positive to simulate")
    W = spec.network.W
    Axk = spec.process.A_x(W)
    Bxk = spec.process.B_x(W)
    Cxk = spec.process.C_x(W)
    sig_x = np.sqrt(spec.process.sigma2)
    fe = spec.fixed_effects
    Pi = spec.payoff.Pi
    lift = [np.kron(Pi[k][:, None], np.eye(n)) for k in range(K)]
    tile = np.kron(np.ones((ms, 1)), np.eye(n))
    Lsig = _psd_factor(spec.shocks.Sigma)
    sig_tau = np.sqrt(spec.allocator.sigma2_tau)
    beta = spec.allocator.beta
    tau_bar = spec.allocator.tau_bar
    guard = float(opts.magnitude_guard)

    Y_ss, g_ss, X_ss = deterministic_steady_state(spec, sol)
    vecY = Y_ss.flatten(order="F")
    g = g_ss.copy()
    x = [X_ss[:, k].copy() for k in range(K)]
    Y0 = Y_ss.copy()     # replaced below by the last burn-in activities

    panel_Y = np.empty((T, n, ms))
    panel_g = np.empty((T, n))
    panel_X = np.empty((T, n, K))
    panel_Xtau = np.empty((T, n, Q))
    tr_E = np.empty((T, n, ms))
    tr_etau = np.empty((T, n))
    tr_ex = np.empty((T, n, K))
    tr_gL = np.empty((T, n))
    tr_gA = np.empty((T, n))

    burn = int(opts.burn_in)
    if burn >= _PERIOD_BASE:
        raise SpecError("burn_in too large")
    for step in range(burn + T):
        t = step - burn          # retained index; negative during burn-in
        retained = t >= 0
        # draws are keyed by (seed, period), so a longer burn-in prepends
        # periods without disturbing the retained window's randomness
        rng = np.random.default_rng((int(seed), _PERIOD_BASE + t))
        if t == 0:
            # presample lag for the retained window
            Y0 = vecY.reshape(ms, n).T.copy()
        # time effects apply to the retained window; burn-in runs at
        # the demeaned baseline
        a_act = fe.alpha_mean[:ms] + (fe.alpha[t, :ms] if retained else 0.0)
        a_tau = fe.alpha_mean[ms] + (fe.alpha[t, ms] if retained else 0.0)
        a_x = fe.alpha_x_mean + (fe.alpha_x[t] if retained else 0.0)

        # characteristics move first
        ex = _draw(rng, opts.shock_dist, (n, K)) * sig_x
        x = [Axk[k] @ x[k] + Bxk[k] @ vecY + Cxk[k] @ g
             + fe.c_x[k] + a_x[k] + ex[:, k] for k in range(K)]

        if opts.x_tau is not None and retained:
            Xtau = np.asarray(opts.x_tau[t], dtype=np.float64)
        else:
            Xtau = rng.standard_normal((n, Q))
        etau = _draw(rng, opts.shock_dist, n) * sig_tau
        tau = tau_bar + Xtau @ beta + a_tau + etau

        E = _draw(rng, opts.shock_dist, (n, ms)) @ Lsig.T
        vecE = E.flatten(order="F")
        U = fe.eta + a_act[None, :] + E
        vecU = U.flatten(order="F")

        # allocator stage, then the agents
        xi = [lift[k] @ x[k] for k in range(K)]
        g_L = sol.A_g @ vecY + sum(sol.C_g[k] @ xi[k] for k in range(K))
        g_A = sol.c_g + sol.B_g @ (tau - etau)
        g = g_L + sol.Ce_g @ vecE + g_A + sol.B_g @ etau
        vecY = (sol.c_y + sol.A_y @ vecY + sol.B_y @ (tile @ g)
                + sum(sol.C_y[k] @ xi[k] for k in range(K))
                + sol.Cu_y @ vecU)

        if not retained:
            peak = max(np.abs(vecY).max(), np.abs(g).max(),
                       max(np.abs(v).max() for v in x))
            if not np.isfinite(peak) or peak > guard:
                raise ExplosiveSampleError(
                    f"burn-in magnitude {peak:.3e} exceeded the guard "
                    f"{guard:.1e} at step {step}")
            continue

        panel_Y[t] = vecY.reshape(ms, n).T
        panel_g[t] = g
        panel_X[t] = np.column_stack(x)
        panel_Xtau[t] = Xtau
        tr_E[t] = E
        tr_etau[t] = etau
        tr_ex[t] = ex
        tr_gL[t] = g_L
        tr_gA[t] = g_A

    for arr in (panel_Y, panel_g, panel_X, panel_Xtau):
        if not np.all(np.isfinite(arr)):
            raise ExplosiveSampleError("non-finite values in retained panel")

    panel = PanelData(Y=panel_Y, g=panel_g, X=panel_X, X_tau=panel_Xtau,
                      Y0=Y0, meta={"seed": int(seed), "burn_in": burn,
                                   "fingerprint": spec_fingerprint(spec)})
    trace = LatentTrace(E=tr_E, e_tau=tr_etau, e_x=tr_ex,
                        g_L=tr_gL, g_A=tr_gA)
    return panel, trace


# ============================================================
# CSV round trip
# ============================================================


def _header(ms, K, Q):
    return (["agent", "period"] + [f"y{p + 1}" for p in range(ms)]
            + ["g"] + [f"x{k + 1}" for k in range(K)]
            + [f"xtau{q + 1}" for q in range(Q)])


def panel_to_csv(panel, path):
    T, n, ms = panel.Y.shape
    K = panel.X.shape[2]
    Q = panel.X_tau.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(ms, K, Q))
        for t in range(T):
            for i in range(n):
                row = [i + 1, t + 1]
                row += [format(v, ".17g") for v in panel.Y[t, i]]
                row.append(format(panel.g[t, i], ".17g"))
                row += [format(v, ".17g") for v in panel.X[t, i]]
                row += [format(v, ".17g") for v in panel.X_tau[t, i]]
                w.writerow(row)


def panel_from_csv(path, dims=None):
    """Read a panel written by panel_to_csv; the header fixes the shape."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd)
        ms = sum(1 for c in head if c.startswith("y") and c != "year")
        K = sum(1 for c in head if c.startswith("x") and not
                c.startswith("xtau"))
        Q = sum(1 for c in head if c.startswith("xtau"))
        if head != _header(ms, K, Q):
            raise SpecError(f"unexpected panel header: {head}")
        rows = [(int(r[0]), int(r[1]), [float(v) for v in r[2:]])
                for r in rd]
    if not rows:
        raise SpecError("panel file has no data rows")
    n = max(r[0] for r in rows)
    T = max(r[1] for r in rows)
    if dims is not None and (n != dims.n or ms != dims.m_star
                             or K != dims.K or Q != dims.Q):
        raise SpecError("panel shape does not match the spec dimensions")
    Y = np.full((T, n, ms), np.nan)
    g = np.full((T, n), np.nan)
    X = np.full((T, n, K), np.nan)
    Xtau = np.full((T, n, Q), np.nan)
    for i, t, vals in rows:
        Y[t - 1, i - 1] = vals[:ms]
        g[t - 1, i - 1] = vals[ms]
        X[t - 1, i - 1] = vals[ms + 1:ms + 1 + K]
        Xtau[t - 1, i - 1] = vals[ms + 1 + K:]
    for arr in (Y, g, X, Xtau):
        if np.isnan(arr).any():
            raise SpecError("panel file is missing agent-period rows")
    return PanelData(Y=Y, g=g, X=X, X_tau=Xtau, Y0=np.zeros((n, ms)),
                     meta={"source": str(path)})
