"""Stationary Markov perfect equilibrium of the allocator/agents game.

Each period the allocator moves first (grants g_t), then the n agents
simultaneously choose their m* activities. Policies are linear in the
public state and value functions are linear-quadratic, so the
equilibrium is computed by iterating the joint policy/value map:

  1. agents' first-order conditions given the current policy profile's
     discounted value aggregates,
  2. allocator's first-order condition given the new agent policy and
     the allocator value blocks from the previous pass,
  3. exact discounted value evaluation (truncated Lyapunov series)
     under the updated policies.

Starting from zero value blocks the first pass reproduces the myopic
game, so ``solve_myopic`` is the delta = 0 special case of the same
loop.

Internal state layout. Both stages stack blocks of size n*m_star. The
agents' stage state is (vec Y_{t-1}, l (x) g_t, xi_{t,1..K}, vec U_t)
where xi_{t,k} = (pi_k (x) I_n) x_{t,k} folds characteristic k into
activity space; the allocator's is (vec Y_{t-1}, xi_{t,1..K}, vec E_t,
l (x) tau_t). Folding is exact because I_{m*} (x) A_k^x commutes with
pi_k (x) I_n, and it keeps every per-agent payoff block in selector
form M (x) e_i v_i' with v_i either e_i or the network row w_i. Value
aggregates summed over agents are then accumulated with einsum
contractions along one power-series loop; no per-agent matrix is ever
formed on the production path.
"""

from dataclasses import dataclass, field

import numpy as np

from ._linalg import LUFactor, lyap_series, power_radius, series_length
from ._linalg import sym
from .errors import NoConvergenceError

__all__ = [
    "SolverOptions", "PolicySolution", "UniquenessReport", "ReducedForm",
    "ValueBlocks", "solve_mpne", "solve_myopic", "check_uniqueness",
    "assemble_reduced_form", "follower_value_blocks",
    "leader_value_blocks", "dump_solution",
]


# ============================================================
# Result containers
# ============================================================


@dataclass
class SolverOptions:
    """Tolerances and controls for the equilibrium iteration.

    ``anderson`` sets the history depth of the secant (Anderson)
    acceleration of the outer fixed-point pass; 0 falls back to the
    plain contraction. Damped runs always iterate plainly.
    """

    tol: float = 1e-10
    max_iter: int = 500
    damping: float = 0.0
    warm_start: object = None
    series_cap: int = 20000
    anderson: int = 4


@dataclass
class UniquenessReport:
    """Contraction gauges behind the uniqueness/stationarity check.

    Each entry is the dominant eigenvalue magnitude found by power
    iteration on the named matrix. T1n/T0 below one give a unique
    stage equilibrium; A1n/A0 below one keep the implied dynamics
    stationary and the discounted value series summable.
    """

    norm_T1n: float
    norm_T0: float
    norm_A1n: float
    norm_A0: float

    @property
    def in_M(self):
        return (self.norm_T1n < 1.0 and self.norm_T0 < 1.0
                and self.norm_A1n < 1.0 and self.norm_A0 < 1.0)


@dataclass
class PolicySolution:
    """Converged policies, stage aggregates and value blocks.

    Agent policy:
        vec Y_t = c_y + A_y vec Y_{t-1} + B_y (l (x) g_t)
                  + sum_k C_y[k] xi_{t,k} + Cu_y vec U_t.
    Allocator policy:
        g_t = c_g + A_g vec Y_{t-1} + B_g tau_t
              + sum_k C_g[k] xi_{t,k} + Ce_g vec E_t.

    R1n/Q1n/L1n/R0/T1n/T0 are the first-order-condition aggregates.
    leader_Q/leader_L hold the allocator value blocks in symmetric
    quadratic storage over the internal allocator layout. A1n/A0 are
    the one-step expectation maps over the observable layouts
    (vec Y, l (x) g, x_1..x_K, vec U) and (vec Y, x, vec E, l (x) tau).
    """

    n: int
    m_star: int
    K: int
    delta: float
    # agent stage
    c_y: np.ndarray = None
    A_y: np.ndarray = None
    B_y: np.ndarray = None
    C_y: list = field(default_factory=list)
    Cu_y: np.ndarray = None
    # allocator stage
    c_g: np.ndarray = None
    A_g: np.ndarray = None
    B_g: np.ndarray = None
    C_g: list = field(default_factory=list)
    Ce_g: np.ndarray = None
    # aggregates
    R1n: np.ndarray = None
    Q1n: np.ndarray = None
    L1n: list = field(default_factory=list)
    R0: np.ndarray = None
    T1n: np.ndarray = None
    T0: np.ndarray = None
    # allocator value blocks
    leader_Q: np.ndarray = None
    leader_L: np.ndarray = None
    # observable-state transition maps
    A1n: np.ndarray = None
    A0: np.ndarray = None
    # diagnostics
    iterations: int = 0
    residual: float = np.inf
    uniqueness: UniquenessReport = None

    @property
    def in_M(self):
        return self.uniqueness.in_M if self.uniqueness else False

    def named_blocks(self):
        out = {"c_y": self.c_y, "A_y": self.A_y, "B_y": self.B_y,
               "Cu_y": self.Cu_y, "c_g": self.c_g, "A_g": self.A_g,
               "B_g": self.B_g, "Ce_g": self.Ce_g, "R1n": self.R1n,
               "Q1n": self.Q1n, "R0": self.R0, "T1n": self.T1n,
               "T0": self.T0}
        for k in range(self.K):
            out["C_y%d" % (k + 1)] = self.C_y[k]
            out["C_g%d" % (k + 1)] = self.C_g[k]
            out["L1n%d" % (k + 1)] = self.L1n[k]
        out["leader_Q"] = self.leader_Q
        out["leader_L"] = self.leader_L
        return out


@dataclass
class ReducedForm:
    """Structural VAR implied by the equilibrium policies.

    R [vec Y_t; g_t] = G vec Y_{t-1} + sum_k Gamma[k] Pi_k x_{t,k}
        + beta_load X_t^tau beta + const + effects + v_t,
    Var(v_t) = Delta. The companion pair stacks the characteristic
    processes: Az s_t = Bz s_{t-1} + shocks, s_t = [vec Y_t; g_t; x_t].
    """

    R: np.ndarray
    G: np.ndarray
    Gamma: list
    beta_load: np.ndarray
    Delta: np.ndarray
    Az: np.ndarray
    Bz: np.ndarray
    const: np.ndarray


# ============================================================
# Geometry: layouts and static matrices
# ============================================================
#
# Agent layout slots:      Y = 0, G = 1, X_k = 2 + k, U = K + 2.
# Allocator layout slots:  Y = 0, X_k = 1 + k, E = K + 1, TAU = K + 2.
# Both stack K + 3 blocks of size nm = n * m_star.


class _Geom:
    def __init__(self, spec, delta):
        d = spec.dims
        self.n, self.ms, self.K = d.n, d.m_star, d.K
        n, ms, K = self.n, self.ms, self.K
        self.nm = n * ms
        self.nblk = K + 3
        self.dim = self.nblk * self.nm
        self.delta = float(delta)
        self.slot_U = K + 2
        self.slot_E = K + 1
        self.slot_TAU = K + 2
        self.W = spec.network.W
        p = spec.payoff
        self.P, self.Psi, self.phi = p.P, p.Psi, p.phi
        self.Lambda, self.rho = p.Lambda, p.rho
        self.eye_nm = np.eye(self.nm)
        self.TIL = np.tile(np.eye(n), (ms, 1))          # l (x) I_n
        self.S = np.kron(p.P + p.Psi, np.eye(n)) - np.kron(
            p.Lambda.T, self.W)
        self.G_myop = np.kron(p.P, np.eye(n)) + np.kron(p.rho.T, self.W)
        self.Phi = np.kron(np.diag(p.phi), np.eye(n))
        # characteristic processes folded into activity space
        pr = spec.process
        fe = spec.fixed_effects
        self.A_x = pr.A_x(self.W)
        self.B_x = pr.B_x(self.W)
        self.C_x = pr.C_x(self.W)
        self.Pi_lift = []     # pi_k (x) I_n maps x_k to xi_k
        self.Axi, self.Bxi, self.CgxI, self.PiC, self.c_xi = \
            [], [], [], [], []
        for k in range(K):
            pik = p.Pi[k].reshape(ms, 1)
            self.Pi_lift.append(np.kron(pik, np.eye(n)))
            self.Axi.append(np.kron(np.eye(ms), self.A_x[k]))
            self.Bxi.append(np.kron(pik, self.B_x[k]))
            # grant loading of x folded to act on l (x) g, and on g
            self.CgxI.append(np.kron(pik, np.tile(self.C_x[k] / ms,
                                                  (1, ms))))
            self.PiC.append(np.kron(pik, self.C_x[k]))
            cx_eff = fe.c_x[k] + fe.alpha_x_mean[k]
            self.c_xi.append(np.kron(p.Pi[k], cx_eff))
        # alpha_mean carries the m* activity columns then the tau column
        am = fe.alpha_mean
        self.eta_vec = (fe.eta.flatten(order="F")
                        + np.kron(am[:ms], np.ones(n)))
        self.tau_bar = spec.allocator.tau_bar + am[ms] * np.ones(n)
        # payoff pieces summed over agents
        self.LZ_sum = np.zeros((self.nm, self.dim))
        self.LZ_sum[:, self.sl(0)] = self.G_myop
        self.LZ_sum[:, self.sl(1)] = self.Phi
        for b in range(2, self.nblk):
            self.LZ_sum[:, self.sl(b)] = self.eye_nm
        self.QY_sum = (np.kron(p.Lambda.T, self.W)
                       - 0.5 * np.kron(p.P + p.Psi, np.eye(n)))
        self.QZ_YY = -0.5 * np.kron(p.P, np.eye(n))
        # per-agent selector pieces: (slot, m* x m* matrix, neighbor?)
        self.lz_pieces = ([(0, p.rho.T, True), (0, p.P, False),
                           (1, np.diag(p.phi), False)]
                          + [(2 + k, np.eye(ms), False)
                             for k in range(K)]
                          + [(self.slot_U, np.eye(ms), False)])
        self.qy_pieces = [(p.Lambda.T, True),
                          (-0.5 * (p.P + p.Psi), False)]
        self.qz_piece = (-0.5 * p.P, False)
        self.theta_E_zero = not any(
            np.any(m) for m in (pr.gamma, pr.varrho, pr.gamma_y,
                                pr.varrho_y, pr.gamma_g, pr.varrho_g))
        # structural sparsity flags, checked once instead of per pass
        self.Axi_nz = [bool(np.any(m)) for m in self.Axi]
        self.Bxi_nz = [bool(np.any(m)) for m in self.Bxi]
        self.CgxI_nz = [bool(np.any(m)) for m in self.CgxI]
        self.PiC_nz = [bool(np.any(m)) for m in self.PiC]
        self.c_xi_nz = [bool(np.any(m)) for m in self.c_xi]
        # allocator-stage statics (independent of the agent policy)
        dim, nm = self.dim, self.nm
        J = np.zeros((dim, dim))
        J[self.sl(0), self.sl(0)] = self.eye_nm
        for k in range(K):
            J[self.sl(2 + k), self.sl(1 + k)] = self.eye_nm
        J[self.sl(self.slot_U), self.sl(self.slot_E)] = self.eye_nm
        self.J = J
        self.cU = np.zeros(dim)
        self.cU[self.sl(self.slot_U)] = self.eta_vec
        self.Kg = np.zeros((dim, n))
        self.Kg[self.sl(1)] = self.TIL
        self.Ycol = np.zeros((dim, nm))
        self.Ycol[self.sl(0)] = self.eye_nm
        self.Xg = np.zeros((dim, n))
        self.Zmap = np.zeros((dim, dim))
        self.zc = np.zeros(dim)
        for k in range(K):
            self.Ycol[self.sl(1 + k)] = self.Bxi[k]
            self.Xg[self.sl(1 + k)] = self.PiC[k]
            self.Zmap[self.sl(1 + k), self.sl(1 + k)] = self.Axi[k]
            self.zc[self.sl(1 + k)] = self.c_xi[k]
        self.zc[self.sl(self.slot_TAU)] = np.tile(self.tau_bar, ms)
        self.Etau = np.zeros((n, dim))
        self.Etau[:, self.sl(self.slot_TAU)] = self.TIL.T / ms
        self.Zmap_nz = any(self.Axi_nz)
        # precontracted allocator pieces
        self.LZ_J = self.LZ_sum @ J
        self.LZ_Kg = self.LZ_sum[:, self.sl(1)] @ self.TIL
        self.QYb = self.QY_sum + self.QY_sum.T
        self.QZb = self.QZ_YY + self.QZ_YY.T

    def sl(self, b):
        return slice(b * self.nm, (b + 1) * self.nm)


def _zero_fp(geom):
    z = np.zeros((geom.nm, geom.nm))
    return {"c_y": np.zeros(geom.nm), "A_y": z.copy(), "B_y": z.copy(),
            "C_y": [z.copy() for _ in range(geom.K)], "Cu_y": z.copy()}


def _zero_lp(geom):
    zn = np.zeros((geom.n, geom.nm))
    return {"c_g": np.zeros(geom.n), "A_g": zn.copy(),
            "B_g": np.zeros((geom.n, geom.n)),
            "C_g": [zn.copy() for _ in range(geom.K)],
            "Ce_g": zn.copy()}


def _policy_matrix_y(geom, fp):
    """Agent policy as one nm x dim matrix over the agent layout."""
    Ly = np.zeros((geom.nm, geom.dim))
    Ly[:, geom.sl(0)] = fp["A_y"]
    Ly[:, geom.sl(1)] = fp["B_y"]
    for k in range(geom.K):
        Ly[:, geom.sl(2 + k)] = fp["C_y"][k]
    Ly[:, geom.sl(geom.slot_U)] = fp["Cu_y"]
    return Ly


def _policy_matrix_g(geom, lp):
    """Allocator policy as one n x dim matrix over its layout."""
    Lg = np.zeros((geom.n, geom.dim))
    Lg[:, geom.sl(0)] = lp["A_g"]
    for k in range(geom.K):
        Lg[:, geom.sl(1 + k)] = lp["C_g"][k]
    Lg[:, geom.sl(geom.slot_E)] = lp["Ce_g"]
    Lg[:, geom.sl(geom.slot_TAU)] = np.tile(lp["B_g"] / geom.ms,
                                            (1, geom.ms))
    return Lg


# ============================================================
# Selector-block contractions
# ============================================================
#
# Every per-agent payoff block is M (x) e_i v_i' with M an m* x m*
# matrix and v_i = e_i (own) or w_i (neighbors). For a left family
# A (nm x c_l, columns indexed (l, i)) and right rows H (nm x c), the
# kernels accumulate for all agents at once
#   direct:     out[(l,i), :] += sum_q (sum_p M[p,q] A[(p,i),(l,i)])
#                                * (v_i' H block q)
#   transpose:  out[(l,i), :] += sum_q (sum_p M[q,p] (v_i' A)[p,(l,i)])
#                                * H[(q,i), :]
# which together give sum_i S_i A' (piece + piece') H.


def _diag_cols(A, ms, n):
    # D[i, p, l] = A[(p,i), (l,i)]
    idx = np.arange(n)
    return A.reshape(ms, n, ms, n)[:, idx, :, idx]


def _contract_out(C, H4, geom, out, w):
    # out[(l,i), c] += w * sum_q C[i, q, l] H4[q, i, c]
    prod = C.transpose(0, 2, 1) @ H4.transpose(1, 0, 2)
    out += w * prod.transpose(1, 0, 2).reshape(geom.nm, -1)


def _form_direct(Aproj, M, nbr, H, geom, out, w):
    ms, n = geom.ms, geom.n
    D = _diag_cols(Aproj, ms, n)
    H4 = H.reshape(ms, n, -1)
    HB = geom.W @ H4 if nbr else H4
    C1 = M.T @ D                    # C1[i, q, l] = sum_p M[p,q] D[i,p,l]
    _contract_out(C1, HB, geom, out, w)


def _form_transpose(U, M, nbr, H, geom, out, w):
    ms, n = geom.ms, geom.n
    VAL = _nbr_val(U, geom) if nbr else _diag_cols(U, ms, n)
    H4 = H.reshape(ms, n, -1)
    C2 = M @ VAL                    # C2[i, q, l] = sum_p M[q,p] VAL[i,p,l]
    _contract_out(C2, H4, geom, out, w)


def _nbr_val(U, geom):
    # VAL[i, p, l] = sum_a U[(p,a), (l,i)] W[i, a]
    ms, n = geom.ms, geom.n
    Ut = np.ascontiguousarray(
        U.reshape(ms, n, ms, n).transpose(3, 0, 2, 1))
    return (Ut.reshape(n, ms * ms, n)
            @ geom.W[:, :, None]).reshape(n, ms, ms)


def _battery(geom, left_rows, PF, right_rows, PX, out, w):
    """Accumulate w * sum_i S_i F' (Qt_i + Qt_i') X for one series term.

    left_rows / right_rows map slot -> family rows (missing = zero);
    PF / PX are the agent-policy projections of the two families.
    Pieces sharing a contraction target are summed in their small
    (n, m*, m*) form first, so a term costs a few batched products
    rather than one pair per piece.
    """
    ms, n = geom.ms, geom.n
    DPF = _diag_cols(PF, ms, n)
    H4x = PX.reshape(ms, n, -1)
    CH = None            # contracts against PX rows as-is
    CB = None            # contracts against neighbour-averaged PX rows

    def acc(C, add):
        return add if C is None else C + add

    for (s, M, nbr) in geom.lz_pieces:
        Us = left_rows.get(s)
        if Us is None:
            continue
        VAL = _nbr_val(Us, geom) if nbr else _diag_cols(Us, ms, n)
        CH = acc(CH, M @ VAL)
    PFW = None
    for (M, nbr) in geom.qy_pieces:
        if nbr:
            CB = acc(CB, M.T @ DPF)
            if PFW is None:
                PFW = _nbr_val(PF, geom)
            CH = acc(CH, M @ PFW)
        else:
            CH = acc(CH, (M.T + M) @ DPF)
    if CH is not None:
        _contract_out(CH, H4x, geom, out, w)
    if CB is not None:
        _contract_out(CB, geom.W @ H4x, geom, out, w)

    # per-slot right families take the direct kernel of their pieces;
    # the own-state quadratic adds both kernels in the vec Y slot
    Mz, nbrz = geom.qz_piece
    U0 = left_rows.get(0)
    for s, Hs in right_rows.items():
        plain, nbrC = None, None
        for (M, nbr) in geom.lz_by_slot.get(s, ()):
            C1 = M.T @ DPF
            if nbr:
                nbrC = acc(nbrC, C1)
            else:
                plain = acc(plain, C1)
        if s == 0 and U0 is not None:
            D0 = _diag_cols(U0, ms, n)
            if nbrz:
                nbrC = acc(nbrC, Mz.T @ D0)
                plain = acc(plain, Mz @ _nbr_val(U0, geom))
            else:
                plain = acc(plain, (Mz.T + Mz) @ D0)
        H4s = Hs.reshape(ms, n, -1)
        if plain is not None:
            _contract_out(plain, H4s, geom, out, w)
        if nbrC is not None:
            _contract_out(nbrC, geom.W @ H4s, geom, out, w)


def _battery_linear(geom, left_rows, PF, cy, out, w):
    """Accumulate w * sum_i S_i F' Lt_i for the per-period linear term
    Lt_i = (L_Z,i' + Ly' (Q_Y,i + Q_Y,i')) c_y."""
    cyc = cy.reshape(-1, 1)
    for (s, M, nbr) in geom.lz_pieces:
        Us = left_rows.get(s)
        if Us is not None:
            _form_transpose(Us, M, nbr, cyc, geom, out, w)
    for (M, nbr) in geom.qy_pieces:
        _form_direct(PF, M, nbr, cyc, geom, out, w)
        _form_transpose(PF, M, nbr, cyc, geom, out, w)


# ============================================================
# One-step expectation maps, agent stage
# ============================================================


class _AgentMaps:
    """E_t[z^A_{t+1}] = cstar + F vec Y_t + G z^A_t under the current
    allocator policy and the characteristic processes."""

    def __init__(self, geom, lp):
        self.geom = geom
        K, ms, n, nm = geom.K, geom.ms, geom.n, geom.nm
        g_row = lp["A_g"].copy()
        for k in range(K):
            g_row = g_row + lp["C_g"][k] @ geom.Bxi[k]
        self.F_G = np.tile(g_row, (ms, 1))
        # G blocks: (row_slot, col_slot) -> matrix
        self.Gmap = {}
        for k in range(K):
            if geom.Axi_nz[k]:
                self.Gmap[(2 + k, 2 + k)] = geom.Axi[k]
            if geom.CgxI_nz[k]:
                self.Gmap[(2 + k, 1)] = geom.CgxI[k]
            blk_x = lp["C_g"][k] @ geom.Axi[k]
            if np.any(blk_x):
                self.Gmap[(1, 2 + k)] = np.tile(blk_x, (ms, 1))
        g_von_g = np.zeros((n, nm))
        for k in range(K):
            g_von_g = g_von_g + lp["C_g"][k] @ geom.CgxI[k]
        if np.any(g_von_g):
            self.Gmap[(1, 1)] = np.tile(g_von_g, (ms, 1))
        # constants
        self.cstar = np.zeros(geom.dim)
        g_const = lp["c_g"] + lp["B_g"] @ geom.tau_bar
        for k in range(K):
            g_const = g_const + lp["C_g"][k] @ geom.c_xi[k]
        self.cstar[geom.sl(1)] = np.tile(g_const, ms)
        for k in range(K):
            self.cstar[geom.sl(2 + k)] = geom.c_xi[k]
        self.cstar[geom.sl(geom.slot_U)] = geom.eta_vec

    def apply_F(self, N):
        geom = self.geom
        one_d = N.ndim == 1
        Nm = N.reshape(geom.nm, -1)
        out = np.zeros((geom.dim, Nm.shape[1]))
        out[geom.sl(0)] = Nm
        out[geom.sl(1)] = self.F_G @ Nm
        for k in range(geom.K):
            if geom.Bxi_nz[k]:
                out[geom.sl(2 + k)] = geom.Bxi[k] @ Nm
        return out[:, 0] if one_d else out

    def apply_G(self, M):
        geom = self.geom
        one_d = M.ndim == 1
        Mm = M.reshape(geom.dim, -1)
        out = np.zeros_like(Mm)
        for (rb, cb), blk in self.Gmap.items():
            out[geom.sl(rb)] += blk @ Mm[geom.sl(cb)]
        return out[:, 0] if one_d else out

    def apply_A(self, Ly, M):
        return self.apply_F(Ly @ M) + self.apply_G(M)

    def apply_A_T(self, Ly, M):
        geom = self.geom
        one_d = M.ndim == 1
        Mm = M.reshape(geom.dim, -1)
        ft = Mm[geom.sl(0)] + self.F_G.T @ Mm[geom.sl(1)]
        for k in range(geom.K):
            if geom.Bxi_nz[k]:
                ft = ft + geom.Bxi[k].T @ Mm[geom.sl(2 + k)]
        out = Ly.T @ ft
        for (rb, cb), blk in self.Gmap.items():
            out[geom.sl(cb)] += blk.T @ Mm[geom.sl(rb)]
        return out[:, 0] if one_d else out


def _op_norm(apply_fn, apply_tn, dim, tol=1e-8, max_iter=5000,
             v0=None):
    """Spectral norm of an implicitly applied linear operator.

    Returns (norm, v); pass the vector back as ``v0`` to warm-start the
    next call on a nearby operator. The Rayleigh quotients increase
    monotonically, so the estimate approaches the norm from below.
    """
    v = np.ones(dim) / np.sqrt(dim) if v0 is None else v0
    lam = 0.0
    for _ in range(max_iter):
        w = apply_tn(apply_fn(v))
        lam_new = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, None
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0))), v


# ============================================================
# Agent stage: value aggregates along one series loop
# ============================================================


def _agent_aggregates(geom, fp, lp, maps, Ly, opts, want_L1n=True,
                      agg_tol=None, pw=None):
    """Discounted FOC aggregates (Q1n, L1n[k], cddot) for the current
    policy profile.

    Propagates the vec Y injection family F and the xi-injection
    channels H_k through powers of the closed transition, contracting
    each power against the selector payoff pieces. The running vector
    r_j = A^j cstar + sum_{s<j} A^s c1n carries the constant chains in
    an extra column of the same family, so one battery pass per term
    yields the FOC intercept as well. The linear (c_y) chain factors
    out of the series and is contracted once from the weighted sums of
    the left rows.

    ``want_L1n=False`` drops the xi-injection columns (then L1n is
    returned as None), ``agg_tol`` overrides the series tail target,
    and ``pw`` carries the power-iteration vector between calls.
    """
    K, nm, ms, dim = geom.K, geom.nm, geom.ms, geom.dim
    delta = geom.delta
    if agg_tol is None:
        agg_tol = opts.tol / 10.0
    ncols = (K + 1) * nm if want_L1n else nm
    nca = ncols + 1
    fast = geom.theta_E_zero

    # j = 0 family rows; columns [F | H_1 .. H_K | r]
    rows0 = {0: np.zeros((nm, nca)), 1: np.zeros((nm, nca))}
    rows0[0][:, :nm] = geom.eye_nm
    rows0[1][:, :nm] = maps.F_G
    for k in range(K):
        if want_L1n:
            cols = slice((1 + k) * nm, (2 + k) * nm)
            rows0[1][:, cols] = np.tile(lp["C_g"][k], (ms, 1))
            blk = rows0.setdefault(2 + k, np.zeros((nm, nca)))
            blk[:, cols] = geom.eye_nm
        if geom.Bxi_nz[k]:
            blk = rows0.setdefault(2 + k, np.zeros((nm, nca)))
            blk[:, :nm] = geom.Bxi[k]

    c1n = maps.cstar + maps.apply_F(fp["c_y"])
    rvec = maps.cstar.copy()
    for s in range(geom.nblk):
        seg = rvec[geom.sl(s)]
        if np.any(seg):
            rows0.setdefault(s, np.zeros((nm, nca)))[:, ncols] = seg

    # slots whose F-part can carry mass (left rows for the transposes)
    fslots = {0, 1}
    fslots.update(2 + k for k in range(K) if geom.Bxi_nz[k])
    fslots.update(rb for (rb, cb) in maps.Gmap)

    def project(rows):
        out = np.zeros((nm, nca))
        blk = rows.get(0)
        if blk is not None:
            out += fp["A_y"] @ blk
        blk = rows.get(1)
        if blk is not None:
            out += fp["B_y"] @ blk
        for k in range(K):
            blk = rows.get(2 + k)
            if blk is not None:
                out += fp["C_y"][k] @ blk
        blk = rows.get(geom.slot_U)
        if blk is not None:
            out += fp["Cu_y"] @ blk
        return out

    cy_nz = bool(np.any(fp["c_y"]))
    AGG = np.zeros((nm, nca))
    CLIN = np.zeros((nm, 1))
    WPF = np.zeros((nm, nm))
    WLEFT = {}

    def term(rows, PXa, w):
        PF = PXa[:, :nm]
        left = {s: rows[s][:, :nm] for s in rows if s in fslots}
        _battery(geom, left, PF, rows, PXa, AGG, w)
        if cy_nz:
            WPF[...] += w * PF
            for s, Us in left.items():
                acc = WLEFT.get(s)
                if acc is None:
                    WLEFT[s] = w * Us
                else:
                    acc += w * Us

    PX0 = project(rows0)
    term(rows0, PX0, 1.0)

    v0 = pw.get("v") if pw is not None else None
    norm_A, v_pw = _op_norm(lambda v: maps.apply_A(Ly, v),
                            lambda v: maps.apply_A_T(Ly, v), dim,
                            tol=1e-6, v0=v0)
    if pw is not None:
        pw["v"] = v_pw
    norm_A *= 1.0 + 1e-5        # the power estimate sits below the norm
    q = delta * norm_A ** 2
    scale = max(float(np.linalg.norm(AGG)), 1.0)
    if q < 1.0:
        H = min(series_length(q, scale, agg_tol), opts.series_cap)
        resid_stop = False
    else:
        H = opts.series_cap
        resid_stop = True

    w = 1.0
    if fast:
        # theta_E = 0: for j >= 1 the propagated families live in the
        # Y and G slot rows; constant-chain mass parked in higher slots
        # never moves, so those right-side pieces contract once against
        # the discount-weighted sum of the policy projections.
        extras = [(s, rvec[geom.sl(s)].copy())
                  for s in sorted(rows0) if s > 1
                  and np.any(rvec[geom.sl(s)])]
        pextra = np.zeros(nm)
        for s, seg in extras:
            if s == geom.slot_U:
                pextra += fp["Cu_y"] @ seg
            else:
                pextra += fp["C_y"][s - 2] @ seg
        WPFC = np.zeros((nm, nm))
        rbuf = {0: np.zeros((nm, nca)), 1: np.zeros((nm, nca))}
        N = PX0
        for _ in range(H):
            rvec = maps.apply_A(Ly, rvec) + c1n
            w *= delta
            NF = N[:, :ncols]
            rbuf[0][:, :ncols] = NF
            rbuf[0][:, ncols] = rvec[geom.sl(0)]
            rbuf[1][:, :ncols] = maps.F_G @ NF
            rbuf[1][:, ncols] = rvec[geom.sl(1)]
            PXa = fp["A_y"] @ rbuf[0] + fp["B_y"] @ rbuf[1]
            PXa[:, ncols] += pextra
            term(rbuf, PXa, w)
            WPFC += w * PXa[:, :nm]
            if resid_stop and w * float(np.linalg.norm(NF)) < \
                    agg_tol / 2.0:
                break
            N = PXa
        if extras:
            lzp = {s: (Mp, nbrp) for (s, Mp, nbrp) in geom.lz_pieces
                   if s > 1}
            CAGv = AGG[:, ncols:]
            for s, seg in extras:
                Mp, nbrp = lzp[s]
                _form_direct(WPFC, Mp, nbrp, seg.reshape(nm, 1),
                             geom, CAGv, 1.0)
    else:
        M = np.zeros((dim, ncols))
        for s, blk in rows0.items():
            M[geom.sl(s)] = blk[:, :ncols]
        bufs = {}
        for _ in range(H):
            rvec = maps.apply_A(Ly, rvec) + c1n
            M = maps.apply_A(Ly, M)
            w *= delta
            rows = {}
            for s in range(geom.nblk):
                fam = M[geom.sl(s)]
                fnz = bool(np.any(fam))
                rseg = rvec[geom.sl(s)]
                if not (fnz or np.any(rseg)):
                    continue
                buf = bufs.get(s)
                if buf is None:
                    buf = bufs[s] = np.zeros((nm, nca))
                if fnz:
                    buf[:, :ncols] = fam
                else:
                    buf[:, :ncols] = 0.0
                buf[:, ncols] = rseg
                rows[s] = buf
            PXa = np.empty((nm, nca))
            PXa[:, :ncols] = Ly @ M
            PXa[:, ncols] = Ly @ rvec
            term(rows, PXa, w)
            if resid_stop and w * float(np.linalg.norm(M)) < \
                    agg_tol / 2.0:
                break

    if cy_nz:
        _battery_linear(geom, WLEFT, WPF, fp["c_y"], CLIN, 1.0)
    Q1n = AGG[:, :nm]
    L1n = ([AGG[:, (1 + k) * nm:(2 + k) * nm] for k in range(K)]
           if want_L1n else None)
    cddot = delta * (AGG[:, ncols] + CLIN[:, 0])
    return Q1n, L1n, cddot


# ============================================================
# Allocator stage
# ============================================================


class _LeaderMaps:
    """Maps of the allocator stage for a given agent policy.

    The stage state is z^R; the decision g is kept free:
        z^A     = J z + Kg g + cU,
        vec Y*  = b_Y + L_Y z + D_Y g,
        E[z^R'] = Ycol vec Y* + Xg g + Zmap z + zc.
    J, Kg, cU, Ycol, Xg, Zmap, zc and Etau do not depend on the agent
    policy and live on the geometry; only D_Y, L_Y and b_Y are formed
    here. L_Y = Ly J is a column shuffle of Ly, so no product is taken.
    """

    def __init__(self, geom, Ly, cy):
        self.geom = geom
        self.D_Y = Ly[:, geom.sl(1)] @ geom.TIL
        L_Y = np.zeros_like(Ly)
        L_Y[:, geom.sl(0)] = Ly[:, geom.sl(0)]
        for k in range(geom.K):
            L_Y[:, geom.sl(1 + k)] = Ly[:, geom.sl(2 + k)]
        L_Y[:, geom.sl(geom.slot_E)] = Ly[:, geom.sl(geom.slot_U)]
        self.L_Y = L_Y
        self.b_Y = cy + Ly[:, geom.sl(geom.slot_U)] @ geom.eta_vec
        self.J = geom.J
        self.cU = geom.cU
        self.Kg = geom.Kg
        self.Ycol = geom.Ycol
        self.Xg = geom.Xg
        self.Zmap = geom.Zmap
        self.zc = geom.zc
        self.Etau = geom.Etau


def _leader_foc(geom, lm, leader_Q, leader_L):
    """Assemble the allocator FOC as M g + N z^R + a = 0.

    Uses Kg' LZ' X = (LZ Kg)' X, and drops every product of Kg or cU
    with the own-state quadratic: that quadratic lives in the vec Y
    rows, which Kg and cU never touch.
    """
    delta = geom.delta
    QYb = geom.QYb
    LZKg = geom.LZ_Kg
    D_Y, L_Y, b_Y = lm.D_Y, lm.L_Y, lm.b_Y
    M = (-np.eye(geom.n) + D_Y.T @ (LZKg + QYb @ D_Y)
         + LZKg.T @ D_Y)
    N = (geom.Etau + D_Y.T @ (geom.LZ_J + QYb @ L_Y)
         + LZKg.T @ L_Y)
    a = (D_Y.T @ (geom.eta_vec + QYb @ b_Y) + LZKg.T @ b_Y)
    if delta > 0.0 and leader_Q is not None:
        # dzdg' leader_Q row-block by row-block; dzdg = Ycol D_Y + Xg
        # has mass in the vec Y rows and, when the processes react to
        # activities or grants, in the x rows.
        QT = D_Y.T @ leader_Q[geom.sl(0)]
        dzdg = geom.Ycol @ D_Y + geom.Xg
        for k in range(geom.K):
            if geom.Bxi_nz[k] or geom.PiC_nz[k]:
                QT = QT + (dzdg[geom.sl(1 + k)].T
                           @ leader_Q[geom.sl(1 + k)])
        QT = (2.0 * delta) * QT                  # n x dim
        M = M + QT @ dzdg
        NQ = QT[:, geom.sl(0)] @ L_Y
        for k in range(geom.K):
            if geom.Bxi_nz[k]:
                NQ = NQ + QT[:, geom.sl(1 + k)] @ (geom.Bxi[k] @ L_Y)
            if geom.Axi_nz[k]:
                NQ[:, geom.sl(1 + k)] += (QT[:, geom.sl(1 + k)]
                                          @ geom.Axi[k])
        N = N + NQ
        a = (a + QT @ (geom.Ycol @ b_Y + geom.zc)
             + delta * dzdg.T @ leader_L)
    return M, N, a


def _leader_value(geom, lm, Lg, cg, opts):
    """Exact allocator value blocks under the current policy profile.

    Amap = J + Kg Lg is applied through its two parts: in the vec Y
    rows Amap equals J (Kg has no vec Y rows), so the own-state
    quadratic embeds as a constant block, and its product with avec
    vanishes since avec has no vec Y entries either.
    """
    delta = geom.delta
    nm, dim = geom.nm, geom.dim
    LZ = geom.LZ_sum
    avec = geom.cU + geom.Kg @ cg
    Bmap = lm.L_Y + lm.D_Y @ Lg
    bvec = lm.b_Y + lm.D_Y @ cg
    LZA = geom.LZ_J + geom.LZ_Kg @ Lg            # LZ @ Amap
    Theta = (Bmap.T @ (LZA + geom.QY_sum @ Bmap)
             - 0.5 * Lg.T @ Lg + geom.Etau.T @ Lg)
    Theta[geom.sl(0), geom.sl(0)] += geom.QZ_YY  # A_Y' Q_Z A_Y
    Qt0 = sym(Theta)
    LZtb = LZ.T @ bvec                           # Amap' w = J' w + Lg' Kg' w
    Lt0 = (geom.J.T @ LZtb + Lg.T @ (geom.TIL.T @ LZtb[geom.sl(1)])
           + Bmap.T @ (LZ @ avec + geom.QYb @ bvec)
           - Lg.T @ cg + geom.Etau.T @ cg)
    if delta == 0.0:
        return Qt0, Lt0
    # transition of z^R under the composed policies
    c0 = np.zeros(dim)
    c0[geom.sl(0)] = bvec
    for k in range(geom.K):
        c0[geom.sl(1 + k)] = geom.c_xi[k]
        if geom.Bxi_nz[k]:
            c0[geom.sl(1 + k)] += geom.Bxi[k] @ bvec
        if geom.PiC_nz[k]:
            c0[geom.sl(1 + k)] += geom.PiC[k] @ cg
    c0[geom.sl(geom.slot_TAU)] = np.tile(geom.tau_bar, geom.ms)
    if geom.theta_E_zero:
        # only the vec Y rows of the transition are active
        AR = Bmap[:, geom.sl(0)]
        PYY = lyap_series(AR, Qt0[geom.sl(0), geom.sl(0)], delta,
                          tol=opts.tol / 10.0)
        Q0 = Qt0 + delta * Bmap.T @ (PYY @ Bmap)
        rhs = Lt0 + delta * Bmap.T @ (2.0 * Q0 @ c0)[geom.sl(0)]
        y = np.linalg.solve(np.eye(nm) - delta * AR.T,
                            rhs[geom.sl(0)])
        L0 = rhs + delta * Bmap.T @ y
    else:
        A0 = np.zeros((dim, dim))
        A0[geom.sl(0)] = Bmap
        for k in range(geom.K):
            A0[geom.sl(1 + k)] = geom.Bxi[k] @ Bmap + geom.PiC[k] @ Lg
            A0[geom.sl(1 + k), geom.sl(1 + k)] += geom.Axi[k]
        Q0 = lyap_series(A0, Qt0, delta, tol=opts.tol / 10.0)
        rhs = Lt0 + delta * A0.T @ (2.0 * Q0 @ c0)
        L0 = np.linalg.solve(np.eye(dim) - delta * A0.T, rhs)
    return Q0, L0


# ============================================================
# Main iteration
# ============================================================


def _block_residual(new, old):
    r = 0.0
    for key, a in new.items():
        blocks = a if isinstance(a, list) else [a]
        olds = old.get(key)
        olds = olds if isinstance(olds, list) else [olds] * len(blocks)
        for ak, bk in zip(blocks, olds):
            if ak is None:
                continue
            bb = np.zeros_like(ak) if bk is None else bk
            r = max(r, float(np.max(np.abs(ak - bb))
                             / (1.0 + np.max(np.abs(ak)))))
    return r


class _StatePacker:
    """Flattens the policy profile and allocator value blocks into one
    vector for the secant acceleration, and restores them."""

    def __init__(self, geom):
        nm, n, K, dim = geom.nm, geom.n, geom.K, geom.dim
        self.K = K
        self.shapes = ([("A_y", (nm, nm)), ("B_y", (nm, nm))]
                       + [("C_y", (nm, nm))] * K
                       + [("Cu_y", (nm, nm)), ("c_y", (nm,)),
                          ("A_g", (n, nm)), ("B_g", (n, n))]
                       + [("C_g", (n, nm))] * K
                       + [("Ce_g", (n, nm)), ("c_g", (n,)),
                          ("lQ", (dim, dim)), ("lL", (dim,))])

    def pack(self, fp, lp, lQ, lL):
        parts = ([fp["A_y"], fp["B_y"]] + list(fp["C_y"])
                 + [fp["Cu_y"], fp["c_y"], lp["A_g"], lp["B_g"]]
                 + list(lp["C_g"]) + [lp["Ce_g"], lp["c_g"], lQ, lL])
        return np.concatenate([p.ravel() for p in parts])

    def unpack(self, u):
        vals = []
        pos = 0
        for _, shape in self.shapes:
            size = int(np.prod(shape))
            vals.append(u[pos:pos + size].reshape(shape))
            pos += size
        K = self.K
        fp = {"A_y": vals[0], "B_y": vals[1],
              "C_y": vals[2:2 + K], "Cu_y": vals[2 + K],
              "c_y": vals[3 + K]}
        lp = {"A_g": vals[4 + K], "B_g": vals[5 + K],
              "C_g": vals[6 + K:6 + 2 * K], "Ce_g": vals[6 + 2 * K],
              "c_g": vals[7 + 2 * K]}
        lQ = sym(vals[8 + 2 * K])
        lL = vals[9 + 2 * K]
        return fp, lp, lQ, lL


def _solve(spec, delta, opts):
    geom = _Geom(spec, delta)
    n, K = geom.n, geom.K

    fp, lp = _zero_fp(geom), _zero_lp(geom)
    leader_Q, leader_L = None, np.zeros(geom.dim)
    ws = opts.warm_start
    if ws is not None:
        fp = {"c_y": ws.c_y.copy(), "A_y": ws.A_y.copy(),
              "B_y": ws.B_y.copy(),
              "C_y": [c.copy() for c in ws.C_y],
              "Cu_y": ws.Cu_y.copy()}
        lp = {"c_g": ws.c_g.copy(), "A_g": ws.A_g.copy(),
              "B_g": ws.B_g.copy(),
              "C_g": [c.copy() for c in ws.C_g],
              "Ce_g": ws.Ce_g.copy()}
        if ws.leader_Q is not None:
            leader_Q = ws.leader_Q.copy()
            leader_L = ws.leader_L.copy()

    # L1n feeds back into the iteration only through the xi-response
    # blocks; when every A^x is zero it is needed just once at the end.
    need_L1n = any(geom.Axi_nz)
    pw = {"v": None}
    use_aa = opts.damping == 0.0 and opts.anderson > 0
    packer = _StatePacker(geom) if use_aa else None
    us, fs = [], []
    best_res = np.inf

    prev = {}
    residual = np.inf
    if ws is not None:
        # measure the first pass against the supplied starting point
        # and run it at full aggregate precision
        prev = {"c_y": fp["c_y"], "A_y": fp["A_y"], "B_y": fp["B_y"],
                "C_y": fp["C_y"], "Cu_y": fp["Cu_y"]}
        prev.update({"g_" + k: v for k, v in lp.items()})
        if ws.Q1n is not None:
            prev["Q1n"] = ws.Q1n
        if need_L1n and ws.L1n:
            prev["L1n"] = ws.L1n
        if leader_Q is not None:
            prev["leader_Q"], prev["leader_L"] = leader_Q, leader_L
        residual = opts.tol
    it = 0
    for it in range(1, opts.max_iter + 1):
        # early passes only need the aggregates roughly; the tail
        # target tightens with the residual down to tol / 10
        agg_tol = max(opts.tol, min(1e-3, 1e-2 * residual)) / 10.0
        maps = _AgentMaps(geom, lp)
        Ly = _policy_matrix_y(geom, fp)
        Q1n, L1n, cddot = _agent_aggregates(
            geom, fp, lp, maps, Ly, opts, want_L1n=need_L1n,
            agg_tol=agg_tol, pw=pw)
        R = geom.S - delta * Q1n
        R_lu = LUFactor(R, name="agent FOC system")
        Cy_base = R_lu.solve(geom.eye_nm)
        fp_new = {"A_y": R_lu.solve(geom.G_myop),
                  "B_y": R_lu.solve(geom.Phi),
                  "C_y": [R_lu.solve(geom.eye_nm
                                     + delta * L1n[k] @ geom.Axi[k])
                          if geom.Axi_nz[k] else Cy_base.copy()
                          for k in range(K)],
                  "Cu_y": Cy_base,
                  "c_y": R_lu.solve(cddot)}
        lm = _LeaderMaps(geom, _policy_matrix_y(geom, fp_new),
                         fp_new["c_y"])
        M0, N0, a0 = _leader_foc(geom, lm, leader_Q, leader_L)
        R0_lu = LUFactor(-M0, name="allocator FOC system")
        Lg_R = R0_lu.solve(N0)
        lp_new = {"c_g": R0_lu.solve(a0),
                  "A_g": Lg_R[:, geom.sl(0)].copy(),
                  "C_g": [Lg_R[:, geom.sl(1 + k)].copy()
                          for k in range(K)],
                  "Ce_g": Lg_R[:, geom.sl(geom.slot_E)].copy(),
                  "B_g": Lg_R[:, geom.sl(geom.slot_TAU)] @ geom.TIL}
        if opts.damping > 0.0 and it > 1:
            lam = opts.damping
            for key in ("c_y", "A_y", "B_y", "Cu_y"):
                fp_new[key] = (1 - lam) * fp_new[key] + lam * fp[key]
            fp_new["C_y"] = [(1 - lam) * cn + lam * co for cn, co
                             in zip(fp_new["C_y"], fp["C_y"])]
            for key in ("c_g", "A_g", "B_g", "Ce_g"):
                lp_new[key] = (1 - lam) * lp_new[key] + lam * lp[key]
            lp_new["C_g"] = [(1 - lam) * cn + lam * co for cn, co
                             in zip(lp_new["C_g"], lp["C_g"])]
        lm_v = _LeaderMaps(geom, _policy_matrix_y(geom, fp_new),
                           fp_new["c_y"])
        leader_Q_new, leader_L_new = _leader_value(
            geom, lm_v, _policy_matrix_g(geom, lp_new),
            lp_new["c_g"], opts)

        cur = {k: fp_new[k] for k in fp_new}
        cur.update({"g_" + k: v for k, v in lp_new.items()})
        cur["Q1n"] = Q1n
        if need_L1n:
            cur["L1n"] = L1n
        cur["leader_Q"], cur["leader_L"] = leader_Q_new, leader_L_new
        residual = _block_residual(cur, prev)
        if not np.isfinite(residual):
            raise NoConvergenceError("equilibrium iteration diverged",
                                     iterations=it, delta=residual)
        prev = cur
        if residual < opts.tol:
            fp, lp = fp_new, lp_new
            leader_Q, leader_L = leader_Q_new, leader_L_new
            break
        accelerated = False
        if use_aa and leader_Q is not None:
            if residual > 10.0 * best_res:
                us, fs = [], []         # history left a bad trail
            best_res = min(best_res, residual)
            u_k = packer.pack(fp, lp, leader_Q, leader_L)
            g_k = packer.pack(fp_new, lp_new, leader_Q_new,
                              leader_L_new)
            f_k = g_k - u_k
            us.append(u_k)
            fs.append(f_k)
            if len(us) > opts.anderson + 1:
                us.pop(0)
                fs.pop(0)
            if len(us) >= 2:
                dF = np.stack([fs[i + 1] - fs[i]
                               for i in range(len(fs) - 1)], axis=1)
                dU = np.stack([us[i + 1] - us[i]
                               for i in range(len(us) - 1)], axis=1)
                gam, *_ = np.linalg.lstsq(dF, f_k, rcond=1e-12)
                u_next = g_k - (dU + dF) @ gam
                if (np.all(np.isfinite(u_next))
                        and float(np.abs(gam).max()) < 1e3):
                    fp, lp, leader_Q, leader_L = packer.unpack(u_next)
                    accelerated = True
        if not accelerated:
            fp, lp = fp_new, lp_new
            leader_Q, leader_L = leader_Q_new, leader_L_new
    else:
        raise NoConvergenceError(
            "equilibrium iteration did not converge "
            "(residual %.3e after %d passes)" % (residual,
                                                 opts.max_iter),
            iterations=opts.max_iter, delta=residual)

    # final aggregates consistent with the converged policies
    maps = _AgentMaps(geom, lp)
    Ly = _policy_matrix_y(geom, fp)
    Q1n, L1n, cddot = _agent_aggregates(geom, fp, lp, maps, Ly, opts,
                                        pw=pw)
    R = geom.S - delta * Q1n
    LUFactor(R, name="agent FOC system")
    lm = _LeaderMaps(geom, Ly, fp["c_y"])
    M0, _, _ = _leader_foc(geom, lm, leader_Q, leader_L)
    R0 = -M0
    IPP = np.linalg.inv(geom.P + geom.Psi)
    T1n = (np.kron(IPP @ geom.Lambda.T, geom.W)
           + delta * np.kron(IPP, np.eye(n)) @ Q1n)
    sol = PolicySolution(
        n=n, m_star=geom.ms, K=K, delta=delta,
        c_y=fp["c_y"], A_y=fp["A_y"], B_y=fp["B_y"],
        C_y=list(fp["C_y"]), Cu_y=fp["Cu_y"],
        c_g=lp["c_g"], A_g=lp["A_g"], B_g=lp["B_g"],
        C_g=list(lp["C_g"]), Ce_g=lp["Ce_g"],
        R1n=R, Q1n=Q1n, L1n=list(L1n), R0=R0,
        T1n=T1n, T0=np.eye(n) - R0,
        leader_Q=leader_Q, leader_L=leader_L,
        iterations=it, residual=residual)
    sol.A1n, sol.A0 = _observable_maps(geom, sol)
    sol.uniqueness = check_uniqueness(sol)
    return sol


def solve_mpne(spec, opts=None):
    """Solve for the stationary Markov perfect equilibrium of ``spec``."""
    opts = opts or SolverOptions()
    return _solve(spec, spec.delta, opts)


def solve_myopic(spec, opts=None):
    """Equilibrium of the one-shot game (future payoffs ignored)."""
    opts = opts or SolverOptions()
    sol = _solve(spec, 0.0, opts)
    # without a continuation the forward-looking first-order-condition
    # aggregates vanish identically; value curvature itself does not
    sol.Q1n = np.zeros_like(sol.Q1n)
    sol.L1n = [np.zeros_like(L) for L in sol.L1n]
    return sol


def check_uniqueness(sol, tol=1e-10, max_iter=10000):
    """Power-iteration contraction gauges for a solved equilibrium."""
    return UniquenessReport(
        norm_T1n=power_radius(sol.T1n, tol=tol, max_iter=max_iter),
        norm_T0=power_radius(sol.T0, tol=tol, max_iter=max_iter),
        norm_A1n=power_radius(sol.A1n, tol=tol, max_iter=max_iter),
        norm_A0=power_radius(sol.A0, tol=tol, max_iter=max_iter))


# ============================================================
# Observable-state maps and reduced form
# ============================================================


def _observable_maps(geom, sol):
    """One-step expectation maps over the observable state layouts.

    Agent side: (vec Y_{t-1}, l (x) g_t, x_{t,1..K}, vec U_t);
    allocator side: (vec Y_{t-1}, x_t, vec E_t, l (x) tau_t).
    """
    n, ms, K, nm = geom.n, geom.ms, geom.K, geom.nm
    nK = n * K
    dA = 3 * nm + nK
    oY, oG, oX, oU = 0, nm, 2 * nm, 2 * nm + nK
    Gex = np.zeros((n, dA))
    Gex[:, oG:oG + nm] = geom.TIL.T / ms
    Ly_x = np.zeros((nm, dA))
    Ly_x[:, oY:oY + nm] = sol.A_y
    Ly_x[:, oG:oG + nm] = sol.B_y
    for k in range(K):
        Ly_x[:, oX + k * n:oX + (k + 1) * n] = \
            sol.C_y[k] @ geom.Pi_lift[k]
    Ly_x[:, oU:oU + nm] = sol.Cu_y
    x_rows = []
    for k in range(K):
        row = geom.B_x[k] @ Ly_x + geom.C_x[k] @ Gex
        row[:, oX + k * n:oX + (k + 1) * n] += geom.A_x[k]
        x_rows.append(row)
    g_next = sol.A_g @ Ly_x
    for k in range(K):
        g_next = g_next + (sol.C_g[k] @ geom.Pi_lift[k]) @ x_rows[k]
    A1n = np.zeros((dA, dA))
    A1n[oY:oY + nm] = Ly_x
    A1n[oG:oG + nm] = np.tile(g_next, (ms, 1))
    for k in range(K):
        A1n[oX + k * n:oX + (k + 1) * n] = x_rows[k]
    # allocator layout
    rY, rX, rE, rT = 0, nm, nm + nK, 2 * nm + nK
    Lg_x = np.zeros((n, dA))
    Lg_x[:, rY:rY + nm] = sol.A_g
    for k in range(K):
        Lg_x[:, rX + k * n:rX + (k + 1) * n] = \
            sol.C_g[k] @ geom.Pi_lift[k]
    Lg_x[:, rE:rE + nm] = sol.Ce_g
    Lg_x[:, rT:rT + nm] = sol.B_g @ geom.TIL.T / ms
    Y_row = np.zeros((nm, dA))
    Y_row[:, rY:rY + nm] = sol.A_y
    for k in range(K):
        Y_row[:, rX + k * n:rX + (k + 1) * n] = \
            sol.C_y[k] @ geom.Pi_lift[k]
    Y_row[:, rE:rE + nm] = sol.Cu_y
    Y_row += (sol.B_y @ geom.TIL) @ Lg_x
    A0 = np.zeros((dA, dA))
    A0[rY:rY + nm] = Y_row
    for k in range(K):
        row = geom.B_x[k] @ Y_row + geom.C_x[k] @ Lg_x
        row[:, rX + k * n:rX + (k + 1) * n] += geom.A_x[k]
        A0[rX + k * n:rX + (k + 1) * n] = row
    return A1n, A0


def assemble_reduced_form(spec, sol):
    """Reduced-form blocks of the observable system at the solution."""
    geom = _Geom(spec, sol.delta)
    n, ms, K, nm = geom.n, geom.ms, geom.K, geom.nm
    delta = sol.delta
    fp = {"c_y": sol.c_y, "A_y": sol.A_y, "B_y": sol.B_y,
          "C_y": sol.C_y, "Cu_y": sol.Cu_y}
    lp = {"c_g": sol.c_g, "A_g": sol.A_g, "B_g": sol.B_g,
          "C_g": sol.C_g, "Ce_g": sol.Ce_g}
    phi_col = np.kron(geom.phi.reshape(ms, 1), np.eye(n))
    Rbig = np.zeros((nm + n, nm + n))
    Rbig[:nm, :nm] = sol.R1n
    Rbig[:nm, nm:] = -phi_col
    Rbig[nm:, nm:] = sol.R0
    Gbig = np.vstack([geom.G_myop, sol.R0 @ sol.A_g])
    Gamma = []
    for k in range(K):
        up = geom.eye_nm + delta * sol.L1n[k] @ geom.Axi[k]
        Gamma.append(np.vstack([up, sol.R0 @ sol.C_g[k]]))
    beta_load = np.vstack([np.zeros((nm, n)), np.eye(n)])
    Sig = np.kron(spec.shocks.Sigma, np.eye(n))
    Amix = sol.R0 @ sol.Ce_g
    Delta = np.zeros((nm + n, nm + n))
    Delta[:nm, :nm] = Sig
    Delta[:nm, nm:] = Sig @ Amix.T
    Delta[nm:, :nm] = Amix @ Sig
    Delta[nm:, nm:] = (Amix @ Sig @ Amix.T
                       + spec.allocator.sigma2_tau * np.eye(n))
    # companion over [vec Y; g; x_1..x_K]
    dz = nm + n + n * K
    Az = np.zeros((dz, dz))
    Bz = np.zeros((dz, dz))
    Az[:nm + n, :nm + n] = Rbig
    for k in range(K):
        cols = slice(nm + n + k * n, nm + n + (k + 1) * n)
        Az[:nm + n, cols] = -(Gamma[k] @ geom.Pi_lift[k])
        Az[cols, cols] = np.eye(n)
    Bz[:nm + n, :nm] = Gbig
    for k in range(K):
        rows = slice(nm + n + k * n, nm + n + (k + 1) * n)
        Bz[rows, :nm] = geom.B_x[k]
        Bz[rows, nm:nm + n] = geom.C_x[k]
        Bz[rows, nm + n + k * n:nm + n + (k + 1) * n] = geom.A_x[k]
    maps = _AgentMaps(geom, lp)
    Ly = _policy_matrix_y(geom, fp)
    _, _, cddot = _agent_aggregates(geom, fp, lp, maps, Ly,
                                    SolverOptions(), want_L1n=False)
    const = np.zeros(nm + n)
    const[:nm] = cddot + geom.eta_vec
    const[nm:] = sol.R0 @ sol.c_g + geom.tau_bar
    return ReducedForm(R=Rbig, G=Gbig, Gamma=Gamma,
                       beta_load=beta_load, Delta=Delta, Az=Az, Bz=Bz,
                       const=const)


# ============================================================
# Per-player value blocks (materialized on demand)
# ============================================================


@dataclass
class ValueBlocks:
    """Quadratic/linear value blocks over a named slot layout.

    ``Q`` uses symmetric storage; ``block(r, c)`` applies the display
    convention in which off-diagonal blocks carry the full bilinear
    weight:
        V(z) = sum_s z_s' block(s, s) z_s
               + sum_{s<s'} z_s' block(s, s') z_{s'}
               + sum_s z_s' linear(s) + const.
    """

    Q: np.ndarray
    L: np.ndarray
    slots: tuple
    nm: int

    def _sl(self, name):
        b = self.slots.index(name)
        return slice(b * self.nm, (b + 1) * self.nm)

    def block(self, row, col):
        B = self.Q[self._sl(row), self._sl(col)]
        return B if row == col else 2.0 * B

    def linear(self, slot):
        return self.L[self._sl(slot)]


def _agent_slots(K):
    return ("Y", "G") + tuple("X%d" % (k + 1) for k in range(K)) + ("U",)


def _alloc_slots(K):
    return (("Y",) + tuple("X%d" % (k + 1) for k in range(K))
            + ("E", "TAU"))


def follower_value_blocks(spec, sol, i, tol=1e-12):
    """Value blocks of agent ``i`` under the solved policy profile.

    Dense per-agent evaluation over the internal folded layout; a
    diagnostic companion to the aggregate-only production path.
    """
    geom = _Geom(spec, sol.delta)
    n, nm, dim = geom.n, geom.nm, geom.dim
    fp = {"c_y": sol.c_y, "A_y": sol.A_y, "B_y": sol.B_y,
          "C_y": sol.C_y, "Cu_y": sol.Cu_y}
    lp = {"c_g": sol.c_g, "A_g": sol.A_g, "B_g": sol.B_g,
          "C_g": sol.C_g, "Ce_g": sol.Ce_g}
    maps = _AgentMaps(geom, lp)
    Ly = _policy_matrix_y(geom, fp)
    ei = np.zeros(n)
    ei[i] = 1.0
    wi = geom.W[i]
    L_Zi = np.zeros((nm, dim))
    for (s, M, nbr) in geom.lz_pieces:
        v = wi if nbr else ei
        L_Zi[:, geom.sl(s)] += np.kron(M, np.outer(ei, v))
    Q_Yi = (np.kron(geom.Lambda.T, np.outer(ei, wi))
            - 0.5 * np.kron(geom.P + geom.Psi, np.outer(ei, ei)))
    Qti = Ly.T @ L_Zi + Ly.T @ Q_Yi @ Ly
    Qti[geom.sl(0), geom.sl(0)] += -0.5 * np.kron(geom.P,
                                                  np.outer(ei, ei))
    Afull = maps.apply_A(Ly, np.eye(dim))
    Qi = lyap_series(Afull, sym(Qti), sol.delta, tol=tol)
    c1n = maps.cstar + maps.apply_F(sol.c_y)
    Lti = L_Zi.T @ sol.c_y + Ly.T @ ((Q_Yi + Q_Yi.T) @ sol.c_y)
    Li = np.linalg.solve(np.eye(dim) - sol.delta * Afull.T,
                         Lti + sol.delta * Afull.T @ (2.0 * Qi @ c1n))
    return ValueBlocks(Q=Qi, L=Li, slots=_agent_slots(geom.K), nm=nm)


def leader_value_blocks(sol):
    """Allocator value blocks of a solved equilibrium."""
    return ValueBlocks(Q=sol.leader_Q, L=sol.leader_L,
                       slots=_alloc_slots(sol.K),
                       nm=sol.n * sol.m_star)


# ============================================================
# Serialization
# ============================================================


def dump_solution(sol, fh):
    """Write every solution block as name -> row-major array."""
    fh.write("# equilibrium solution\n")
    fh.write("n = %d\nm_star = %d\nK = %d\n" % (sol.n, sol.m_star,
                                                sol.K))
    fh.write("delta = %.17g\n" % sol.delta)
    fh.write("iterations = %d\nresidual = %.17g\n"
             % (sol.iterations, sol.residual))
    if sol.uniqueness is not None:
        u = sol.uniqueness
        fh.write("norm_T1n = %.17g\nnorm_T0 = %.17g\n"
                 "norm_A1n = %.17g\nnorm_A0 = %.17g\nin_M = %s\n"
                 % (u.norm_T1n, u.norm_T0, u.norm_A1n, u.norm_A0,
                    u.in_M))
    for name, arr in sol.named_blocks().items():
        if arr is None:
            continue
        arr = np.atleast_2d(np.asarray(arr))
        fh.write("\n[%s]  # %d x %d\n" % (name, arr.shape[0],
                                          arr.shape[1]))
        for row in arr:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")
