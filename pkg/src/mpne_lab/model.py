"""Structural parameter containers, network loading and validation.

The model consists of n local agents on a spatial network W and a single
resource allocator. Each agent runs m_star activities; the allocator sets
one grant per agent, so the system has m = m_star + 1 endogenous variables
per agent. Agent characteristics follow K first-order Markov processes and
the allocator observes Q exogenous indicators.

All containers are plain dataclasses holding float64 arrays. They are
treated as immutable after construction; nothing in the package mutates a
spec in place.
"""

import ast
import configparser
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._linalg import asym_gap, spectral_norm, sym
from .errors import NetworkFormatError, SpecError

_DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

# ============================================================
# Containers
# ============================================================


@dataclass
class Dimensions:
    """Problem sizes. m = m_star + 1 counts activities plus the grant."""

    n: int
    m_star: int
    K: int
    Q: int
    T: int = 0

    @property
    def m(self):
        return self.m_star + 1

    @property
    def nm(self):
        return self.n * self.m_star


@dataclass
class Network:
    """Spatial weight matrix with zero diagonal and nonnegative entries."""

    W: np.ndarray
    normalized: bool = False
    labels: list = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)


@dataclass
class PayoffParams:
    """Agent payoff parameters (theta_P).

    Lambda : m*×m* contemporaneous interaction coefficients
    rho    : m*×m* diffusion (state-dependence) coefficients
    P      : m*×m* symmetric adjustment-cost matrix
    Psi    : m*×m* symmetric level-cost matrix, unit diagonal
    phi    : m* grant-reliance coefficients
    Pi     : K×m* characteristic loadings
    """

    Lambda: np.ndarray
    rho: np.ndarray
    P: np.ndarray
    Psi: np.ndarray
    phi: np.ndarray
    Pi: np.ndarray

    def __post_init__(self):
        self.Lambda = np.asarray(self.Lambda, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.P = _symmetrized(self.P, "P")
        self.Psi = _symmetrized(self.Psi, "Psi")
        self.phi = np.asarray(self.phi, dtype=np.float64).ravel()
        self.Pi = np.atleast_2d(np.asarray(self.Pi, dtype=np.float64))


@dataclass
class ProcessParams:
    """Characteristic process parameters (theta_E), one row per process k.

    The k-th process is
        x_{t+1,k} = A_k^x x_{t,k} + B_k^x vec(Y_t) + C_k^x g_t + c_k^x
                    + alpha_{t+1,k}^x l_n + e_{t+1,k}^x
    with A_k^x = gamma[k] I + varrho[k] W, B_k^x built column-block-wise
    from (gamma_y[k,l], varrho_y[k,l]) and C_k^x = gamma_g[k] I
    + varrho_g[k] W.
    """

    gamma: np.ndarray
    varrho: np.ndarray
    gamma_y: np.ndarray
    varrho_y: np.ndarray
    gamma_g: np.ndarray
    varrho_g: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "varrho", "gamma_g", "varrho_g", "sigma2"):
            setattr(self, name, np.atleast_1d(
                np.asarray(getattr(self, name), dtype=np.float64)))
        self.gamma_y = np.atleast_2d(
            np.asarray(self.gamma_y, dtype=np.float64))
        self.varrho_y = np.atleast_2d(
            np.asarray(self.varrho_y, dtype=np.float64))

    @classmethod
    def none(cls, dims):
        """Degenerate processes: x_{t,k} is pure noise around its effects."""
        K, m = dims.K, dims.m_star
        z = np.zeros(K)
        return cls(z, z.copy(), np.zeros((K, m)), np.zeros((K, m)),
                   z.copy(), z.copy(), np.ones(K))

    def A_x(self, W):
        n = W.shape[0]
        return [self.gamma[k] * np.eye(n) + self.varrho[k] * W
                for k in range(len(self.gamma))]

    def B_x(self, W):
        n = W.shape[0]
        return [np.hstack([self.gamma_y[k, l] * np.eye(n)
                           + self.varrho_y[k, l] * W
                           for l in range(self.gamma_y.shape[1])])
                for k in range(len(self.gamma))]

    def C_x(self, W):
        n = W.shape[0]
        return [self.gamma_g[k] * np.eye(n) + self.varrho_g[k] * W
                for k in range(len(self.gamma))]


@dataclass
class AllocatorParams:
    """Allocator-side parameters: indicator loadings and autonomous levels."""

    beta: np.ndarray
    tau_bar: np.ndarray
    sigma2_tau: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        self.tau_bar = np.atleast_1d(
            np.asarray(self.tau_bar, dtype=np.float64))
        self.sigma2_tau = float(self.sigma2_tau)


@dataclass
class ShockParams:
    """Covariance of the activity shocks, vec(E_t) ~ (0, Sigma ⊗ I_n)."""

    Sigma: np.ndarray

    def __post_init__(self):
        self.Sigma = _symmetrized(self.Sigma, "Sigma")


@dataclass
class FixedEffects:
    """Agent and time effects. Time effects are stored demeaned.

    eta      : n×m* agent effects in the activity payoff shifters
    c_x      : K×n agent effects of the characteristic processes
    alpha    : T×m time effects (m* activity columns, last column tau),
               column-demeaned; removed means kept in alpha_mean
    alpha_x  : T×K time effects of the characteristic processes, demeaned
    """

    eta: np.ndarray
    c_x: np.ndarray
    alpha: np.ndarray
    alpha_mean: np.ndarray
    alpha_x: np.ndarray
    alpha_x_mean: np.ndarray

    @classmethod
    def zeros(cls, dims):
        T = max(dims.T, 0)
        return cls(np.zeros((dims.n, dims.m_star)),
                   np.zeros((dims.K, dims.n)),
                   np.zeros((T, dims.m)), np.zeros(dims.m),
                   np.zeros((T, dims.K)), np.zeros(dims.K))

    @classmethod
    def from_raw(cls, eta, c_x, alpha, alpha_x):
        """Demean the time effects, keeping the removed column means."""
        alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
        alpha_x = np.atleast_2d(np.asarray(alpha_x, dtype=np.float64))
        am = alpha.mean(axis=0) if alpha.size else np.zeros(alpha.shape[1])
        axm = (alpha_x.mean(axis=0) if alpha_x.size
               else np.zeros(alpha_x.shape[1]))
        return cls(np.asarray(eta, dtype=np.float64),
                   np.atleast_2d(np.asarray(c_x, dtype=np.float64)),
                   alpha - am, am, alpha_x - axm, axm)


@dataclass
class ModelSpec:
    """Complete model: the single object passed to every operation."""

    dims: Dimensions
    network: Network
    payoff: PayoffParams
    process: ProcessParams
    allocator: AllocatorParams
    shocks: ShockParams
    delta: float
    fixed_effects: FixedEffects = None

    def __post_init__(self):
        self.delta = float(self.delta)
        if self.fixed_effects is None:
            self.fixed_effects = FixedEffects.zeros(self.dims)


@dataclass
class ValidationReport:
    """Outcome of validate_spec: a list of human-readable violations."""

    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "spec valid"
        return "\n".join(self.violations)


def _symmetrized(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    gap = asym_gap(M)
    if gap > 1e-10:
        warnings.warn(f"{name} asymmetric by {gap:.2e}; symmetrizing",
                      stacklevel=3)
    return sym(M)


# ============================================================
# Validation
# ============================================================


def validate_spec(spec):
    """Check every container invariant; collect violations, never raise."""
    v = []
    d = spec.dims
    ms = d.m_star

    for name, val, lo in (("n", d.n, 2), ("m_star", ms, 1),
                          ("K", d.K, 0), ("Q", d.Q, 0)):
        if int(val) != val or val < lo:
            v.append(f"dimension {name}={val} below minimum {lo}")

    W = spec.network.W
    if W.shape != (d.n, d.n):
        v.append(f"network shape {W.shape} does not match n={d.n}")
    else:
        dg = np.flatnonzero(np.abs(np.diag(W)) > 0)
        if dg.size:
            v.append(f"nonzero network diagonal at agents {dg.tolist()}")
        neg = np.argwhere(W < 0)
        if neg.size:
            v.append(f"negative network weights at {neg[:5].tolist()}")
        if spec.network.normalized:
            rs = W.sum(axis=1)
            bad = np.flatnonzero((np.abs(rs - 1) > 1e-12) & (rs != 0))
            if bad.size:
                v.append(f"network rows not normalized at {bad.tolist()}")

    p = spec.payoff
    for nm, M in (("Lambda", p.Lambda), ("rho", p.rho), ("P", p.P),
                  ("Psi", p.Psi)):
        if M.shape != (ms, ms):
            v.append(f"{nm} shape {M.shape} != ({ms}, {ms})")
    if p.phi.shape != (ms,):
        v.append(f"phi shape {p.phi.shape} != ({ms},)")
    if p.Pi.shape != (d.K, ms):
        v.append(f"Pi shape {p.Pi.shape} != ({d.K}, {ms})")
    if p.P.shape == (ms, ms):
        if asym_gap(p.P) > 1e-10:
            v.append("P not symmetric")
        if asym_gap(p.Psi) > 1e-10:
            v.append("Psi not symmetric")
        if not np.all(np.diag(p.Psi) == 1.0):
            v.append("Psi diagonal not normalized")
        PP = p.P + p.Psi
        try:
            ev = np.linalg.eigvalsh(sym(PP))
            if ev.min() <= 0:
                v.append("P+Psi not positive definite")
        except np.linalg.LinAlgError:
            v.append("P+Psi eigendecomposition failed")
        offsums = np.abs(PP).sum(axis=1) - np.abs(np.diag(PP))
        dom = np.diag(PP) - offsums
        if np.any(dom <= 0):
            v.append(
                "P+Psi not diagonally dominant at rows "
                f"{np.flatnonzero(dom <= 0).tolist()}")

    pr = spec.process
    if len(pr.gamma) != d.K:
        v.append(f"process parameter count {len(pr.gamma)} != K={d.K}")
    else:
        if pr.gamma_y.shape != (d.K, ms) or pr.varrho_y.shape != (d.K, ms):
            v.append("process activity-feedback shape mismatch")
        bad = np.flatnonzero(pr.sigma2 <= 0)
        if bad.size:
            v.append(f"nonpositive process variance at k={bad.tolist()}")
        if W.shape == (d.n, d.n):
            for k, A in enumerate(pr.A_x(W)):
                s = spectral_norm(A)
                if s >= 1.0:
                    v.append(f"x process {k} not stable (norm {s:.4f})")

    a = spec.allocator
    if a.beta.shape != (d.Q,):
        v.append(f"beta shape {a.beta.shape} != ({d.Q},)")
    if a.tau_bar.shape != (d.n,):
        v.append(f"tau_bar shape {a.tau_bar.shape} != ({d.n},)")
    elif np.any(a.tau_bar <= 0):
        v.append("tau_bar not positive elementwise at agents "
                 f"{np.flatnonzero(a.tau_bar <= 0).tolist()}")
    if a.sigma2_tau <= 0:
        v.append("sigma2_tau not positive")

    S = spec.shocks.Sigma
    if S.shape != (ms, ms):
        v.append(f"Sigma shape {S.shape} != ({ms}, {ms})")
    else:
        if asym_gap(S) > 1e-10:
            v.append("Sigma not symmetric")
        try:
            if np.linalg.eigvalsh(sym(S)).min() <= 0:
                v.append("Sigma not positive definite")
        except np.linalg.LinAlgError:
            v.append("Sigma eigendecomposition failed")

    if not 0.0 < spec.delta < 1.0:
        v.append(f"delta={spec.delta} outside (0, 1)")

    fe = spec.fixed_effects
    if fe is not None:
        if fe.eta.shape != (d.n, ms):
            v.append(f"eta shape {fe.eta.shape} != ({d.n}, {ms})")
        if fe.c_x.size and fe.c_x.shape != (d.K, d.n):
            v.append(f"c_x shape {fe.c_x.shape} != ({d.K}, {d.n})")
        for nm, arr, cols in (("alpha", fe.alpha, d.m),
                              ("alpha_x", fe.alpha_x, d.K)):
            if arr.size:
                if arr.shape[1] != cols:
                    v.append(f"{nm} has {arr.shape[1]} columns, want {cols}")
                elif np.abs(arr.mean(axis=0)).max() > 1e-8:
                    v.append(f"{nm} time effects not demeaned")

    return ValidationReport(v)


# ============================================================
# Network files
# ============================================================


def load_network(path, normalize=True, n=None):
    """Read a network from an edge list or a dense CSV matrix.

    Edge list: one "i j [weight]" entry per line, 1-based indices,
    comments starting with '#'. Entries are directed; contiguity files
    list both directions. Dense: n×n comma- or whitespace-separated
    rows. With normalize, each nonzero row is divided by its sum.
    """
    if path == "us48":
        path = bundled_network_path()
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        if n is None:
            raise NetworkFormatError(f"{path}: empty file and no size given")
        return Network(np.zeros((n, n)), normalized=normalize)
    tokens = [ln.replace(",", " ").split() for ln in lines]
    widths = {len(t) for t in tokens}
    square = widths == {len(tokens)}
    if widths <= {2, 3}:
        # 3-column square files are ambiguous with weighted edge lists,
        # but a dense W has a zero diagonal, so its first row starts
        # with 0 which is never a valid 1-based index.
        try:
            W = _from_edges(tokens, n, path)
        except NetworkFormatError:
            if not square:
                raise
            W = _from_dense(tokens, path)
    else:
        W = _from_dense(tokens, path)
    if np.any(W < 0):
        raise NetworkFormatError(f"{path}: negative weight")
    if normalize:
        rs = W.sum(axis=1)
        nz = rs > 0
        W[nz] = W[nz] / rs[nz, None]
    return Network(W, normalized=normalize)


def _from_edges(tokens, n, path):
    try:
        rows = [(int(t[0]), int(t[1]), float(t[2]) if len(t) == 3 else 1.0)
                for t in tokens]
    except ValueError as e:
        raise NetworkFormatError(f"{path}: bad edge line ({e})") from None
    size = n if n is not None else max(max(i, j) for i, j, _ in rows)
    W = np.zeros((size, size))
    for i, j, w in rows:
        if not (1 <= i <= size and 1 <= j <= size):
            raise NetworkFormatError(
                f"{path}: edge ({i},{j}) outside 1..{size}")
        W[i - 1, j - 1] = w
    return W


def _from_dense(tokens, path):
    try:
        W = np.array([[float(x) for x in t] for t in tokens])
    except ValueError as e:
        raise NetworkFormatError(f"{path}: bad matrix entry ({e})") from None
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise NetworkFormatError(f"{path}: dense matrix not square "
                                 f"({W.shape[0]}x{W.shape[1]})")
    return W


def bundled_network_path():
    """Path of the packaged 48-state contiguity edge list."""
    return os.path.join(_DATA_DIR, "us48_contiguity.edges")


# ============================================================
# Benchmark specification
# ============================================================


def benchmark_spec(T=25, n=None, W=None, seed=None):
    """The standard two-activity benchmark on the 48-state network.

    Characteristics and allocator indicators are i.i.d. standard normal
    (no dynamic feedback); payoff parameters follow the benchmark design
    used throughout the test-suite and the Monte Carlo presets. Fixed
    effects default to zero; pass a seed to draw standard-normal agent
    and time effects.
    """
    if W is None:
        net = load_network(bundled_network_path(), normalize=True)
        if n is not None and n != net.W.shape[0]:
            raise SpecError(f"benchmark network has 48 agents, got n={n}")
    else:
        net = W if isinstance(W, Network) else Network(
            np.asarray(W, dtype=np.float64), normalized=True)
    n = net.W.shape[0]
    dims = Dimensions(n=n, m_star=2, K=2, Q=1, T=T)
    payoff = PayoffParams(
        Lambda=[[0.2, 0.1], [0.1, 0.2]],
        rho=[[0.2, 0.1], [0.1, 0.2]],
        P=[[0.2, 0.0], [0.0, 0.2]],
        Psi=[[1.0, 0.2], [0.2, 1.0]],
        phi=[0.2, 0.2],
        Pi=[[1.0, 0.0], [0.0, -1.0]],
    )
    process = ProcessParams.none(dims)
    allocator = AllocatorParams(beta=[1.0], tau_bar=np.ones(n),
                                sigma2_tau=1.0)
    shocks = ShockParams(Sigma=[[1.0, 0.5], [0.5, 1.0]])
    effects = None
    if seed is not None:
        rng = np.random.default_rng(seed)
        effects = FixedEffects.from_raw(
            eta=rng.standard_normal((n, dims.m_star)),
            c_x=np.zeros((dims.K, n)),
            alpha=rng.standard_normal((T, dims.m)),
            alpha_x=np.zeros((T, dims.K)),
        )
    return ModelSpec(dims=dims, network=net, payoff=payoff, process=process,
                     allocator=allocator, shocks=shocks, delta=0.9,
                     fixed_effects=effects)


# ============================================================
# Spec config files
# ============================================================

_SECTIONS = ("Dimensions", "Network", "PayoffParams", "ProcessParams",
             "AllocatorParams", "ShockParams", "FixedEffects", "ModelSpec")


def _parse_value(raw):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.lower()
        if low in ("true", "yes"):
            return True
        if low in ("false", "no"):
            return False
        return raw


def read_spec(path):
    """Build a ModelSpec from a sectioned text config.

    Section names are the container type names and keys are their field
    names; matrices are nested row-major lists. The Network section gives
    either an inline `W` or a `file` (path relative to the config, or
    `us48` for the bundled contiguity list) plus `normalize`.
    """
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not cp.read(path):
        raise SpecError(f"cannot read spec config {path}")
    sec = {name: {k: _parse_value(v) for k, v in cp[name].items()}
           for name in cp.sections()}
    unknown = set(sec) - set(_SECTIONS)
    if unknown:
        raise SpecError(f"unknown config sections {sorted(unknown)}")
    for req in ("Dimensions", "PayoffParams", "AllocatorParams",
                "ShockParams", "ModelSpec"):
        if req not in sec:
            raise SpecError(f"config missing [{req}] section")

    dd = sec["Dimensions"]
    dims = Dimensions(n=int(dd["n"]), m_star=int(dd["m_star"]),
                      K=int(dd["K"]), Q=int(dd["Q"]),
                      T=int(dd.get("T", 0)))
    if "m" in dd and int(dd["m"]) != dims.m:
        raise SpecError(f"config m={dd['m']} != m_star+1={dims.m}")

    nd = dict(sec.get("Network", {}))
    normalize = bool(nd.pop("normalize", True))
    if "W" in nd:
        net = Network(np.asarray(nd["W"], dtype=np.float64),
                      normalized=bool(nd.pop("normalized", False)))
        if normalize and not net.normalized:
            rs = net.W.sum(axis=1)
            nz = rs > 0
            net.W[nz] = net.W[nz] / rs[nz, None]
            net.normalized = True
    elif "file" in nd:
        fp = nd["file"]
        if fp != "us48" and not os.path.isabs(fp):
            fp = os.path.join(os.path.dirname(os.path.abspath(path)), fp)
        net = load_network(fp, normalize=normalize, n=dims.n)
    else:
        raise SpecError("Network section needs W or file")

    payoff = PayoffParams(**sec["PayoffParams"])
    if "ProcessParams" in sec:
        process = ProcessParams(**sec["ProcessParams"])
    else:
        process = ProcessParams.none(dims)
    ad = dict(sec["AllocatorParams"])
    tb = np.atleast_1d(np.asarray(ad["tau_bar"], dtype=np.float64))
    if tb.size == 1:
        tb = np.full(dims.n, tb[0])
    ad["tau_bar"] = tb
    allocator = AllocatorParams(**ad)
    shocks = ShockParams(**sec["ShockParams"])
    effects = None
    if "FixedEffects" in sec:
        fd = sec["FixedEffects"]
        effects = FixedEffects.from_raw(
            eta=fd.get("eta", np.zeros((dims.n, dims.m_star))),
            c_x=fd.get("c_x", np.zeros((dims.K, dims.n))),
            alpha=fd.get("alpha", np.zeros((max(dims.T, 0), dims.m))),
            alpha_x=fd.get("alpha_x", np.zeros((max(dims.T, 0), dims.K))),
        )
    delta = float(sec["ModelSpec"]["delta"])
    return ModelSpec(dims=dims, network=net, payoff=payoff, process=process,
                     allocator=allocator, shocks=shocks, delta=delta,
                     fixed_effects=effects)


def _fmt(val):
    if isinstance(val, np.ndarray):
        return repr(val.tolist())
    if isinstance(val, (float, np.floating)):
        return repr(float(val))
    return repr(val)


def write_spec(spec, path):
    """Serialize a ModelSpec to the config format read by read_spec."""
    d = spec.dims
    out = []
    out.append("[Dimensions]")
    for k in ("n", "m_star", "K", "Q", "T"):
        out.append(f"{k} = {getattr(d, k)}")
    out.append("\n[Network]")
    out.append(f"W = {_fmt(spec.network.W)}")
    out.append(f"normalized = {spec.network.normalized}")
    out.append("normalize = False")
    out.append("\n[PayoffParams]")
    p = spec.payoff
    for k in ("Lambda", "rho", "P", "Psi", "phi", "Pi"):
        out.append(f"{k} = {_fmt(getattr(p, k))}")
    out.append("\n[ProcessParams]")
    pr = spec.process
    for k in ("gamma", "varrho", "gamma_y", "varrho_y", "gamma_g",
              "varrho_g", "sigma2"):
        out.append(f"{k} = {_fmt(getattr(pr, k))}")
    out.append("\n[AllocatorParams]")
    a = spec.allocator
    out.append(f"beta = {_fmt(a.beta)}")
    out.append(f"tau_bar = {_fmt(a.tau_bar)}")
    out.append(f"sigma2_tau = {a.sigma2_tau}")
    out.append("\n[ShockParams]")
    out.append(f"Sigma = {_fmt(spec.shocks.Sigma)}")
    fe = spec.fixed_effects
    if fe is not None and (np.any(fe.eta) or np.any(fe.alpha)
                           or np.any(fe.c_x) or np.any(fe.alpha_x)):
        out.append("\n[FixedEffects]")
        out.append(f"eta = {_fmt(fe.eta)}")
        out.append(f"c_x = {_fmt(fe.c_x)}")
        out.append(f"alpha = {_fmt(fe.alpha + fe.alpha_mean)}")
        out.append(f"alpha_x = {_fmt(fe.alpha_x + fe.alpha_x_mean)}")
    out.append("\n[ModelSpec]")
    out.append(f"delta = {spec.delta}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
