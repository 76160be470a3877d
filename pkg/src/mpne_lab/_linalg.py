"""Shared dense linear algebra primitives.

Small wrappers around LAPACK routines used across the solver and the
estimator: LU factorization with condition monitoring, log-determinants,
spectral norms by power iteration and truncated geometric matrix series.
"""

import numpy as np
from scipy.linalg import get_lapack_funcs

from .errors import NoConvergenceError, SingularSystemError

RCOND_FLOOR = 1e-12


class LUFactor:
    """LU factorization of a square matrix with reuse across solves.

    Raises SingularSystemError when the reciprocal condition number
    estimate falls below ``rcond_floor``.
    """

    def __init__(self, A, name="system", rcond_floor=RCOND_FLOOR):
        A = np.ascontiguousarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("LUFactor expects a square matrix")
        self.n = A.shape[0]
        self.name = name
        getrf, gecon = get_lapack_funcs(("getrf", "gecon"), (A,))
        anorm = np.abs(A).sum(axis=1).max() if self.n else 0.0
        lu, piv, info = getrf(A)
        if info > 0:
            raise SingularSystemError(
                f"{name}: exactly singular (zero pivot at {info})"
            )
        rcond, _ = gecon(lu, anorm, norm="I")
        if not np.isfinite(rcond) or rcond < rcond_floor:
            raise SingularSystemError(
                f"{name}: numerically singular (rcond={rcond:.3e})"
            )
        self.rcond = float(rcond)
        self._lu = lu
        self._piv = piv
        (self._getrs,) = get_lapack_funcs(("getrs",), (lu,))

    def solve(self, B, trans=0):
        B = np.asarray(B, dtype=np.float64)
        one_d = B.ndim == 1
        Bm = B.reshape(self.n, -1) if one_d else B
        x, info = self._getrs(self._lu, self._piv, Bm, trans=trans)
        if info != 0:
            raise SingularSystemError(f"{self.name}: getrs failed ({info})")
        return x[:, 0] if one_d else x

    def inv(self):
        return self.solve(np.eye(self.n))

    @property
    def slogdet(self):
        d = np.diag(self._lu)
        swaps = int(np.sum(self._piv != np.arange(self.n)))
        sign = (-1.0) ** swaps * np.prod(np.sign(d))
        return sign, float(np.sum(np.log(np.abs(d))))


def logdet(A, name="matrix"):
    """Signed log-determinant via LU; raises if the sign is not positive."""
    sign, ld = LUFactor(A, name=name).slogdet
    if sign <= 0:
        raise SingularSystemError(f"{name}: determinant not positive")
    return ld


def spectral_norm(B, tol=1e-10, max_iter=10000):
    """Largest singular value of B by power iteration on B'B.

    Deterministic start vector; relative-change stopping rule.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.size == 0:
        return 0.0
    n = B.shape[1]
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = B.T @ (B @ v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def power_radius(B, tol=1e-10, max_iter=10000):
    """Dominant eigenvalue magnitude of B.

    Restarted power (Arnoldi) iteration; plain single-vector iteration
    stalls when the two largest moduli nearly tie, so a small Krylov
    block is kept.  Falls back to the dense eigensolver for matrices too
    small for ARPACK or when the iteration fails to settle.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.size == 0:
        return 0.0
    n = B.shape[1]
    if n >= 5:
        from scipy.sparse.linalg import ArpackNoConvergence, eigs
        v0 = np.linspace(1.0, 2.0, n)
        try:
            vals = eigs(B, k=2, which="LM", v0=v0, tol=tol,
                        maxiter=max_iter, return_eigenvectors=False)
            return float(np.abs(vals).max())
        except ArpackNoConvergence:
            pass
        except RuntimeError:
            pass
    return float(np.abs(np.linalg.eigvals(B)).max())


def sym(M):
    """Symmetric part (M + M') / 2."""
    return 0.5 * (M + M.T)


def asym_gap(M):
    """Frobenius norm of the antisymmetric part."""
    return float(np.linalg.norm(M - M.T))


def series_length(q, scale, tol):
    """Smallest H with q^(H+1) / (1 - q) * scale < tol, for 0 <= q < 1.

    Returns at least 1. Raises NoConvergenceError when q >= 1 (no
    geometric tail bound available).
    """
    if scale <= 0.0 or tol <= 0.0:
        return 1
    if q >= 1.0:
        raise NoConvergenceError(
            f"series tail bound unavailable (ratio {q:.4f} >= 1)"
        )
    if q <= 0.0:
        return 1
    H = int(np.ceil(np.log(tol * (1.0 - q) / scale) / np.log(q))) - 1
    return max(H, 1)


def lyap_series(A, Qmat, delta, tol=1e-12, max_terms=100000):
    """Truncated series solution of X = Q + delta * A' X A.

    Sums delta^j A'^j Q A^j until the geometric tail bound drops below
    ``tol``. Falls back to a per-term stopping rule when the norm-based
    ratio is not below one.
    """
    A = np.asarray(A, dtype=np.float64)
    Qmat = np.asarray(Qmat, dtype=np.float64)
    q = delta * spectral_norm(A) ** 2
    scale = np.linalg.norm(Qmat)
    X = Qmat.copy()
    term = Qmat
    if q < 1.0 and scale > 0.0:
        # squaring doubles the number of summed terms per pass:
        # after s passes X holds the first 2^s terms of the series
        H = series_length(q, scale, tol)
        steps = max(1, int(np.ceil(np.log2(H + 1.0))))
        Ak = np.sqrt(delta) * A
        for _ in range(steps):
            X = X + Ak.T @ X @ Ak
            Ak = Ak @ Ak
        return X
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_terms):
            term = delta * (A.T @ term @ A)
            X += term
            tnorm = np.linalg.norm(term)
            if tnorm < tol:
                return X
            if not np.isfinite(tnorm):
                break
    raise NoConvergenceError("value series did not converge", max_terms)
