"""
Equality-constrained convex QPs and their saddle-point (KKT) systems.

Problems are written as

    min  1/2 z'Qz - c'z
    s.t. A z + B d = 0      (nu)
         Pi z      = 0      (lambda)

so stationarity reads ``Q z + A' nu + Pi' lambda = c``.  Dense KKT systems
are factored with a Bunch-Kaufman LDL' decomposition; systems above
``SPARSE_THRESHOLD`` unknowns go through a sparse LU instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, RankDeficient, SingularSystem

# Pivot magnitude below PIVOT_RTOL * max|pivot| counts as zero.
PIVOT_RTOL = 1e-12
SPARSE_THRESHOLD = 1500


def _as_matrix(M, ncols, keep_sparse=False):
    if M is None:
        return np.zeros((0, ncols))
    if sp.issparse(M):
        if keep_sparse:
            return sp.csr_matrix(M, dtype=float)
        M = M.toarray()
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((0, ncols))
    if M.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {M.shape}")
    return M


@dataclass(frozen=True)
class CoupledQP:
    """Full-resolution QP ``min 1/2 z'Qz - c'z  s.t. Az + Bd = 0, Pi z = 0``.

    ``Q`` need only be positive definite on the null space of ``[A; Pi]``:
    lifted formulations carry zero-cost duplicate variables pinned by
    coupling rows.  Sparse matrices are kept in CSR form; dense ones are
    stored as read-only arrays.
    """

    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray = None
    B: np.ndarray = None
    Pi: np.ndarray = None
    d: np.ndarray = None

    def __post_init__(self):
        if sp.issparse(self.Q):
            Q = sp.csr_matrix(self.Q, dtype=float)
        else:
            Q = np.asarray(self.Q, dtype=float)
        n = Q.shape[0] if Q.ndim == 2 else -1
        if Q.ndim != 2 or Q.shape[1] != n:
            raise DimensionMismatch(f"Q must be square, got {Q.shape}")
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if c.shape[0] != n:
            raise DimensionMismatch(f"c has length {c.shape[0]}, expected {n}")
        d = np.zeros(0) if self.d is None else np.asarray(self.d, dtype=float).reshape(-1)
        A = _as_matrix(self.A, n, keep_sparse=True)
        Pi = _as_matrix(self.Pi, n, keep_sparse=True)
        B = _as_matrix(self.B, d.shape[0], keep_sparse=True)
        if A.shape[1] != n or Pi.shape[1] != n:
            raise DimensionMismatch("A and Pi must have one column per variable")
        if B.shape[0] == 0 and A.shape[0] > 0:
            B = np.zeros((A.shape[0], d.shape[0]))
        if B.shape != (A.shape[0], d.shape[0]):
            raise DimensionMismatch(
                f"B has shape {B.shape}, expected {(A.shape[0], d.shape[0])}"
            )
        if sp.issparse(Q):
            asym = abs(Q - Q.T).max() if Q.nnz else 0.0
            scale = abs(Q).max() if Q.nnz else 0.0
        else:
            asym = np.abs(Q - Q.T).max(initial=0.0)
            scale = np.abs(Q).max(initial=0.0)
        if asym > 1e-12 * max(1.0, scale):
            raise DimensionMismatch("Q must be symmetric")
        for name, val in (("Q", Q), ("c", c), ("A", A), ("B", B), ("Pi", Pi), ("d", d)):
            if not sp.issparse(val):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def is_sparse(self):
        return any(sp.issparse(M) for M in (self.Q, self.A, self.Pi))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.Pi.shape[0]

    @property
    def constraint_matrix(self):
        """Stacked ``[A; Pi]`` (sparse if either block is)."""
        if sp.issparse(self.A) or sp.issparse(self.Pi):
            return sp.vstack([sp.csr_matrix(self.A), sp.csr_matrix(self.Pi)]).tocsr()
        return np.vstack([self.A, self.Pi])

    @property
    def constraint_rhs(self):
        """Right-hand side ``h`` of ``[A; Pi] z = h``, i.e. ``[-B d; 0]``."""
        return np.concatenate([-(self.B @ self.d), np.zeros(self.p)])

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * z @ self.Q @ z - self.c @ z

    def dense(self):
        """Copy with every matrix stored densely."""
        def arr(M):
            return M.toarray() if sp.issparse(M) else M
        return CoupledQP(Q=arr(self.Q), c=self.c, A=arr(self.A), B=arr(self.B),
                         Pi=arr(self.Pi), d=self.d)

    def to_dict(self):
        def enc(M):
            if sp.issparse(M):
                C = M.tocoo()
                return {"shape": list(C.shape), "row": C.row.tolist(),
                        "col": C.col.tolist(), "data": C.data.tolist()}
            return M.tolist()

        return {
            "Q": enc(self.Q),
            "c": self.c.tolist(),
            "A": enc(self.A),
            "B": enc(self.B),
            "Pi": enc(self.Pi),
            "d": self.d.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        def dec(M):
            if isinstance(M, dict):
                return sp.csr_matrix((M["data"], (M["row"], M["col"])), shape=tuple(M["shape"]))
            return None if M is None else np.asarray(M, dtype=float)

        try:
            Q = dec(doc["Q"])
            c = doc["c"]
        except KeyError as exc:
            raise DimensionMismatch(f"problem document lacks field {exc}") from None
        return cls(Q=Q, c=c, A=dec(doc.get("A")), B=dec(doc.get("B")),
                   Pi=dec(doc.get("Pi")), d=doc.get("d"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class UnconstrainedQP:
    """``min 1/2 z'Qz - c'z`` with ``Q`` symmetric positive definite."""

    Q: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != c.shape[0]:
            raise DimensionMismatch(f"inconsistent shapes Q{Q.shape}, c{c.shape}")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max(initial=0.0))):
            raise DimensionMismatch("Q must be symmetric")
        if Q.size and not spd_check(Q):
            raise SingularSystem("curvature of an unconstrained QP must be positive definite")
        Q.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)

    @property
    def n(self):
        return self.Q.shape[0]

    def minimizer(self):
        return sla.cho_solve(sla.cho_factor(self.Q), self.c)

    def as_coupled(self):
        return CoupledQP(Q=self.Q, c=self.c)


@dataclass(frozen=True)
class KKTSolution:
    primal: np.ndarray
    dual: np.ndarray
    residual_norm: float


@dataclass(frozen=True)
class AffineMap:
    """``z = Z y + offset``."""

    Z: np.ndarray
    offset: np.ndarray

    def __call__(self, y):
        return self.Z @ np.asarray(y, dtype=float) + self.offset


def _block_pivots(D):
    """Eigenvalues of the 1x1 / 2x2 diagonal blocks of an LDL' factor."""
    n = D.shape[0]
    out = np.empty(n)
    i = 0
    while i < n:
        if i + 1 < n and D[i + 1, i] != 0.0:
            out[i:i + 2] = np.linalg.eigvalsh(D[i:i + 2, i:i + 2])
            i += 2
        else:
            out[i] = D[i, i]
            i += 1
    return out


class SymmetricFactor:
    """Bunch-Kaufman factorization ``K = L D L'`` of a symmetric matrix.

    Raises :class:`SingularSystem` when a block pivot falls below
    ``PIVOT_RTOL`` relative to the largest one.
    """

    def __init__(self, K):
        K = np.asarray(K, dtype=float)
        self.n = K.shape[0]
        if self.n == 0:
            self._empty = True
            return
        self._empty = False
        lu, D, perm = sla.ldl(K, lower=True)
        pivots = np.abs(_block_pivots(D))
        self.pivots = pivots
        scale = pivots.max(initial=0.0)
        if scale == 0.0 or pivots.min() <= PIVOT_RTOL * scale:
            raise SingularSystem(
                f"symmetric factorization found a pivot of {pivots.min():.3e} "
                f"(largest {scale:.3e})"
            )
        self._perm = perm
        self._lower = np.ascontiguousarray(lu[perm])
        ab = np.zeros((3, self.n))
        ab[0, 1:] = np.diag(D, 1)
        ab[1] = np.diag(D)
        ab[2, :-1] = np.diag(D, -1)
        self._band = ab

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self._empty:
            return np.zeros_like(rhs)
        y = sla.solve_triangular(self._lower, rhs[self._perm], lower=True, unit_diagonal=True)
        y = sla.solve_banded((1, 1), self._band, y)
        v = sla.solve_triangular(self._lower, y, lower=True, trans="T", unit_diagonal=True)
        out = np.empty_like(v)
        out[self._perm] = v
        return out


def kkt_matrix(H, J, sparse=False):
    """Assemble ``[[H, J'], [J, 0]]``."""
    m = J.shape[0]
    if sparse:
        if m == 0:
            return sp.csc_matrix(H)
        J = sp.csr_matrix(J)
        return sp.bmat([[sp.csr_matrix(H), J.T], [J, None]], format="csc")
    return np.block([[H, J.T], [J, np.zeros((m, m))]])


def _check_shapes(H, J, g, h):
    n = H.shape[0]
    if H.ndim != 2 or H.shape[1] != n:
        raise DimensionMismatch(f"H must be square, got {H.shape}")
    if J.shape[1] != n:
        raise DimensionMismatch(f"J has {J.shape[1]} columns, expected {n}")
    if g.shape != (n,):
        raise DimensionMismatch(f"g has shape {g.shape}, expected ({n},)")
    if h.shape != (J.shape[0],):
        raise DimensionMismatch(f"h has shape {h.shape}, expected ({J.shape[0]},)")


def solve_saddle(H, J, g, h, sparse=None):
    """Solve ``H x + J'y = g``, ``J x = h``.

    Dense systems use :class:`SymmetricFactor`; sparse input, or more than
    ``SPARSE_THRESHOLD`` unknowns, switches to SuperLU.  One step of
    iterative refinement is applied in both cases.
    """
    is_sparse_input = sp.issparse(H) or sp.issparse(J)
    g = np.asarray(g, dtype=float).reshape(-1)
    h = np.asarray(h, dtype=float).reshape(-1)
    if not is_sparse_input:
        H = np.asarray(H, dtype=float)
        J = _as_matrix(J, H.shape[0] if H.ndim == 2 else 0)
    elif J is None:
        J = sp.csr_matrix((0, H.shape[0]))
    _check_shapes(H, J, g, h)
    n, m = H.shape[0], J.shape[0]
    if sparse is None:
        sparse = is_sparse_input or n + m > SPARSE_THRESHOLD
    rhs = np.concatenate([g, h])
    if sparse:
        K = kkt_matrix(H, J, sparse=True)
        try:
            lu = spla.splu(sp.csc_matrix(K))
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        sol = lu.solve(rhs)
        sol = sol + lu.solve(rhs - K @ sol)
    else:
        K = kkt_matrix(H, J)
        fac = SymmetricFactor(K)
        sol = fac.solve(rhs)
        sol = sol + fac.solve(rhs - K @ sol)
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("KKT solve produced non-finite values")
    res = float(np.abs(K @ sol - rhs).max(initial=0.0))
    if res > 1e-6 * (1.0 + np.abs(rhs).max(initial=0.0)):
        raise SingularSystem(f"KKT residual {res:.3e} indicates a singular system")
    return KKTSolution(primal=sol[:n], dual=sol[n:], residual_norm=res)


def solve_centralized(p: CoupledQP) -> KKTSolution:
    """Solve the full problem in one KKT system; dual is ``[nu; lambda]``."""
    J = p.constraint_matrix
    h = p.constraint_rhs
    n_tot = p.n + J.shape[0]
    if n_tot > SPARSE_THRESHOLD or p.is_sparse:
        return solve_saddle(sp.csr_matrix(p.Q), sp.csr_matrix(J), p.c, h)
    return solve_saddle(p.Q, J, p.c, h)


def spd_check(M) -> bool:
    """True iff a Cholesky factorization with strictly positive pivots succeeds."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    if M.shape[0] == 0:
        return True
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    piv = np.diag(L) ** 2
    return bool(np.all(np.isfinite(piv)) and piv.min() > PIVOT_RTOL * piv.max())


def _basis_split(J):
    """Choose ``m`` basic columns of ``J`` by column-pivoted QR.

    Returns ``(basic, nonbasic, Qf, R_B)`` with ``J[:, basic] = Qf @ R_B``.
    """
    m, n = J.shape
    if m == 0:
        return np.zeros(0, dtype=int), np.arange(n), np.zeros((0, 0)), np.zeros((0, 0))
    if m > n:
        raise RankDeficient(f"{m} constraints on {n} variables")
    Qf, R, piv = sla.qr(J, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.min() <= PIVOT_RTOL * diag.max():
        raise RankDeficient(
            f"constraint matrix is rank deficient (pivot {diag.min():.3e})"
        )
    return piv[:m], piv[m:], Qf, R[:, :m]


def constraint_rank_ok(J) -> bool:
    try:
        _basis_split(np.asarray(J, dtype=float))
    except RankDeficient:
        return False
    return True


def reduce_to_unconstrained(p: CoupledQP):
    """Eliminate ``[A; Pi] z = [-Bd; 0]`` by variable reduction.

    Basic variables ``z_B`` are expressed through the remaining ones,
    ``z_B = J_B^{-1}(h - J_N z_N)``, so the null-space basis is
    ``Z = P [-J_B^{-1} J_N; I]``.  Returns the reduced QP over
    ``n - (m + p)`` variables and the affine map ``z = Z y + z_part``.
    """
    if p.is_sparse:
        p = p.dense()
    J = p.constraint_matrix
    h = p.constraint_rhs
    n, m = p.n, J.shape[0]
    basic, nonbasic, Qf, RB = _basis_split(J)
    Z = np.zeros((n, n - m))
    Z[nonbasic, np.arange(n - m)] = 1.0
    z_part = np.zeros(n)
    if m:
        Z[basic] = -sla.solve_triangular(RB, Qf.T @ J[:, nonbasic])
        z_part[basic] = sla.solve_triangular(RB, Qf.T @ h)
    Qr = Z.T @ p.Q @ Z
    Qr = 0.5 * (Qr + Qr.T)
    cr = Z.T @ (p.c - p.Q @ z_part)
    return UnconstrainedQP(Qr, cr), AffineMap(Z, z_part)


def kkt_residual(H, J, g, h, x, y):
    """Infinity norm of the KKT residual for a candidate pair."""
    r1 = H @ x + J.T @ y - g
    r2 = J @ x - h
    return float(max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0)))
