"""
Lifting of a coupled QP into partition blocks tied by coupling rows.

Each partition keeps its owned variables (ascending original index) followed
by duplicates of foreign variables it is coupled to through nonzero entries
of ``Q``.  Cross terms are split between the two partitions; duplicates are
tied to their owners by rows ``z_dup - z_owner = 0``.  Explicit rows of
``Pi`` are routed to coupling rows as given, explicit rows of ``A`` stay
inside the partition that holds all their variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, NonSeparableConstraint, SingularPartition, SingularSystem, UnknownPartition
from .qp_core import CoupledQP, SymmetricFactor, UnconstrainedQP, solve_centralized, solve_saddle


@dataclass(frozen=True)
class Partitioning:
    """Assignment of each node (variable group) to a partition ``0..K-1``."""

    assignments: np.ndarray
    K: int = None

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=int).reshape(-1)
        K = int(a.max()) + 1 if self.K is None and a.size else int(self.K or 0)
        if a.size and (a.min() < 0 or a.max() >= K):
            raise UnknownPartition(f"assignments must lie in 0..{K - 1}")
        counts = np.bincount(a, minlength=K)
        if K < 1 or np.any(counts == 0):
            raise UnknownPartition("every partition must own at least one node")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "K", K)

    @property
    def N(self):
        return self.assignments.shape[0]

    def members(self, k):
        if not 0 <= k < self.K:
            raise UnknownPartition(f"partition {k} out of range 0..{self.K - 1}")
        return np.flatnonzero(self.assignments == k)

    @classmethod
    def contiguous(cls, sizes):
        return cls(np.repeat(np.arange(len(sizes)), sizes))

    def expand(self, n_z):
        """Per-variable partitioning for ``n_z`` interleaved variables per node."""
        return Partitioning(np.repeat(self.assignments, n_z), self.K)


@dataclass
class PartitionBlock:
    """Lifted data of one partition.

    Local vector layout is ``[z_k; nu_k; lam_k]`` with ``nu_k`` the duals of
    the partition-local rows ``E z_k = e`` and ``lam_k`` the duals of the
    coupling rows ``Pi_self z_k + sum_k' couplings[k'] z_k' = 0``.
    """

    Q: np.ndarray
    c: np.ndarray
    E: np.ndarray
    e: np.ndarray
    Pi_self: np.ndarray
    couplings: dict
    index_map: np.ndarray
    duplicate: np.ndarray
    a_rows: np.ndarray
    pi_rows: np.ndarray

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.E.shape[0]

    @property
    def p(self):
        return self.Pi_self.shape[0]

    @property
    def dim(self):
        return self.n + self.m + self.p

    @property
    def owned(self):
        return ~self.duplicate

    def kkt(self):
        n, m, p = self.n, self.m, self.p
        K = np.zeros((self.dim, self.dim))
        K[:n, :n] = self.Q
        K[n:n + m, :n] = self.E
        K[:n, n:n + m] = self.E.T
        K[n + m:, :n] = self.Pi_self
        K[:n, n + m:] = self.Pi_self.T
        return K


class LiftedProblem:
    """Partitioned problem with duplicated interface variables."""

    def __init__(self, blocks, n_original, m_original=0, p_original=0, weight=0.5):
        self.blocks = list(blocks)
        self.n_original = int(n_original)
        self.m_original = int(m_original)
        self.p_original = int(p_original)
        self.weight = float(weight)
        dims = [b.dim for b in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self._factors = {}
        self._incoming = self._neighbors = None

    @property
    def K(self):
        return len(self.blocks)

    @property
    def dim(self):
        return int(self.offsets[-1])

    def block_slice(self, k):
        return slice(self.offsets[k], self.offsets[k + 1])

    def check_index(self, k):
        if not 0 <= k < self.K:
            raise UnknownPartition(f"partition {k} out of range 0..{self.K - 1}")

    def coupled(self, k, k2):
        """True when ``k`` and ``k2`` exchange primal or dual information."""
        if k == k2:
            return False
        return k2 in self.blocks[k].couplings or k in self.blocks[k2].couplings

    def _graph(self):
        if self._incoming is None:
            inc = [[] for _ in range(self.K)]
            for k2, b in enumerate(self.blocks):
                for k in b.couplings:
                    if k != k2:
                        inc[k].append(k2)
            self._incoming = [sorted(x) for x in inc]
            self._neighbors = [
                sorted(set(self._incoming[k]) | (set(self.blocks[k].couplings) - {k}))
                for k in range(self.K)
            ]
        return self._incoming, self._neighbors

    def neighbors(self, k):
        return self._graph()[1][k]

    def incoming(self, k):
        """Partitions whose coupling rows touch variables of ``k``."""
        return self._graph()[0][k]

    def factor(self, k):
        """Cached symmetric factorization of the partition KKT matrix."""
        self.check_index(k)
        fac = self._factors.get(k)
        if fac is None:
            try:
                fac = SymmetricFactor(self.blocks[k].kkt())
            except SingularSystem as exc:
                raise SingularPartition(k, str(exc)) from None
            self._factors[k] = fac
        return fac

    def coupling_block(self, k, k2):
        """Matrix ``B_{k k2}`` with ``A_k x_k = b_k + sum_k2 B_{k k2} x_k2``."""
        bk, bj = self.blocks[k], self.blocks[k2]
        out = np.zeros((bk.dim, bj.dim))
        if k in bj.couplings:
            out[:bk.n, bj.n + bj.m:] = -bj.couplings[k].T
        if k2 in bk.couplings:
            out[bk.n + bk.m:, :bj.n] = -bk.couplings[k2]
        return out

    def rhs_block(self, k):
        b = self.blocks[k]
        return np.concatenate([b.c, b.e, np.zeros(b.p)])

    def kkt_matrix(self):
        """Sparse lifted KKT matrix in the stacked ``w`` ordering."""
        rows = []
        for k in range(self.K):
            row = []
            for k2 in range(self.K):
                if k2 == k:
                    row.append(sp.csr_matrix(self.blocks[k].kkt()))
                elif self.coupled(k, k2):
                    row.append(sp.csr_matrix(-self.coupling_block(k, k2)))
                else:
                    row.append(None)
            rows.append(row)
        return sp.bmat(rows, format="csc")

    def rhs(self):
        return np.concatenate([self.rhs_block(k) for k in range(self.K)])

    def gather_primal(self, z_blocks):
        """Original-space primal from the owned entries of each block."""
        z = np.zeros(self.n_original)
        for b, zk in zip(self.blocks, z_blocks):
            own = b.owned
            z[b.index_map[own]] = np.asarray(zk)[own]
        return z

    def scatter_primal(self, z):
        z = np.asarray(z, dtype=float)
        return [z[b.index_map].copy() for b in self.blocks]

    def owned_mask(self):
        """Mask over the stacked primal entries that are owned, not duplicated."""
        return np.concatenate([b.owned for b in self.blocks])

    def to_dict(self):
        return {
            "n_original": self.n_original,
            "m_original": self.m_original,
            "p_original": self.p_original,
            "weight": self.weight,
            "partitions": [
                {
                    "Q": b.Q.tolist(),
                    "c": b.c.tolist(),
                    "E": b.E.tolist(),
                    "e": b.e.tolist(),
                    "Pi_self": b.Pi_self.tolist(),
                    "couplings": {str(k2): M.tolist() for k2, M in sorted(b.couplings.items())},
                    "index_map": b.index_map.tolist(),
                    "duplicate": b.duplicate.tolist(),
                    "a_rows": b.a_rows.tolist(),
                    "pi_rows": b.pi_rows.tolist(),
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        blocks = []
        for part in doc["partitions"]:
            n = len(part["index_map"])
            blocks.append(
                PartitionBlock(
                    Q=np.asarray(part["Q"], dtype=float).reshape(n, n),
                    c=np.asarray(part["c"], dtype=float),
                    E=np.asarray(part["E"], dtype=float).reshape(-1, n),
                    e=np.asarray(part["e"], dtype=float),
                    Pi_self=np.asarray(part["Pi_self"], dtype=float).reshape(-1, n),
                    couplings={
                        int(k2): np.asarray(M, dtype=float) for k2, M in part["couplings"].items()
                    },
                    index_map=np.asarray(part["index_map"], dtype=int),
                    duplicate=np.asarray(part["duplicate"], dtype=bool),
                    a_rows=np.asarray(part["a_rows"], dtype=int),
                    pi_rows=np.asarray(part["pi_rows"], dtype=int),
                )
            )
        return cls(blocks, doc["n_original"], doc["m_original"], doc["p_original"], doc["weight"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _part_of_vars(part: Partitioning, n):
    if part.N == n:
        return part.assignments
    if part.N and n % part.N == 0:
        return part.expand(n // part.N).assignments
    raise DimensionMismatch(f"partitioning covers {part.N} nodes, problem has {n} variables")


def coupled_neighbors(q, part: Partitioning, k):
    """Foreign nodes coupled to partition ``k`` through nonzero ``Q`` entries."""
    if not 0 <= k < part.K:
        raise UnknownPartition(f"partition {k} out of range 0..{part.K - 1}")
    Q = sp.csr_matrix(q.Q)
    owner = _part_of_vars(part, Q.shape[0])
    own = owner == k
    touched = np.zeros(Q.shape[0], dtype=bool)
    touched[Q[np.flatnonzero(own)].indices] = True
    return np.flatnonzero(touched & ~own)


def _row(M, r):
    """Column indices and values of row ``r`` of a CSR matrix (zeros dropped)."""
    lo, hi = M.indptr[r], M.indptr[r + 1]
    cols, vals = M.indices[lo:hi], M.data[lo:hi]
    keep = vals != 0.0
    return cols[keep], vals[keep]


def _default_pi_owner(Pi, owner):
    Pi = sp.csr_matrix(Pi)
    Pi.sort_indices()
    out = np.empty(Pi.shape[0], dtype=int)
    for r in range(Pi.shape[0]):
        cols, vals = _row(Pi, r)
        if cols.size == 0:
            raise DimensionMismatch(f"coupling row {r} is identically zero")
        pos = cols[vals > 0]
        out[r] = owner[pos[0] if pos.size else cols[0]]
    return out


def _lift(Q, c, A, e, Pi, owner, K, pi_owner=None, weight=0.5):
    Q = sp.csr_matrix(Q, dtype=float)
    A = sp.csr_matrix(A, dtype=float)
    Pi = sp.csr_matrix(Pi, dtype=float)
    for M in (Q, A, Pi):
        M.sort_indices()
    n = Q.shape[0]
    if not 0.0 <= weight <= 1.0:
        raise ValueError("lifting weight must lie in [0, 1]")
    members = [np.flatnonzero(owner == k) for k in range(K)]
    local_pos = np.empty(n, dtype=int)
    for k in range(K):
        local_pos[members[k]] = np.arange(members[k].size)

    # partition-local rows of A
    a_part = np.empty(A.shape[0], dtype=int)
    for r in range(A.shape[0]):
        parts = np.unique(owner[_row(A, r)[0]])
        if parts.size > 1:
            raise NonSeparableConstraint(r, parts)
        a_part[r] = parts[0] if parts.size else 0
    if pi_owner is None:
        pi_owner = _default_pi_owner(Pi, owner)
    pi_owner = np.asarray(pi_owner, dtype=int)
    if pi_owner.shape != (Pi.shape[0],):
        raise DimensionMismatch(f"pi_owner has shape {pi_owner.shape}, expected ({Pi.shape[0]},)")
    if pi_owner.size and (pi_owner.min() < 0 or pi_owner.max() >= K):
        raise UnknownPartition("pi_owner names a partition out of range")

    layouts = []
    for k in range(K):
        own = members[k]
        Qo = Q[own]
        Qo.eliminate_zeros()
        foreign = np.zeros(n, dtype=bool)
        foreign[Qo.indices] = True
        foreign[own] = False
        layouts.append((own, np.flatnonzero(foreign)))

    blocks = []
    for k in range(K):
        own, dups = layouts[k]
        idx = np.concatenate([own, dups]).astype(int)
        no, nd = own.size, dups.size
        nk = no + nd
        Qrows = Q[own]
        Qk = np.zeros((nk, nk))
        Qk[:no, :no] = Qrows[:, own].toarray()
        if nd:
            w = np.where(owner[dups] > k, weight, 1.0 - weight)
            cross = Qrows[:, dups].toarray() * w[None, :]
            Qk[:no, no:] = cross
            Qk[no:, :no] = cross.T
        ck = np.zeros(nk)
        ck[:no] = c[own]

        rows = np.flatnonzero(a_part == k)
        Ek = np.zeros((rows.size, nk))
        Ek[:, :no] = A[rows][:, own].toarray()
        ek = e[rows].copy()

        pi_rows_k = np.flatnonzero(pi_owner == k)
        p = nd + pi_rows_k.size
        Pself = np.zeros((p, nk))
        couplings = {}
        Pself[np.arange(nd), no + np.arange(nd)] = 1.0
        for i, j in enumerate(dups):
            k2 = int(owner[j])
            M = couplings.setdefault(k2, np.zeros((p, members[k2].size + layouts[k2][1].size)))
            M[i, local_pos[j]] = -1.0
        for i, r in enumerate(pi_rows_k, start=nd):
            cols, vals = _row(Pi, r)
            for j, v in zip(cols, vals):
                k2 = int(owner[j])
                if k2 == k:
                    Pself[i, local_pos[j]] = v
                else:
                    M = couplings.setdefault(
                        k2, np.zeros((p, members[k2].size + layouts[k2][1].size))
                    )
                    M[i, local_pos[j]] = v
        duplicate = np.zeros(nk, dtype=bool)
        duplicate[no:] = True
        blocks.append(
            PartitionBlock(
                Q=Qk, c=ck, E=Ek, e=ek, Pi_self=Pself, couplings=couplings,
                index_map=idx, duplicate=duplicate, a_rows=rows,
                pi_rows=np.concatenate([-np.ones(nd, dtype=int), pi_rows_k]).astype(int),
            )
        )
    return LiftedProblem(blocks, n, A.shape[0], Pi.shape[0], weight)


def build_lifted(q: UnconstrainedQP, part: Partitioning, weight=0.5) -> LiftedProblem:
    """Lift an unconstrained QP whose coupling is implicit in ``Q``.

    ``weight`` is the share of a cross term kept by the lower-numbered
    partition; the other partition receives ``1 - weight``.
    """
    Q = q.Q
    n = Q.shape[0]
    owner = _part_of_vars(part, n)
    return _lift(Q, np.asarray(q.c, dtype=float), np.zeros((0, n)), np.zeros(0),
                 np.zeros((0, n)), owner, part.K, weight=weight)


def lift_explicit(p: CoupledQP, part: Partitioning, pi_owner=None, weight=0.5) -> LiftedProblem:
    """Lift a problem with explicit constraints.

    Rows of ``A`` must be partition-local; rows of ``Pi`` may span
    partitions and become coupling rows of the partition named by
    ``pi_owner`` (default: owner of the row's first positive entry).
    Cross-partition entries of ``Q`` are handled as in :func:`build_lifted`.
    """
    owner = _part_of_vars(part, p.n)
    e = -(p.B @ p.d) if p.m else np.zeros(0)
    return _lift(p.Q, p.c, p.A, e, p.Pi, owner, part.K, pi_owner=pi_owner, weight=weight)


def solve_lifted(lifted: LiftedProblem):
    """Stacked primal-dual solution ``w*`` of the whole lifted KKT system."""
    K = lifted.kkt_matrix()
    b = lifted.rhs()
    if K.shape[0] == 0:
        return np.zeros(0)
    from scipy.sparse.linalg import splu

    try:
        lu = splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from None
    w = lu.solve(b)
    w = w + lu.solve(b - K @ w)
    return w


def lifted_primal_blocks(lifted: LiftedProblem, w):
    out = []
    for k, b in enumerate(lifted.blocks):
        out.append(np.asarray(w)[lifted.offsets[k]:lifted.offsets[k] + b.n])
    return out


@dataclass
class LiftReport:
    """Outcome of :func:`verify_lift`; discrepancies are scaled (see there)."""

    primal_discrepancy: float
    duplicate_mismatch: float
    coupling_residual: float
    threshold: float
    flagged: bool = False
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return (self.primal_discrepancy <= self.threshold
                and self.duplicate_mismatch <= self.threshold)


def verify_lift(problem, lifted: LiftedProblem, threshold=1e-8, loose_threshold=1e-6,
                ill_conditioned=1e-4) -> LiftReport:
    """Compare the lifted solution against a direct solve of the original.

    Discrepancies are measured relative to ``max(1, max|z_ref|)`` so that
    badly scaled solutions are judged by their significant digits.  If the
    smallest eigenvalue of the (reduced) curvature is below
    ``ill_conditioned`` the looser threshold applies and the report is
    flagged.
    """
    if isinstance(problem, UnconstrainedQP):
        problem = problem.as_coupled()
    # same sparse LU route as the lifted solve, so K = 1 agrees bit for bit
    ref = solve_saddle(sp.csr_matrix(problem.Q), sp.csr_matrix(problem.constraint_matrix),
                       problem.c, problem.constraint_rhs, sparse=True).primal
    w = solve_lifted(lifted)
    zb = lifted_primal_blocks(lifted, w)
    z = lifted.gather_primal(zb)
    scale = max(1.0, float(np.abs(ref).max(initial=0.0)))
    disc = float(np.abs(z - ref).max(initial=0.0)) / scale
    dup = 0.0
    for b, zk in zip(lifted.blocks, zb):
        d = b.duplicate
        if d.any():
            dup = max(dup, float(np.abs(zk[d] - z[b.index_map[d]]).max()) / scale)
    coup = 0.0
    for k, b in enumerate(lifted.blocks):
        r = b.Pi_self @ zb[k]
        for k2, M in b.couplings.items():
            r = r + M @ zb[k2]
        coup = max(coup, float(np.abs(r).max(initial=0.0)))
    report = LiftReport(disc, dup, coup, threshold)
    if problem.m + problem.p == 0:
        Qd = problem.Q.toarray() if sp.issparse(problem.Q) else problem.Q
        lam_min = float(np.linalg.eigvalsh(Qd)[0]) if problem.n else 1.0
    else:
        from .qp_core import reduce_to_unconstrained

        red, _ = reduce_to_unconstrained(problem)
        lam_min = float(np.linalg.eigvalsh(red.Q)[0]) if red.n else 1.0
    if lam_min < ill_conditioned:
        report.threshold = loose_threshold
        report.flagged = True
        report.notes.append(f"smallest curvature eigenvalue {lam_min:.3e}")
    return report


def reassemble_curvature(lifted: LiftedProblem):
    """Sum of lifted blocks embedded back into original coordinates.

    With consistent duplicates the lifted objective equals the original
    one, so this returns ``Q`` exactly for any split weight.
    """
    n = lifted.n_original
    out = np.zeros((n, n))
    for b in lifted.blocks:
        np.add.at(out, (b.index_map[:, None], b.index_map[None, :]), b.Q)
    return out
