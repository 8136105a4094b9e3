"""
Grid transfers, coarse problems and multi-level coordination.

A transfer couples a coarse level to the fine one through a restriction
``T`` (``z = T z~``) and a constraint aggregation ``U`` (``(nu, lam) =
U (nu~, lam~)``).  Here both are piecewise constant: every fine variable
copies one coarse variable and every coarse constraint is the plain sum of
the fine constraints in its cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coordination import (
    CoordinationState,
    GSResult,
    TraceRow,
    _owned_primal,
    gs_sweep,
    oracle_state,
    original_from_state,
    state_from_original,
)
from .errors import DimensionMismatch, InfeasibleCoarse, MissingMetadata, NonDivisor, RankDeficient
from .lifting import LiftedProblem, Partitioning, lift_explicit
from .ordering import validate_schedule
from .qp_core import CoupledQP, KKTSolution, solve_centralized, solve_saddle

# dense rank tests are used up to this many rows
_DENSE_RANK_ROWS = 2500


def _full_column_rank(M):
    M = sp.csc_matrix(M)
    if M.shape[1] > M.shape[0]:
        return False
    counts = np.diff(sp.csr_matrix(M).indptr)
    if counts.size and counts.max(initial=0) <= 1:
        # disjoint column supports: rank is the number of nonempty columns
        return bool(np.all(np.diff(M.indptr) > 0))
    return _row_rank(M.T) == M.shape[1]


def _row_rank(J):
    """Numerical rank of ``J`` (dense SVD when small, sparse LU otherwise)."""
    J = sp.csr_matrix(J)
    m = J.shape[0]
    if m == 0:
        return 0
    if m <= _DENSE_RANK_ROWS:
        return int(np.linalg.matrix_rank(J.toarray()))
    G = sp.csc_matrix(J @ J.T)
    try:
        lu = spla.splu(G)
    except RuntimeError:
        return m - 1
    piv = np.abs(lu.U.diagonal())
    return int(np.count_nonzero(piv > 1e-12 * piv.max()))


@dataclass
class GridTransfer:
    """Restriction ``T`` (fine vars x coarse vars) and aggregation ``U``.

    ``U`` maps coarse constraints to fine ones; its first ``n_coarse_a``
    columns aggregate dynamic rows (the fine ``A`` block, the first
    ``n_fine_a`` rows) and the rest aggregate coupling rows.
    """

    T: sp.csr_matrix
    U: sp.csr_matrix
    fine_level: object = None
    coarse_level: object = None
    n_fine_a: int = None
    n_coarse_a: int = None
    coarse_owner: np.ndarray = None
    coarse_pi_owner: np.ndarray = None

    def __post_init__(self):
        self.T = sp.csr_matrix(self.T, dtype=float)
        self.U = sp.csr_matrix(self.U, dtype=float)
        if self.n_fine_a is None:
            self.n_fine_a = self.U.shape[0]
        if self.n_coarse_a is None:
            self.n_coarse_a = self.U.shape[1]
        if not _full_column_rank(self.T):
            raise RankDeficient("restriction T must have full column rank")
        if not _full_column_rank(self.U):
            raise RankDeficient("aggregation U must have full column rank")
        mixed = self.U[:self.n_fine_a, self.n_coarse_a:].nnz + self.U[self.n_fine_a:, :self.n_coarse_a].nnz
        if mixed:
            raise DimensionMismatch("U must not mix dynamic rows with coupling rows")

    @property
    def shape(self):
        return self.T.shape, self.U.shape

    def restrict(self, z):
        """Least-squares restriction ``(T'T)^{-1} T' z``."""
        return restrict(self, z)


def _blocks_of_ones(M, M_c):
    if M_c < 1 or M % M_c:
        raise NonDivisor(f"coarse resolution {M_c} does not divide {M}")
    r = M // M_c
    return sp.csr_matrix((np.ones(M), (np.arange(M), np.arange(M) // r)), shape=(M, M_c))


def build_transfer_temporal(M, M_c) -> GridTransfer:
    """Piecewise-constant transfer collapsing ``M / M_c`` time points per cell.

    Fine point ``i`` (1-based) maps to coarse point ``floor((i-1)/(M/M_c)) + 1``.
    """
    T = _blocks_of_ones(M, M_c)
    return GridTransfer(T, T.copy(), fine_level=M, coarse_level=M_c)


def build_transfer_spatial(M, M_c) -> GridTransfer:
    """Tensor-product transfer on an ``M x M`` block (row-major nodes)."""
    T1 = _blocks_of_ones(M, M_c)
    T = sp.kron(T1, T1, format="csr")
    return GridTransfer(T, T.copy(), fine_level=M, coarse_level=M_c)


@dataclass(frozen=True)
class CoarseningSchedule:
    levels: tuple
    sweeps_per_level: int = 1

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if not levels:
            raise ValueError("schedule needs at least one level")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels {levels} must increase strictly")
        if min(levels) < 1:
            raise ValueError("levels must be positive")
        if int(self.sweeps_per_level) < 1:
            raise ValueError("sweeps_per_level must be a positive integer")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "sweeps_per_level", int(self.sweeps_per_level))

    def validate(self, M):
        for v in self.levels:
            if v > M or M % v:
                raise NonDivisor(f"level {v} does not divide M={M}")

    def to_dict(self):
        return {"levels": list(self.levels), "sweeps_per_level": self.sweeps_per_level}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["levels"]), doc.get("sweeps_per_level", 1))


def _temporal_case_transfer(meta, M_c):
    K, M = meta["K"], meta["M"]
    t1 = build_transfer_temporal(M, M_c)
    layout = meta["layout"]
    n_fine = sum(len(e["x"]) + len(e["u"]) + (e["dup"] is not None) for e in layout)
    tr, tc = [], []
    owner = []
    col = 0
    r = M // M_c
    for k, e in enumerate(layout):
        if e["dup"] is not None:
            tr.append(e["dup"]); tc.append(col)
            owner.append(k)
            col += 1
        base = col
        for i in range(M):
            j = i // r
            tr += [e["x"][i], e["u"][i]]
            tc += [base + 2 * j, base + 2 * j + 1]
        owner += [k] * (2 * M_c)
        col += 2 * M_c
    T = sp.csr_matrix((np.ones(len(tr)), (tr, tc)), shape=(n_fine, col))

    # dynamic rows summed per cell, interface rows kept as they are
    UA = sp.kron(sp.identity(K), t1.U)
    UP = sp.identity(K - 1)
    U = sp.block_diag([UA, UP], format="csr")
    pi_owner = np.asarray(meta["pi_owner"], dtype=int)
    return GridTransfer(T, U, M, M_c, n_fine_a=K * M, n_coarse_a=K * M_c,
                        coarse_owner=np.asarray(owner), coarse_pi_owner=pi_owner)


def _spatial_case_transfer(meta, M_c):
    P, M, G = meta["P"], meta["M"], meta["G"]
    if M_c < 1 or M % M_c:
        raise NonDivisor(f"coarse resolution {M_c} does not divide {M}")
    r = M // M_c
    Gc = P * M_c
    layout = meta["layout"]
    p_idx, u_idx = meta["p_index"], meta["u_index"]
    n_fine = int(max(p_idx.max(), u_idx.max(),
                     max((max(v) for e in layout for v in e["ghosts"].values()), default=-1))) + 1
    tr, tc, owner = [], [], []
    col = 0
    ghost_cols = {}
    for k, e in enumerate(layout):
        n, m = divmod(k, P)
        base = col
        for i in range(M):
            for j in range(M):
                cell = (i // r) * M_c + (j // r)
                tr += [p_idx[n * M + i, m * M + j], u_idx[n * M + i, m * M + j]]
                tc += [base + 2 * cell, base + 2 * cell + 1]
        col += 2 * M_c * M_c
        for side, gvars in e["ghosts"].items():
            ghost_cols[(k, side)] = col
            for t, gv in enumerate(gvars):
                tr.append(gv); tc.append(col + t // r)
            col += M_c
        owner += [k] * (col - base)
    T = sp.csr_matrix((np.ones(len(tr)), (tr, tc)), shape=(n_fine, col))

    # stencil rows: global row-major on both meshes
    gi, gj = np.meshgrid(np.arange(G), np.arange(G), indexing="ij")
    fine_rows = (gi * G + gj).ravel()
    coarse_rows = ((gi // r) * Gc + gj // r).ravel()
    UA = sp.csr_matrix((np.ones(G * G), (fine_rows, coarse_rows)), shape=(G * G, Gc * Gc))
    ur, uc, pi_owner = [], [], []
    crow = 0
    for k, e in enumerate(layout):
        for side, rows in e["pi_rows"].items():
            for t, fr in enumerate(rows):
                ur.append(fr); uc.append(crow + t // r)
            pi_owner += [k] * M_c
            crow += M_c
    n_pi = sum(len(rows) for e in layout for rows in e["pi_rows"].values())
    UP = sp.csr_matrix((np.ones(len(ur)), (ur, uc)), shape=(n_pi, crow))
    U = sp.block_diag([UA, UP], format="csr")
    return GridTransfer(T, U, M, M_c, n_fine_a=G * G, n_coarse_a=Gc * Gc,
                        coarse_owner=np.asarray(owner), coarse_pi_owner=np.asarray(pi_owner, dtype=int))


def case_transfer(metadata, M_c) -> GridTransfer:
    """Transfer for a whole case-study problem at coarse resolution ``M_c``.

    Interface copies (``x_k(0)``, ghost potentials) and their coupling rows
    are coarsened alongside the partition interiors, so the coarse problem
    keeps the partitioned structure.
    """
    try:
        kind = metadata["kind"]
    except (KeyError, TypeError):
        raise MissingMetadata("kind") from None
    if kind == "temporal":
        return _temporal_case_transfer(metadata, M_c)
    if kind == "spatial":
        return _spatial_case_transfer(metadata, M_c)
    raise MissingMetadata(f"no transfer for case kind {kind!r}")


def _check_transfer(p: CoupledQP, t: GridTransfer):
    if t.T.shape[0] != p.n:
        raise DimensionMismatch(f"T has {t.T.shape[0]} rows, problem has {p.n} variables")
    if t.U.shape[0] != p.m + p.p or t.n_fine_a != p.m:
        raise DimensionMismatch(
            f"U has {t.U.shape[0]} rows ({t.n_fine_a} dynamic), problem has {p.m} + {p.p} constraints"
        )


def coarsen_problem(p: CoupledQP, t: GridTransfer) -> CoupledQP:
    """Coarse problem with curvature ``T'QT``, cost ``T'c``, rows ``U'[A; Pi]T``.

    Data enter as ``U_A' B d`` with ``U_A`` the dynamic-row block of ``U``.
    Raises :class:`InfeasibleCoarse` when the coarse rows do not span the
    coarse data directions.
    """
    _check_transfer(p, t)
    T, U = t.T, t.U
    Q = sp.csr_matrix(T.T @ sp.csr_matrix(p.Q) @ T)
    Q = sp.csr_matrix(0.5 * (Q + Q.T))
    c = T.T @ p.c
    J = sp.csr_matrix(U.T @ sp.csr_matrix(p.constraint_matrix) @ T)
    UA = U[:p.m, :t.n_coarse_a]
    B = sp.csr_matrix(UA.T @ sp.csr_matrix(p.B)) if p.m else None
    rank = _row_rank(J)
    if rank < J.shape[0]:
        data = np.zeros((J.shape[0], B.shape[1] if B is not None else 0))
        if B is not None:
            data[:t.n_coarse_a] = B.toarray()
        if _row_rank(sp.hstack([J, sp.csr_matrix(data)])) > rank:
            raise InfeasibleCoarse("coarse constraints do not span the aggregated data")
    return CoupledQP(Q=Q, c=c, A=J[:t.n_coarse_a], B=B, Pi=J[t.n_coarse_a:], d=p.d)


def prolong(t: GridTransfer, coarse_solution):
    """Fine-space warm start ``(z, nu, lam)`` from a coarse primal-dual pair.

    ``z = T z~`` and ``(nu, lam) = U (nu~, lam~)``.
    """
    if isinstance(coarse_solution, KKTSolution):
        zc, yc = coarse_solution.primal, coarse_solution.dual
    else:
        zc, yc = coarse_solution
    zc = np.asarray(zc, dtype=float).reshape(-1)
    yc = np.asarray(yc, dtype=float).reshape(-1)
    if zc.size != t.T.shape[1] or yc.size != t.U.shape[1]:
        raise DimensionMismatch(
            f"coarse solution sizes ({zc.size}, {yc.size}) do not match transfer "
            f"({t.T.shape[1]}, {t.U.shape[1]})"
        )
    z = t.T @ zc
    y = t.U @ yc
    return z, y[:t.n_fine_a], y[t.n_fine_a:]


def restrict(t: GridTransfer, z):
    """Least-squares restriction ``(T'T)^{-1} T' z`` (exact on ``range(T)``)."""
    z = np.asarray(z, dtype=float)
    TtT = sp.csc_matrix(t.T.T @ t.T)
    rhs = t.T.T @ z
    diag = TtT.diagonal()
    if TtT.nnz == np.count_nonzero(diag):
        return rhs / diag
    return spla.spsolve(TtT, rhs)


def coarse_lifted(p: CoupledQP, t: GridTransfer) -> LiftedProblem:
    """Partitioned form of the coarse problem, for solving it by coordination."""
    if t.coarse_owner is None:
        raise MissingMetadata("transfer carries no coarse partition assignment")
    coarse = coarsen_problem(p, t)
    part = Partitioning(t.coarse_owner)
    return lift_explicit(coarse, part, pi_owner=t.coarse_pi_owner)


def warm_start(p: CoupledQP, lifted: LiftedProblem, t: GridTransfer) -> CoordinationState:
    """Solve the coarse problem centrally and route its prolongation into a state."""
    sol = solve_centralized(coarsen_problem(p, t))
    return state_from_original(lifted, *prolong(t, sol))


def coarse_correction(p: CoupledQP, lifted: LiftedProblem, state: CoordinationState,
                      t: GridTransfer) -> CoordinationState:
    """Galerkin correction of ``state`` on the coarse level.

    The KKT residual of the current iterate is restricted with ``T'`` and
    ``U'``, the coarse saddle system is solved for a correction and the
    prolonged correction is added.  From a zero state this is exactly the
    prolonged coarse solution.
    """
    _check_transfer(p, t)
    z, nu, lam = original_from_state(lifted, state)
    y = np.concatenate([nu, lam])
    J = sp.csr_matrix(p.constraint_matrix)
    Q = sp.csr_matrix(p.Q)
    r_z = p.c - Q @ z - J.T @ y
    r_y = p.constraint_rhs - J @ z
    Qc = sp.csr_matrix(t.T.T @ Q @ t.T)
    Jc = sp.csr_matrix(t.U.T @ J @ t.T)
    sol = solve_saddle(0.5 * (Qc + Qc.T), Jc, t.T.T @ r_z, t.U.T @ r_y)
    dz, dnu, dlam = prolong(t, sol)
    new = state_from_original(lifted, z + dz, nu + dnu, lam + dlam)
    new.step = state.step
    return new


@dataclass
class MultigridResult:
    state: CoordinationState
    trace: list
    converged: bool
    levels_run: list = field(default_factory=list)

    def __iter__(self):
        yield self.state
        yield self.trace

    def errors(self, column="error_w"):
        return np.array([getattr(row, column) for row in self.trace])


def run_multigrid(p: CoupledQP, part, schedule: CoarseningSchedule, order, metadata=None, *,
                  transfers=None, lifted=None, pi_owner=None, initial=None, tol=1e-8,
                  max_steps=None, oracle=None, executor=None) -> MultigridResult:
    """Sequential coarsening followed by plain fine-level coordination.

    Levels are visited in increasing resolution.  At a level ``M_c < M`` the
    current iterate receives a coarse correction (solved centrally), then
    ``sweeps_per_level`` fine sweeps follow; a level equal to ``M`` only
    sweeps.  After the schedule, sweeps continue until the step difference
    drops below ``tol`` or ``max_steps`` sweeps have been made in total
    (default: just the schedule).

    ``error_trace[0]`` is the error after the first level's correction, so
    a coarse first level gives a warm-started trace.  Errors are Euclidean
    distances to the lifted fixed point.
    """
    if lifted is None:
        if pi_owner is None and metadata is not None:
            pi_owner = metadata.get("pi_owner")
        lifted = lift_explicit(p, part, pi_owner=pi_owner)
    validate_schedule(order, lifted)
    M = None
    if metadata is not None:
        M = metadata.get("M")
    if M is not None:
        schedule.validate(M)

    def transfer(level):
        if transfers is not None:
            return transfers(level) if callable(transfers) else transfers[level]
        if metadata is None:
            raise MissingMetadata("run_multigrid needs case metadata or explicit transfers")
        return case_transfer(metadata, level)

    if oracle is None:
        oracle = oracle_state(lifted)
    w_star = oracle.vector()
    z_star = _owned_primal(lifted, oracle)

    def row(step, st):
        return TraceRow(step, float(np.linalg.norm(st.vector() - w_star)),
                        float(np.linalg.norm(_owned_primal(lifted, st) - z_star)), float("nan"))

    total = len(schedule.levels) * schedule.sweeps_per_level
    max_steps = total if max_steps is None else max(int(max_steps), 0)
    state = CoordinationState.zeros(lifted) if initial is None else initial.copy()
    state.step = 0

    def correct(st, level):
        if M is not None and level == M:
            return st
        t = transfer(level)
        if t.T.shape[0] == t.T.shape[1] and t.U.shape[0] == t.U.shape[1]:
            return st
        return coarse_correction(p, lifted, st, t)

    levels = list(schedule.levels)
    state = correct(state, levels[0])
    trace = [row(0, state)]
    done_levels = [levels[0]]
    converged = False
    w = state.vector()
    step = 0
    level_idx = 0
    while step < max_steps:
        if step and step % schedule.sweeps_per_level == 0 and step // schedule.sweeps_per_level < len(levels):
            level_idx = step // schedule.sweeps_per_level
            state = correct(state, levels[level_idx])
            done_levels.append(levels[level_idx])
        state = gs_sweep(lifted, state, order, executor=executor)
        step += 1
        state.step = step
        w_new = state.vector()
        diff = float(np.abs(w_new - w).max(initial=0.0))
        r = row(step, state)
        r.step_diff = diff
        trace.append(r)
        w = w_new
        if step >= total and diff <= tol:
            converged = True
            break
    return MultigridResult(state, trace, converged, done_levels)


def run_warm_gs(p: CoupledQP, lifted: LiftedProblem, t: GridTransfer, order, **kwargs) -> GSResult:
    """Plain coordination from the prolonged coarse solution."""
    from .coordination import run_gs

    return run_gs(lifted, warm_start(p, lifted, t), order, **kwargs)
