"""
Gauss-Seidel coordination over a lifted problem.

One sweep visits the partitions in the order of an
:class:`~mgcoord.ordering.OrderingSchedule`.  Partition ``k`` solves its KKT
system with neighbor duals entering the gradient and neighbor primals the
coupling right-hand side.  The sweep is affine, ``w -> S w + r``, and the
spectral radius of ``S`` decides convergence.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .errors import DimensionCap, DimensionMismatch, PowerIterationStall
from .lifting import LiftedProblem, solve_lifted
from .ordering import validate_schedule

DEFAULT_DENSE_CAP = 5000
CONVERGENCE_MARGIN = 1e-12


def dense_cap():
    """Dense-operator size cap, overridable through ``MGCOORD_DENSE_CAP``."""
    raw = os.environ.get("MGCOORD_DENSE_CAP")
    return int(raw) if raw else DEFAULT_DENSE_CAP


@dataclass
class CoordinationState:
    """Per-partition primal ``z``, local-row duals ``nu`` and coupling duals ``lam``."""

    z: list
    nu: list
    lam: list
    step: int = 0

    @classmethod
    def zeros(cls, lifted: LiftedProblem):
        return cls(
            [np.zeros(b.n) for b in lifted.blocks],
            [np.zeros(b.m) for b in lifted.blocks],
            [np.zeros(b.p) for b in lifted.blocks],
        )

    @classmethod
    def from_vector(cls, lifted: LiftedProblem, w, step=0):
        w = np.asarray(w, dtype=float)
        if w.shape != (lifted.dim,):
            raise DimensionMismatch(f"state vector has shape {w.shape}, expected ({lifted.dim},)")
        z, nu, lam = [], [], []
        for k, b in enumerate(lifted.blocks):
            x = w[lifted.block_slice(k)]
            z.append(x[:b.n].copy())
            nu.append(x[b.n:b.n + b.m].copy())
            lam.append(x[b.n + b.m:].copy())
        return cls(z, nu, lam, step)

    def vector(self):
        parts = []
        for zk, nk, lk in zip(self.z, self.nu, self.lam):
            parts.extend((zk, nk, lk))
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self):
        return CoordinationState(
            [a.copy() for a in self.z], [a.copy() for a in self.nu],
            [a.copy() for a in self.lam], self.step,
        )

    def check(self, lifted: LiftedProblem):
        if len(self.z) != lifted.K:
            raise DimensionMismatch(f"state has {len(self.z)} partitions, problem has {lifted.K}")
        for k, b in enumerate(lifted.blocks):
            if (self.z[k].shape != (b.n,) or self.nu[k].shape != (b.m,)
                    or self.lam[k].shape != (b.p,)):
                raise DimensionMismatch(f"state block {k} does not match partition dimensions")


class PartitionUpdate(NamedTuple):
    z: np.ndarray
    nu: np.ndarray
    lam: np.ndarray


@dataclass
class IterationOperator:
    S: np.ndarray
    r: np.ndarray
    order: object
    active: np.ndarray = None

    def apply(self, w):
        return self.S @ w + self.r

    def fixed_point(self):
        return np.linalg.solve(np.eye(self.S.shape[0]) - self.S, self.r)


@dataclass
class ConvergenceCertificate:
    spectral_radius: float
    converges: bool
    eigen_method: str

    def to_dict(self):
        return {
            "spectral_radius": self.spectral_radius,
            "converges": self.converges,
            "eigen_method": self.eigen_method,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class TraceRow:
    step: int
    error_w: float
    error_primal_owned: float
    step_diff: float


@dataclass
class GSResult:
    state: CoordinationState
    trace: list
    converged: bool
    rho: float = None
    notes: list = field(default_factory=list)

    def __iter__(self):
        # allows ``state, trace = run_gs(...)``
        yield self.state
        yield self.trace

    def errors(self, column="error_w"):
        return np.array([getattr(row, column) for row in self.trace])


def _solve_partition(lifted, k, z, lam, homogeneous=False):
    b = lifted.blocks[k]
    g = np.zeros(b.n) if homogeneous else b.c.copy()
    for k2 in lifted.incoming(k):
        g -= lifted.blocks[k2].couplings[k].T @ lam[k2]
    h = np.zeros(b.p)
    for k2, M in b.couplings.items():
        h -= M @ z[k2]
    e = np.zeros(b.m) if homogeneous else b.e
    x = lifted.factor(k).solve(np.concatenate([g, e, h]))
    return PartitionUpdate(x[:b.n], x[b.n:b.n + b.m], x[b.n + b.m:])


def partition_solve(lifted: LiftedProblem, state: CoordinationState, k, order=None):
    """Solve the subproblem of partition ``k`` against the current neighbor data.

    The caller is responsible for ``state`` holding updated values for the
    partitions that precede ``k`` in ``order``; the solve itself only reads
    neighbor blocks and is a pure function of its inputs.
    """
    lifted.check_index(k)
    return _solve_partition(lifted, k, state.z, state.lam)


def _sweep(lifted, z, nu, lam, order, homogeneous=False, executor=None):
    z, nu, lam = list(z), list(nu), list(lam)
    for group in order.groups:
        if executor is not None and len(group) > 1:
            frozen_z, frozen_lam = tuple(z), tuple(lam)
            results = list(executor.map(
                lambda k: _solve_partition(lifted, k, frozen_z, frozen_lam, homogeneous), group
            ))
        else:
            frozen_z, frozen_lam = tuple(z), tuple(lam)
            results = [_solve_partition(lifted, k, frozen_z, frozen_lam, homogeneous) for k in group]
        for k, upd in zip(group, results):
            z[k], nu[k], lam[k] = upd.z, upd.nu, upd.lam
    return z, nu, lam


def gs_sweep(lifted: LiftedProblem, state: CoordinationState, order, executor=None):
    """One coordination step over all groups of ``order``.

    Partitions of a group read the state frozen before the group started;
    with an ``executor`` they are solved concurrently.  Results do not
    depend on intra-group scheduling.
    """
    state.check(lifted)
    z, nu, lam = _sweep(lifted, state.z, state.nu, state.lam, order, executor=executor)
    return CoordinationState(z, nu, lam, state.step + 1)


def apply_homogeneous(lifted: LiftedProblem, w, order):
    """Matrix-free ``w -> S w`` (a sweep with zero data)."""
    st = CoordinationState.from_vector(lifted, w)
    z, nu, lam = _sweep(lifted, st.z, st.nu, st.lam, order, homogeneous=True)
    return CoordinationState(z, nu, lam).vector()


def oracle_state(lifted: LiftedProblem):
    """Fixed point ``w*`` obtained from one direct solve of the lifted KKT system."""
    return CoordinationState.from_vector(lifted, solve_lifted(lifted))


def _owned_primal(lifted, state):
    return np.concatenate([zk[b.owned] for zk, b in zip(state.z, lifted.blocks)])


def run_gs(lifted: LiftedProblem, initial: CoordinationState, order, tol=1e-8, max_steps=500,
           oracle=None, executor=None, validate=True):
    """Iterate sweeps until ``max|w^{l+1} - w^l| <= tol`` or ``max_steps``.

    With an ``oracle`` state the trace holds Euclidean errors against it;
    otherwise ``error_w`` is the Euclidean step difference and the primal
    column is NaN.  The result carries ``converged=False`` instead of
    raising when the budget runs out.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if validate:
        validate_schedule(order, lifted)
    initial.check(lifted)
    if isinstance(oracle, CoordinationState):
        w_star = oracle.vector()
        z_star = _owned_primal(lifted, oracle)
    elif oracle is not None:
        w_star = np.asarray(oracle, dtype=float)
        z_star = _owned_primal(lifted, CoordinationState.from_vector(lifted, w_star))
    else:
        w_star = z_star = None

    def row(step, state, w, diff_inf, diff_2):
        if w_star is None:
            return TraceRow(step, diff_2, float("nan"), diff_inf)
        return TraceRow(
            step,
            float(np.linalg.norm(w - w_star)),
            float(np.linalg.norm(_owned_primal(lifted, state) - z_star)),
            diff_inf,
        )

    state = initial.copy()
    w = state.vector()
    trace = [row(0, state, w, float("nan"), float("nan"))]
    converged = False
    for _ in range(max_steps):
        new = gs_sweep(lifted, state, order, executor=executor)
        w_new = new.vector()
        diff = w_new - w
        diff_inf = float(np.abs(diff).max(initial=0.0))
        trace.append(row(new.step - initial.step, new, w_new, diff_inf, float(np.linalg.norm(diff))))
        state, w = new, w_new
        if diff_inf <= tol:
            converged = True
            break
    return GSResult(state, trace, converged)


def _passes(order):
    """Split a visiting sequence into runs without repeated partitions."""
    out, cur, seen = [], [], set()
    for group in order.groups:
        if seen & set(group):
            out.append(cur)
            cur, seen = [], set()
        cur.append(list(group))
        seen |= set(group)
    if cur:
        out.append(cur)
    return out


def _read_columns(lifted):
    """Stacked indices of ``w`` that some coupling block reads."""
    cols = []
    for k, b in enumerate(lifted.blocks):
        off = lifted.offsets[k]
        for k2 in lifted.incoming(k):
            # z_k enters coupling rows of k2
            cols.append(off + np.flatnonzero(np.any(lifted.blocks[k2].couplings[k] != 0, axis=0)))
        if b.couplings:
            # lam_k enters gradients of the coupled partitions
            live = np.zeros(b.p, dtype=bool)
            for M in b.couplings.values():
                live |= np.any(M != 0, axis=1)
            cols.append(off + b.n + b.m + np.flatnonzero(live))
    if not cols:
        return np.zeros(0, dtype=int)
    return np.unique(np.concatenate(cols)).astype(int)


def build_iteration_operator(lifted: LiftedProblem, order, cap=None, validate=True):
    """Assemble ``S`` and ``r`` with ``sweep(w) = S w + r``.

    Each pass over the visiting sequence is the block lower-triangular
    solve ``x_k = A_k^{-1}(b_k + sum_k' B_kk' x_k')`` carried out on the
    matrix of input directions.  Only columns read by some coupling block
    can be nonzero in ``S``; the remaining ones are skipped.
    """
    if validate:
        validate_schedule(order, lifted)
    n = lifted.dim
    cap = dense_cap() if cap is None else cap
    if n > cap:
        raise DimensionCap(f"lifted dimension {n} exceeds dense cap {cap}")
    visited = {k for g in order.groups for k in g}
    active = _read_columns(lifted)
    for k in range(lifted.K):
        if k not in visited:
            active = np.union1d(active, np.arange(lifted.offsets[k], lifted.offsets[k + 1]))
    M = np.zeros((n, active.size))
    M[active, np.arange(active.size)] = 1.0
    v = np.zeros(n)
    blocks = {}
    for run in _passes(order):
        for group in run:
            frozen_M, frozen_v = M.copy(), v.copy()
            for k in group:
                sl = lifted.block_slice(k)
                rhs_M = np.zeros((sl.stop - sl.start, active.size))
                rhs_v = lifted.rhs_block(k)
                for k2 in lifted.neighbors(k):
                    key = (k, k2)
                    if key not in blocks:
                        blocks[key] = lifted.coupling_block(k, k2)
                    s2 = lifted.block_slice(k2)
                    rhs_M += blocks[key] @ frozen_M[s2]
                    rhs_v = rhs_v + blocks[key] @ frozen_v[s2]
                fac = lifted.factor(k)
                M[sl] = fac.solve(rhs_M)
                v[sl] = fac.solve(rhs_v)
    S = np.zeros((n, n))
    S[:, active] = M
    return IterationOperator(S, v, order, active)


def _ritz_radius(W, SW, rank_tol=1e-8):
    """Largest Ritz value modulus of ``S`` on ``span(W)`` given ``SW = S W``.

    Consecutive power iterates span a Krylov space holding the dominant
    eigenvectors, including complex pairs and clusters of equal modulus
    where a plain norm ratio would oscillate.  The basis is truncated by a
    rank-revealing QR since late iterates become nearly parallel.
    """
    Qw, R, piv = sla.qr(W, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    r = int(np.count_nonzero(d > rank_tol * d[0]))
    Qr = Qw[:, :r]
    SQ = sla.solve_triangular(R[:r, :r], SW[:, piv[:r]].T, trans="T").T
    return float(np.abs(np.linalg.eigvals(Qr.T @ SQ)).max())


def _power_radius(lifted, order, steps=200, window=50, stall_tol=1e-6, seed=0, basis=16):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(lifted.dim)
    v /= np.linalg.norm(v)
    W, SW = [], []
    est = []
    for _ in range(steps):
        u = apply_homogeneous(lifted, v, order)
        nrm = float(np.linalg.norm(u))
        if nrm == 0.0:
            return 0.0
        W.append(v)
        SW.append(u)
        W, SW = W[-basis:], SW[-basis:]
        est.append(_ritz_radius(np.column_stack(W), np.column_stack(SW)))
        v = u / nrm
    est = np.asarray(est[-min(window, len(est)):])
    spread = float(est.max() - est.min())
    if spread > stall_tol:
        raise PowerIterationStall(est[-1], spread)
    return float(est[-1])


def spectral_radius(S, active=None):
    """Spectral radius of ``S`` using only its nonzero columns."""
    if active is None:
        active = np.flatnonzero(np.any(S != 0, axis=0))
    if active.size == 0:
        return 0.0
    # nonzero eigenvalues of S equal those of S[J, J] when S = S[:, J] E_J'
    sub = S[np.ix_(active, active)]
    return float(np.abs(np.linalg.eigvals(sub)).max(initial=0.0))


def certify(lifted: LiftedProblem, order, cap=None, power_steps=200, seed=0):
    """Spectral-radius certificate for the sweep in ``order``.

    Dense eigenvalues below the cap, power iteration on the matrix-free
    homogeneous sweep above it.
    """
    validate_schedule(order, lifted)
    cap = dense_cap() if cap is None else cap
    if lifted.dim <= cap:
        op = build_iteration_operator(lifted, order, cap=cap, validate=False)
        rho = spectral_radius(op.S, op.active)
        method = "dense_eig"
    else:
        rho = _power_radius(lifted, order, steps=power_steps, seed=seed)
        method = "power_iteration"
    return ConvergenceCertificate(rho, bool(rho < 1.0 - CONVERGENCE_MARGIN), method)


def state_from_original(lifted: LiftedProblem, z, nu=None, lam=None):
    """Route an original-space primal-dual point into a coordination state.

    Duplicates copy their owner's value; coupling rows created for implicit
    duplicates have no original dual and start at zero.
    """
    z = np.asarray(z, dtype=float)
    nu = np.zeros(lifted.m_original) if nu is None else np.asarray(nu, dtype=float)
    lam = np.zeros(lifted.p_original) if lam is None else np.asarray(lam, dtype=float)
    zs, nus, lams = [], [], []
    for b in lifted.blocks:
        zs.append(z[b.index_map].copy())
        nus.append(nu[b.a_rows].copy())
        lk = np.zeros(b.p)
        explicit = b.pi_rows >= 0
        lk[explicit] = lam[b.pi_rows[explicit]]
        lams.append(lk)
    return CoordinationState(zs, nus, lams)


def original_from_state(lifted: LiftedProblem, state: CoordinationState):
    """Original-space ``(z, nu, lam)`` from the owned entries of a state."""
    z = lifted.gather_primal(state.z)
    nu = np.zeros(lifted.m_original)
    lam = np.zeros(lifted.p_original)
    for b, nk, lk in zip(lifted.blocks, state.nu, state.lam):
        nu[b.a_rows] = nk
        explicit = b.pi_rows >= 0
        lam[b.pi_rows[explicit]] = lk[explicit]
    return z, nu, lam


def write_trace_csv(path, trace, rho=None):
    """Export a trace with columns step, error_w, error_primal_owned, rho_bound."""
    lines = ["step,error_w,error_primal_owned,rho_bound"]
    e0 = trace[0].error_w if trace else float("nan")
    for row in trace:
        bound = "" if rho is None else repr(float(e0 * rho ** row.step))
        lines.append(f"{row.step},{row.error_w!r},{row.error_primal_owned!r},{bound}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
