"""
Case-study generators: temporal storage planning and spatial diffusion.

Both are emitted already in partitioned form.  Each partition carries
zero-cost copies of the neighbor values its constraints read (the state
``x_k(0)`` in time, ghost potentials in space), tied to their owners by
rows of ``Pi`` whose duals are the coordination prices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lifting import Partitioning
from .qp_core import CoupledQP


@dataclass(frozen=True)
class TemporalCaseSpec:
    K: int = 10
    M: int = 100
    delta: float = 0.1
    amplitudes: tuple = (4.0, 1.0)
    # angular frequency multipliers: sin(f * pi * i / N)
    frequencies: tuple = (4.0, 24.0)

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def N(self):
        return self.K * self.M


@dataclass(frozen=True)
class SpatialCaseSpec:
    P: int = 10
    M: int = 10
    D: float = 1.0
    X: float = 1.0
    Y: float = 1.0
    sin_amplitude: float = 2.0
    gauss_amplitude: float = 3.0
    # None -> two thirds of the way along each axis
    center: tuple = None
    sigma: float = None

    def __post_init__(self):
        if self.P < 1 or self.M < 1:
            raise ValueError("P and M must be positive")
        if self.D <= 0:
            raise ValueError("D must be positive")

    @property
    def N(self):
        return (self.P * self.M) ** 2

    @property
    def gaussian_center(self):
        if self.center is not None:
            return tuple(self.center)
        return (2.0 * self.X / 3.0, 2.0 * self.Y / 3.0)

    @property
    def gaussian_sigma(self):
        return self.X / 8.0 if self.sigma is None else self.sigma


@dataclass
class Case:
    qp: CoupledQP
    partitioning: Partitioning
    metadata: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.qp
        yield self.partitioning
        yield self.metadata

    @property
    def pi_owner(self):
        return self.metadata["pi_owner"]


def temporal_disturbance(spec: TemporalCaseSpec, i):
    """``a1 sin(f1 pi i / N) + a2 sin(f2 pi i / N)`` at time index ``i``."""
    N = spec.N
    return sum(a * np.sin(f * np.pi * np.asarray(i, dtype=float) / N)
               for a, f in zip(spec.amplitudes, spec.frequencies))


def spatial_load(spec: SpatialCaseSpec, x, y):
    """Sinusoid plus Gaussian load at physical coordinates ``(x, y)``."""
    x0, y0 = spec.gaussian_center
    s = spec.gaussian_sigma
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    wave = spec.sin_amplitude * np.sin(2 * np.pi * x / spec.X) * np.sin(2 * np.pi * y / spec.Y)
    bump = spec.gauss_amplitude * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * s * s))
    return wave + bump


def node_coordinates(spec: SpatialCaseSpec, i, j):
    """Coordinates of mesh node ``(i, j)``, 1-based; 0 and PM+1 are the boundary."""
    G = spec.P * spec.M
    return i * spec.X / (G + 1), j * spec.Y / (G + 1)


def disturbance_field(spec, node):
    """Disturbance at a mesh node.

    Temporal nodes are integers ``i`` (1..N, 0 allowed); spatial nodes are
    1-based pairs ``(i, j)``.
    """
    if isinstance(spec, TemporalCaseSpec):
        return float(temporal_disturbance(spec, node))
    i, j = node
    return float(spatial_load(spec, *node_coordinates(spec, i, j)))


def flow_from_potentials(p_field, i, j, D=1.0):
    """Flows from node ``(i, j)`` to ``(i, j+1), (i, j-1), (i+1, j), (i-1, j)``.

    ``p_field`` is indexed from 0; potentials outside it are zero.
    """
    p_field = np.asarray(p_field, dtype=float)
    rows, cols = p_field.shape

    def pot(a, b):
        return p_field[a, b] if 0 <= a < rows and 0 <= b < cols else 0.0

    here = pot(i, j)
    return tuple(D * (here - pot(a, b)) for a, b in ((i, j + 1), (i, j - 1), (i + 1, j), (i - 1, j)))


def build_temporal(spec: TemporalCaseSpec = None) -> Case:
    """Temporal storage problem split into ``K`` windows of ``M`` steps.

    Per partition the variables are ``x_k(0)`` (copy of the previous
    window's last state, absent for the first window) followed by
    ``(x(i), u(i))`` pairs.  Dynamics ``x(i+1) = x(i) + delta (u(i+1) +
    d(i+1))`` run over ``i = 0..N-1`` with ``x(0) = 0``; the objective sums
    ``x(i)^2 + u(i)^2`` over ``i = 1..N``.
    """
    spec = spec or TemporalCaseSpec()
    K, M, N, dt = spec.K, spec.M, spec.N, spec.delta
    d = temporal_disturbance(spec, np.arange(1, N + 1))

    n = 2 * N + (K - 1)
    owner = np.empty(n, dtype=int)
    x_idx = np.empty(N, dtype=int)
    u_idx = np.empty(N, dtype=int)
    dup_idx = [None] * K
    layout = []
    pos = 0
    for k in range(K):
        start = pos
        if k > 0:
            dup_idx[k] = pos
            pos += 1
        g = np.arange(k * M, (k + 1) * M)
        x_idx[g] = pos + 2 * np.arange(M)
        u_idx[g] = pos + 2 * np.arange(M) + 1
        pos += 2 * M
        owner[start:pos] = k
        layout.append({"dup": dup_idx[k], "x": x_idx[g].tolist(), "u": u_idx[g].tolist()})

    phys = np.concatenate([x_idx, u_idx])
    Q = sp.csr_matrix((np.full(2 * N, 2.0), (phys, phys)), shape=(n, n))

    ar, ac, av = [], [], []
    for k in range(K):
        rows = []
        for i in range(M):
            g = k * M + i  # row imposes x(g+1) from x(g)
            ar += [g, g]
            ac += [x_idx[g], u_idx[g]]
            av += [1.0, -dt]
            if i > 0:
                ar.append(g); ac.append(x_idx[g - 1]); av.append(-1.0)
            elif k > 0:
                ar.append(g); ac.append(dup_idx[k]); av.append(-1.0)
            rows.append(g)
        layout[k]["rows"] = rows
    A = sp.csr_matrix((av, (ar, ac)), shape=(N, n))
    B = sp.csr_matrix(-dt * sp.identity(N))

    pr, pc, pv = [], [], []
    for k in range(1, K):
        pr += [k - 1, k - 1]
        pc += [dup_idx[k], x_idx[k * M - 1]]
        pv += [1.0, -1.0]
        layout[k]["pi_row"] = k - 1
    layout[0]["pi_row"] = None
    Pi = sp.csr_matrix((pv, (pr, pc)), shape=(K - 1, n))

    qp = CoupledQP(Q=Q, c=np.zeros(n), A=A, B=B, Pi=Pi, d=d)
    l1 = [float(np.abs(d[k * M:(k + 1) * M]).sum()) for k in range(K)]
    physical = np.empty(2 * N, dtype=int)
    physical[0::2] = x_idx
    physical[1::2] = u_idx
    meta = {
        "kind": "temporal",
        "spec": spec,
        "K": K, "M": M, "N": N, "delta": dt,
        "d": d,
        "x_index": x_idx, "u_index": u_idx,
        "physical": physical,
        "layout": layout,
        "pi_owner": np.arange(1, K, dtype=int),
        "partition_disturbance_l1": l1,
    }
    return Case(qp, Partitioning(owner, K), meta)


_SIDES = (("north", -1, 0), ("south", 1, 0), ("west", 0, -1), ("east", 0, 1))


def build_spatial(spec: SpatialCaseSpec = None) -> Case:
    """Diffusion network on a ``PM x PM`` mesh split into ``P x P`` blocks.

    Partition ``(n, m)`` has index ``n P + m``.  Its variables are the
    ``(p, u)`` pairs of its ``M x M`` nodes in row-major order followed by
    ghost potentials on each side that faces another partition (north,
    south, west, east; ``M`` each).  Mesh-boundary potentials are zero and
    do not appear.
    """
    spec = spec or SpatialCaseSpec()
    P, M, D = spec.P, spec.M, spec.D
    G = P * M
    gi, gj = np.meshgrid(np.arange(1, G + 1), np.arange(1, G + 1), indexing="ij")
    d_grid = spatial_load(spec, *node_coordinates(spec, gi, gj))

    p_idx = np.empty((G, G), dtype=int)
    u_idx = np.empty((G, G), dtype=int)
    ghosts = {}
    owner_list = []
    layout = []
    pos = 0
    for n in range(P):
        for m in range(P):
            k = n * P + m
            start = pos
            li, lj = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
            local = (li * M + lj)
            p_idx[n * M:(n + 1) * M, m * M:(m + 1) * M] = pos + 2 * local
            u_idx[n * M:(n + 1) * M, m * M:(m + 1) * M] = pos + 2 * local + 1
            pos += 2 * M * M
            entry = {"p": p_idx[n * M:(n + 1) * M, m * M:(m + 1) * M].tolist(),
                     "u": u_idx[n * M:(n + 1) * M, m * M:(m + 1) * M].tolist(),
                     "ghosts": {}}
            for side, dn, dm in _SIDES:
                if 0 <= n + dn < P and 0 <= m + dm < P:
                    ghosts[(k, side)] = np.arange(pos, pos + M)
                    entry["ghosts"][side] = list(range(pos, pos + M))
                    pos += M
            owner_list.append(np.full(pos - start, k))
            layout.append(entry)
    n_var = pos
    owner = np.concatenate(owner_list)

    def potential_index(k, n, m, i, j):
        """Variable holding p at global node (i, j) as seen from partition k."""
        if not (0 <= i < G and 0 <= j < G):
            return None
        if i // M == n and j // M == m:
            return p_idx[i, j]
        if i < n * M:
            return ghosts[(k, "north")][j - m * M]
        if i >= (n + 1) * M:
            return ghosts[(k, "south")][j - m * M]
        if j < m * M:
            return ghosts[(k, "west")][i - n * M]
        return ghosts[(k, "east")][i - n * M]

    phys = np.concatenate([p_idx.ravel(), u_idx.ravel()])
    Q = sp.csr_matrix((np.full(phys.size, 2.0), (phys, phys)), shape=(n_var, n_var))

    ar, ac, av = [], [], []
    row_of = np.arange(G * G).reshape(G, G)
    for i in range(G):
        for j in range(G):
            n, m = i // M, j // M
            k = n * P + m
            r = row_of[i, j]
            ar += [r, r]
            ac += [p_idx[i, j], u_idx[i, j]]
            av += [4.0 * D, -1.0]
            for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                v = potential_index(k, n, m, a, b)
                if v is not None:
                    ar.append(r); ac.append(v); av.append(-D)
    A = sp.csr_matrix((av, (ar, ac)), shape=(G * G, n_var))
    B = sp.csr_matrix(-sp.identity(G * G))
    for n in range(P):
        for m in range(P):
            layout[n * P + m]["rows"] = row_of[n * M:(n + 1) * M, m * M:(m + 1) * M].tolist()

    pr, pc, pv = [], [], []
    pi_owner = []
    for n in range(P):
        for m in range(P):
            k = n * P + m
            layout[k]["pi_rows"] = {}
            for side, dn, dm in _SIDES:
                if (k, side) not in ghosts:
                    continue
                rows_here = []
                for t, gvar in enumerate(ghosts[(k, side)]):
                    if side in ("north", "south"):
                        i = n * M - 1 if side == "north" else (n + 1) * M
                        j = m * M + t
                    else:
                        i = n * M + t
                        j = m * M - 1 if side == "west" else (m + 1) * M
                    r = len(pi_owner)
                    pr += [r, r]
                    pc += [gvar, p_idx[i, j]]
                    pv += [1.0, -1.0]
                    rows_here.append(r)
                    pi_owner.append(k)
                layout[k]["pi_rows"][side] = rows_here
    Pi = sp.csr_matrix((pv, (pr, pc)), shape=(len(pi_owner), n_var))

    d = d_grid.ravel()
    qp = CoupledQP(Q=Q, c=np.zeros(n_var), A=A, B=B, Pi=Pi, d=d)
    l1 = []
    for n in range(P):
        for m in range(P):
            l1.append(float(np.abs(d_grid[n * M:(n + 1) * M, m * M:(m + 1) * M]).sum()))
    physical = np.empty(2 * G * G, dtype=int)
    physical[0::2] = p_idx.ravel()
    physical[1::2] = u_idx.ravel()
    meta = {
        "kind": "spatial",
        "spec": spec,
        "P": P, "M": M, "G": G, "D": D, "N": G * G,
        "d": d, "d_grid": d_grid,
        "p_index": p_idx, "u_index": u_idx,
        "physical": physical,
        "layout": layout,
        "pi_owner": np.asarray(pi_owner, dtype=int),
        "partition_disturbance_l1": l1,
    }
    return Case(qp, Partitioning(owner, P * P), meta)


def temporal_state_trajectory(case: Case, z):
    """Split an original-space primal vector into ``(x, u)`` trajectories."""
    z = np.asarray(z)
    return z[case.metadata["x_index"]], z[case.metadata["u_index"]]


def spatial_fields(case: Case, z):
    """Potential and source fields on the ``G x G`` mesh."""
    z = np.asarray(z)
    return z[case.metadata["p_index"]], z[case.metadata["u_index"]]


def build_case(kind, params=None) -> Case:
    params = dict(params or {})
    for key in ("amplitudes", "frequencies", "center"):
        if key in params and params[key] is not None:
            params[key] = tuple(params[key])
    if kind == "temporal":
        return build_temporal(TemporalCaseSpec(**params))
    if kind == "spatial":
        return build_spatial(SpatialCaseSpec(**params))
    raise ValueError(f"unknown case kind {kind!r}")
