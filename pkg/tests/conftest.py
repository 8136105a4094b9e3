"""Random instance generators shared by the test modules."""

import numpy as np
import pytest

from mgcoord.lifting import Partitioning
from mgcoord.qp_core import CoupledQP, UnconstrainedQP


def random_spd(rng, n, shift=1.0):
    G = rng.standard_normal((n, n))
    return G @ G.T / n + shift * np.eye(n)


def split_sizes(rng, N, K, minimum=2):
    """Random composition of ``N`` into ``K`` parts, each at least ``minimum``."""
    extra = N - K * minimum
    cuts = np.sort(rng.integers(0, extra + 1, size=K - 1))
    parts = np.diff(np.concatenate([[0], cuts, [extra]]))
    return [int(p) + minimum for p in parts]


def banded_instance(rng, N, K, bandwidth=1):
    """Unconstrained QP with banded SPD curvature on contiguous partitions."""
    Q = np.zeros((N, N))
    for off in range(1, bandwidth + 1):
        v = rng.uniform(-1, 1, N - off)
        Q += np.diag(v, off) + np.diag(v, -off)
    Q += np.diag(np.abs(Q).sum(axis=1) + rng.uniform(0.5, 2.0, N))
    c = rng.standard_normal(N)
    return UnconstrainedQP(Q, c), Partitioning.contiguous(split_sizes(rng, N, K))


def chain_instance(rng, N, K, cross=True):
    """Explicitly coupled chain in the style of the temporal case.

    Partition ``k > 0`` starts with a zero-cost copy of the last variable of
    partition ``k - 1`` tied by a coupling row; each partition carries one
    local equality row touching the copy.  With ``cross`` the physical
    curvature also couples neighbouring partitions directly.
    """
    sizes = split_sizes(rng, N, K, minimum=3)
    owner = np.repeat(np.arange(K), sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    dup = np.zeros(N, dtype=bool)
    dup[starts[1:]] = True
    phys = np.flatnonzero(~dup)
    Q = np.zeros((N, N))
    Qp = random_spd(rng, phys.size)
    if not cross:
        # keep only partition-diagonal blocks
        same = owner[phys][:, None] == owner[phys][None, :]
        Qp = np.where(same, Qp, 0.0)
        Qp += np.eye(phys.size) * (np.abs(Qp).sum(axis=1).max())
    else:
        # restrict cross terms to neighbouring partitions
        near = np.abs(owner[phys][:, None] - owner[phys][None, :]) <= 1
        Qp = np.where(near, Qp, 0.0)
        Qp += np.eye(phys.size) * np.abs(Qp).sum(axis=1).max()
    Q[np.ix_(phys, phys)] = Qp
    c = rng.standard_normal(N)
    c[dup] = 0.0
    A = np.zeros((K, N))
    for k in range(K):
        cols = np.arange(starts[k], starts[k] + sizes[k])
        A[k, cols] = rng.uniform(0.5, 1.5, cols.size) * rng.choice([-1, 1], cols.size)
    B = rng.standard_normal((K, 2))
    d = rng.standard_normal(2)
    Pi = np.zeros((K - 1, N))
    for k in range(1, K):
        Pi[k - 1, starts[k]] = 1.0
        Pi[k - 1, starts[k] - 1] = -1.0
    qp = CoupledQP(Q=Q, c=c, A=A, B=B, Pi=Pi, d=d)
    return qp, Partitioning(owner, K), np.arange(1, K)


def two_block_instance(rng, n1=4, n2=3, p1=2, p2=1):
    """Two partitions with PD curvature blocks and a full coupling matrix."""
    Q = np.zeros((n1 + n2, n1 + n2))
    Q[:n1, :n1] = random_spd(rng, n1)
    Q[n1:, n1:] = random_spd(rng, n2)
    Pi = rng.standard_normal((p1 + p2, n1 + n2))
    c = rng.standard_normal(n1 + n2)
    qp = CoupledQP(Q=Q, c=c, Pi=Pi)
    part = Partitioning([0] * n1 + [1] * n2)
    return qp, part, np.array([0] * p1 + [1] * p2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
