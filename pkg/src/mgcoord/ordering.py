"""Coordination orders.

Partitions are numbered from 0.  A schedule is the visiting sequence plus its
split into groups; partitions inside one group must not be coupled so that
they can be solved concurrently from the same frozen state.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

from .errors import InvalidSchedule, MissingMetadata, NotTwoColorable


@dataclass(frozen=True)
class OrderingSchedule:
    sigma: tuple
    groups: tuple
    name: str = "custom"
    composite: bool = False

    def __post_init__(self):
        sigma = tuple(int(k) for k in self.sigma)
        groups = tuple(tuple(int(k) for k in g) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise InvalidSchedule("schedule needs at least one nonempty group")
        flat = tuple(k for g in groups for k in g)
        if flat != sigma:
            raise InvalidSchedule("groups must concatenate to the visiting sequence")
        if not self.composite and sorted(sigma) != list(range(len(sigma))):
            raise InvalidSchedule(f"sequence {sigma} is not a permutation of 0..{len(sigma) - 1}")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "groups", groups)

    @property
    def K(self):
        return max(self.sigma) + 1

    def to_dict(self):
        return {"sigma": list(self.sigma), "groups": [list(g) for g in self.groups]}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc, name="custom"):
        sigma = doc["sigma"]
        groups = doc.get("groups") or [[k] for k in sigma]
        return cls(sigma, groups, name, composite=len(set(sigma)) != len(sigma))

    @classmethod
    def sequential(cls, sigma, name="custom"):
        return cls(tuple(sigma), tuple((k,) for k in sigma), name)


def validate_schedule(schedule: OrderingSchedule, lifted):
    """Raise :class:`InvalidSchedule` unless ``schedule`` fits ``lifted``."""
    seen = set()
    for group in schedule.groups:
        for k in group:
            if not 0 <= k < lifted.K:
                raise InvalidSchedule(f"partition {k} out of range 0..{lifted.K - 1}")
            seen.add(k)
        for i, k in enumerate(group):
            for k2 in group[i + 1:]:
                if lifted.coupled(k, k2):
                    raise InvalidSchedule(f"partitions {k} and {k2} share a group but are coupled")
    if seen != set(range(lifted.K)):
        raise InvalidSchedule("schedule does not visit every partition")


def lexicographic(K):
    return OrderingSchedule.sequential(range(K), "lexicographic")


def reverse_lexicographic(K):
    return OrderingSchedule.sequential(range(K - 1, -1, -1), "reverse_lexicographic")


def forward_backward(K):
    """Forward pass followed by a backward pass, counted as one step."""
    if K < 2:
        raise ValueError("forward-backward ordering needs K >= 2")
    seq = list(range(K)) + list(range(K - 1, -1, -1))
    return OrderingSchedule(tuple(seq), tuple((k,) for k in seq), "forward_backward", composite=True)


def chain_graph(K):
    return [[j for j in (k - 1, k + 1) if 0 <= j < K] for k in range(K)]


def grid_graph(P):
    adj = []
    for n in range(P):
        for m in range(P):
            nb = []
            for dn, dm in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                if 0 <= n + dn < P and 0 <= m + dm < P:
                    nb.append((n + dn) * P + m + dm)
            adj.append(sorted(nb))
    return adj


def two_color(adjacency):
    """BFS 2-coloring; each component starts from its smallest index."""
    K = len(adjacency)
    color = [-1] * K
    for start in range(K):
        if color[start] >= 0:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            k = queue.popleft()
            for j in adjacency[k]:
                if color[j] < 0:
                    color[j] = 1 - color[k]
                    queue.append(j)
                elif color[j] == color[k]:
                    raise NotTwoColorable(f"partitions {k} and {j} are coupled and share a color")
    return color


def red_black(lifted=None, K=None, grid=None):
    """Two-group ordering: 'red' partitions first, then 'black' ones.

    The coupling graph comes from ``lifted`` when given, otherwise from a
    1-D chain of ``K`` partitions or a ``grid x grid`` partition mesh.  For a
    chain this is ``(0, 2, 4, ..., 1, 3, ...)``.
    """
    if lifted is not None:
        adjacency = [lifted.neighbors(k) for k in range(lifted.K)]
    elif grid is not None:
        adjacency = grid_graph(int(grid))
    elif K is not None:
        adjacency = chain_graph(int(K))
    else:
        raise ValueError("red_black needs a lifted problem, K, or a grid size")
    color = two_color(adjacency)
    groups = [tuple(k for k in range(len(color)) if color[k] == c) for c in (0, 1)]
    groups = tuple(g for g in groups if g)
    return OrderingSchedule(tuple(k for g in groups for k in g), groups, "red_black")


def by_disturbance_magnitude(metadata):
    """Partitions by descending L1 disturbance mass, ties by ascending index."""
    try:
        mass = list(metadata["partition_disturbance_l1"])
    except (KeyError, TypeError):
        raise MissingMetadata("partition_disturbance_l1") from None
    seq = sorted(range(len(mass)), key=lambda k: (-mass[k], k))
    return OrderingSchedule.sequential(seq, "disturbance")


def spiral(P):
    """Clockwise inward spiral over a ``P x P`` partition grid from (0, 0)."""
    top, bottom, left, right = 0, P - 1, 0, P - 1
    cells = []
    while top <= bottom and left <= right:
        cells += [(top, m) for m in range(left, right + 1)]
        cells += [(n, right) for n in range(top + 1, bottom + 1)]
        if top < bottom:
            cells += [(bottom, m) for m in range(right - 1, left - 1, -1)]
        if left < right:
            cells += [(n, left) for n in range(bottom - 1, top, -1)]
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return OrderingSchedule.sequential([n * P + m for n, m in cells], "spiral")


ORDERINGS = (
    "lexicographic", "reverse_lexicographic", "forward_backward",
    "red_black", "spiral", "disturbance",
)


def make_ordering(name, lifted, metadata=None):
    """Build a named ordering for ``lifted`` (used by the command line)."""
    metadata = metadata or {}
    K = lifted.K
    if name == "lexicographic":
        return lexicographic(K)
    if name == "reverse_lexicographic":
        return reverse_lexicographic(K)
    if name == "forward_backward":
        return forward_backward(K)
    if name == "red_black":
        return red_black(lifted)
    if name == "spiral":
        P = metadata.get("P")
        if P is None or P * P != K:
            raise MissingMetadata("spiral ordering needs a square partition grid (metadata 'P')")
        return spiral(P)
    if name == "disturbance":
        return by_disturbance_magnitude(metadata)
    raise KeyError(name)
