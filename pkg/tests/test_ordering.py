import json

import numpy as np
import pytest

from mgcoord.cases import SpatialCaseSpec, build_spatial
from mgcoord.coordination import CoordinationState, build_iteration_operator, run_gs
from mgcoord.errors import InvalidSchedule, MissingMetadata, NotTwoColorable
from mgcoord.lifting import lift_explicit
from mgcoord.ordering import (
    OrderingSchedule,
    by_disturbance_magnitude,
    forward_backward,
    lexicographic,
    make_ordering,
    red_black,
    reverse_lexicographic,
    spiral,
    two_color,
    validate_schedule,
)

from conftest import chain_instance


def test_lexicographic():
    assert lexicographic(1).groups == ((0,),)
    assert lexicographic(4).groups == ((0,), (1,), (2,), (3,))
    assert lexicographic(10).sigma == tuple(range(10))


def test_reverse_lexicographic():
    assert reverse_lexicographic(2).sigma == (1, 0)
    assert reverse_lexicographic(10).sigma == tuple(range(9, -1, -1))


def test_red_black_chain():
    rb = red_black(K=4)
    assert rb.groups == ((0, 2), (1, 3))
    assert red_black(K=2).groups == ((0,), (1,))
    # sigma(i) = 2i - 1 for the first half, 2i - K for the second (1-based)
    K = 10
    expected = [2 * i - 1 for i in range(1, K // 2 + 1)] + [2 * i - K for i in range(K // 2 + 1, K + 1)]
    assert list(red_black(K=K).sigma) == [s - 1 for s in expected]


def test_red_black_mesh_checkerboard():
    assert red_black(grid=2).groups == ((0, 3), (1, 2))
    qp, part, meta = build_spatial(SpatialCaseSpec(P=2, M=3))
    lifted = lift_explicit(qp, part, meta["pi_owner"])
    rb = red_black(lifted)
    assert rb.groups == ((0, 3), (1, 2))
    # scan the coupling blocks directly
    for g in rb.groups:
        for k in g:
            for k2 in g:
                assert k2 not in lifted.blocks[k].couplings


def test_not_two_colorable():
    with pytest.raises(NotTwoColorable):
        two_color([[1, 2], [0, 2], [0, 1]])
    with pytest.raises(ValueError):
        red_black()


def test_forward_backward():
    assert forward_backward(2).sigma == (0, 1, 1, 0)
    assert forward_backward(4).sigma == (0, 1, 2, 3, 3, 2, 1, 0)
    assert all(len(g) == 1 for g in forward_backward(4).groups)
    with pytest.raises(ValueError):
        forward_backward(1)


def test_forward_backward_fixed_point(rng):
    qp, part, po = chain_instance(rng, 24, 3)
    lifted = lift_explicit(qp, part, po)
    a = build_iteration_operator(lifted, lexicographic(3)).fixed_point()
    b = build_iteration_operator(lifted, forward_backward(3)).fixed_point()
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_spiral():
    assert spiral(1).sigma == (0,)
    assert spiral(2).sigma == (0, 1, 3, 2)
    s3 = spiral(3).sigma
    # (1,1) (1,2) (1,3) (2,3) (3,3) (3,2) (3,1) (2,1) (2,2) in 1-based grid terms
    assert s3 == (0, 1, 2, 5, 8, 7, 6, 3, 4)
    assert sorted(spiral(5).sigma) == list(range(25))


def test_disturbance_ordering_ties_and_zero():
    assert by_disturbance_magnitude({"partition_disturbance_l1": [1.0] * 4}).sigma == (0, 1, 2, 3)
    assert by_disturbance_magnitude({"partition_disturbance_l1": [0.0] * 3}).sigma == (0, 1, 2)
    assert by_disturbance_magnitude({"partition_disturbance_l1": [1, 3, 3, 2]}).sigma == (1, 2, 3, 0)
    with pytest.raises(MissingMetadata):
        by_disturbance_magnitude({})


def test_disturbance_ordering_gaussian_partition_first():
    P, M = 4, 5
    G = P * M
    # Gaussian centred on the middle node of grid partition (3, 3), 1-based
    c = 13 / (G + 1)
    spec = SpatialCaseSpec(P=P, M=M, center=(c, c), sigma=0.05)
    qp, part, meta = build_spatial(spec)
    # oracle: evaluate the load formula at every node and sum per partition
    xs = np.arange(1, G + 1) / (G + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    field = (2 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
             + 3 * np.exp(-((X - c) ** 2 + (Y - c) ** 2) / (2 * 0.05 ** 2)))
    mass = np.abs(field).reshape(P, M, P, M).sum(axis=(1, 3)).ravel()
    np.testing.assert_allclose(meta["partition_disturbance_l1"], mass, rtol=1e-12)
    order = by_disturbance_magnitude(meta)
    assert order.sigma[0] == 2 * P + 2 == int(np.argmax(mass))


def test_schedule_validation():
    with pytest.raises(InvalidSchedule):
        OrderingSchedule((0, 1), ((0,), (2,)))
    with pytest.raises(InvalidSchedule):
        OrderingSchedule((0, 0), ((0,), (0,)))
    with pytest.raises(InvalidSchedule):
        OrderingSchedule((), ())


def test_validate_against_lifted(rng):
    qp, part, po = chain_instance(rng, 24, 4)
    lifted = lift_explicit(qp, part, po)
    validate_schedule(red_black(lifted), lifted)
    with pytest.raises(InvalidSchedule):
        validate_schedule(OrderingSchedule((0, 1, 2, 3), ((0, 1), (2, 3))), lifted)
    with pytest.raises(InvalidSchedule):
        validate_schedule(lexicographic(3), lifted)
    with pytest.raises(InvalidSchedule):
        validate_schedule(lexicographic(5), lifted)
    with pytest.raises(InvalidSchedule):
        run_gs(lifted, CoordinationState.zeros(lifted), OrderingSchedule((0, 1, 2, 3), ((0, 1), (2, 3))))


def test_json_round_trip():
    for sched in (red_black(K=6), spiral(3), forward_backward(3), reverse_lexicographic(4)):
        doc = json.loads(sched.to_json())
        assert set(doc) == {"sigma", "groups"}
        back = OrderingSchedule.from_dict(doc)
        assert back.sigma == sched.sigma and back.groups == sched.groups
    assert OrderingSchedule.from_dict({"sigma": [2, 0, 1]}).groups == ((2,), (0,), (1,))


def test_make_ordering(rng):
    qp, part, po = chain_instance(rng, 24, 4)
    lifted = lift_explicit(qp, part, po)
    assert make_ordering("reverse_lexicographic", lifted).sigma == (3, 2, 1, 0)
    with pytest.raises(MissingMetadata):
        make_ordering("spiral", lifted)
    with pytest.raises(MissingMetadata):
        make_ordering("disturbance", lifted)
    with pytest.raises(KeyError):
        make_ordering("zigzag", lifted)
