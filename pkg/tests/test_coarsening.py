import json

import numpy as np
import pytest
import scipy.sparse as sp

from mgcoord.cases import SpatialCaseSpec, TemporalCaseSpec, build_spatial, build_temporal
from mgcoord.coarsening import (
    CoarseningSchedule,
    GridTransfer,
    build_transfer_spatial,
    build_transfer_temporal,
    case_transfer,
    coarse_correction,
    coarse_lifted,
    coarsen_problem,
    prolong,
    restrict,
    run_multigrid,
    run_warm_gs,
    warm_start,
)
from mgcoord.coordination import CoordinationState, oracle_state, run_gs
from mgcoord.errors import (
    DimensionMismatch,
    InfeasibleCoarse,
    MissingMetadata,
    NonDivisor,
    RankDeficient,
)
from mgcoord.lifting import lift_explicit
from mgcoord.ordering import lexicographic, red_black
from mgcoord.qp_core import CoupledQP, KKTSolution, solve_centralized

from conftest import chain_instance


def temporal(K=10, M=100):
    qp, part, meta = build_temporal(TemporalCaseSpec(K=K, M=M))
    return qp, part, meta, lift_explicit(qp, part, meta["pi_owner"])


def spatial(P=3, M=4):
    qp, part, meta = build_spatial(SpatialCaseSpec(P=P, M=M))
    return qp, part, meta, lift_explicit(qp, part, meta["pi_owner"])


def test_temporal_transfer_shapes():
    t = build_transfer_temporal(6, 6)
    assert np.array_equal(t.T.toarray(), np.eye(6)) and np.array_equal(t.U.toarray(), np.eye(6))
    t = build_transfer_temporal(4, 2)
    np.testing.assert_array_equal(t.T.toarray(), [[1, 0], [1, 0], [0, 1], [0, 1]])
    # phi(i) = floor((i - 1) / (M / M_c)) + 1 on 1-based indices
    t = build_transfer_temporal(100, 4)
    T = t.T.toarray()
    for i in range(1, 101):
        assert T[i - 1, (i - 1) // 25] == 1 and T[i - 1].sum() == 1
    with pytest.raises(NonDivisor):
        build_transfer_temporal(100, 3)
    with pytest.raises(NonDivisor):
        build_transfer_temporal(4, 0)


def test_spatial_transfer_shapes():
    t = build_transfer_spatial(3, 3)
    assert np.array_equal(t.T.toarray(), np.eye(9))
    T = build_transfer_spatial(4, 2).T.toarray()
    assert T.shape == (16, 4)
    for i in range(4):
        for j in range(4):
            row = np.zeros(4)
            row[(i // 2) * 2 + j // 2] = 1
            np.testing.assert_array_equal(T[i * 4 + j], row)
    with pytest.raises(NonDivisor):
        build_transfer_spatial(10, 3)


def test_transfer_rank_checked():
    with pytest.raises(RankDeficient):
        GridTransfer(np.array([[1.0, 1.0], [1.0, 1.0]]), np.eye(1))
    with pytest.raises(RankDeficient):
        GridTransfer(np.eye(2), np.zeros((2, 1)))


@pytest.mark.parametrize("M_c", [1, 4, 25, 100])
def test_gram_diagonal_and_projection(M_c, rng):
    qp, part, meta, _ = temporal()
    t = case_transfer(meta, M_c)
    G = (t.T.T @ t.T).toarray()
    assert np.array_equal(G, np.diag(np.diag(G)))
    # every fine row copies exactly one coarse value
    assert np.array_equal(np.asarray(t.T.sum(axis=1)).ravel(), np.ones(t.T.shape[0]))
    sizes = np.asarray(t.T.sum(axis=0)).ravel()
    np.testing.assert_array_equal(np.diag(G), sizes)
    assert set(sizes) <= {1.0, 100.0 / M_c}
    zc = rng.standard_normal(t.T.shape[1])
    np.testing.assert_allclose(restrict(t, t.T @ zc), zc, atol=1e-12)
    np.testing.assert_allclose(t.restrict(t.T @ zc), zc, atol=1e-12)


def test_spatial_projection(rng):
    qp, part, meta, _ = spatial(P=3, M=4)
    t = case_transfer(meta, 2)
    G = (t.T.T @ t.T).toarray()
    assert np.array_equal(G, np.diag(np.diag(G)))
    zc = rng.standard_normal(t.T.shape[1])
    np.testing.assert_allclose(restrict(t, t.T @ zc), zc, atol=1e-12)


def test_identity_transfer_keeps_problem(rng):
    qp, part, po = chain_instance(rng, 20, 3)
    t = GridTransfer(sp.identity(qp.n), sp.identity(qp.m + qp.p), n_fine_a=qp.m, n_coarse_a=qp.m)
    c = coarsen_problem(qp, t)
    for name in ("Q", "A", "B", "Pi"):
        a, b = getattr(c, name), getattr(qp, name)
        a = a.toarray() if sp.issparse(a) else np.asarray(a)
        np.testing.assert_array_equal(a, np.asarray(b))
    np.testing.assert_array_equal(c.c, qp.c)
    np.testing.assert_array_equal(c.d, qp.d)


def test_temporal_coarse_dimensions():
    qp, part, meta, _ = temporal()
    c = coarsen_problem(qp, case_transfer(meta, 4))
    assert c.m == 40 and c.p == 9
    assert c.n == 10 * 2 * 4 + 9


def test_temporal_coarse_dynamics_coefficients():
    qp, part, meta, _ = temporal(K=2, M=100)
    for M_c in (4, 20):
        r = 100 // M_c
        c = coarsen_problem(qp, case_transfer(meta, M_c))
        A = c.A.toarray()
        for i, row in enumerate(A):
            vals = sorted(np.round(row[row != 0], 12))
            # x(0) = 0 is fixed, so the very first cell has no predecessor
            expected = [round(-r * 0.1, 12)] + ([] if i == 0 else [-1.0]) + [1.0]
            assert vals == sorted(expected)
        # aggregated data: -(M/M_c) delta times the cell average of d
        d = np.asarray(qp.d)
        Bd = c.B @ d
        for k in range(2):
            for j in range(M_c):
                cell = d[k * 100 + j * r:k * 100 + (j + 1) * r]
                assert Bd[k * M_c + j] == pytest.approx(-r * 0.1 * (M_c / 100) * cell.sum(), abs=1e-12)


def test_infeasible_coarse():
    # collapsing both variables of x1 - x2 = d leaves 0 = d
    qp = CoupledQP(Q=np.eye(2), c=np.zeros(2), A=[[1.0, -1.0]], B=[[1.0]], d=[1.0])
    t = GridTransfer(np.ones((2, 1)), np.eye(1))
    with pytest.raises(InfeasibleCoarse):
        coarsen_problem(qp, t)


def test_transfer_dimension_checked(rng):
    qp, part, po = chain_instance(rng, 20, 3)
    with pytest.raises(DimensionMismatch):
        coarsen_problem(qp, build_transfer_temporal(4, 2))


def test_prolong_trivial(rng):
    t = build_transfer_temporal(6, 3)
    z, nu, lam = prolong(t, KKTSolution(np.zeros(3), np.zeros(3), 0.0))
    assert not z.any() and not nu.any() and lam.size == 0
    t = build_transfer_temporal(5, 5)
    zc, yc = rng.standard_normal(5), rng.standard_normal(5)
    z, nu, lam = prolong(t, (zc, yc))
    np.testing.assert_array_equal(z, zc)
    np.testing.assert_array_equal(nu, yc)
    with pytest.raises(DimensionMismatch):
        prolong(t, (np.zeros(4), np.zeros(5)))


def test_coarse_correction_from_zero_is_warm_start():
    qp, part, meta, lifted = temporal(K=4, M=20)
    t = case_transfer(meta, 4)
    a = warm_start(qp, lifted, t).vector()
    b = coarse_correction(qp, lifted, CoordinationState.zeros(lifted), t).vector()
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_coarse_problem_by_coordination():
    qp, part, meta, _ = temporal(K=4, M=20)
    t = case_transfer(meta, 5)
    cl = coarse_lifted(qp, t)
    res = run_gs(cl, CoordinationState.zeros(cl), lexicographic(4), tol=1e-12, max_steps=3000)
    assert res.converged
    ref = solve_centralized(coarsen_problem(qp, t)).primal
    np.testing.assert_allclose(cl.gather_primal(res.state.z), ref, atol=1e-7)


def test_warm_start_dominance_temporal():
    qp, part, meta, lifted = temporal()
    star = oracle_state(lifted)
    cold = run_gs(lifted, CoordinationState.zeros(lifted), lexicographic(10), max_steps=1, oracle=star)
    warm = run_warm_gs(qp, lifted, case_transfer(meta, 4), lexicographic(10), max_steps=1, oracle=star)
    assert warm.trace[0].error_w < cold.trace[0].error_w


def test_warm_start_dominance_spatial():
    qp, part, meta, lifted = spatial(P=3, M=4)
    star = oracle_state(lifted)
    order = red_black(lifted)
    cold = run_gs(lifted, CoordinationState.zeros(lifted), order, max_steps=1, oracle=star)
    warm = run_warm_gs(qp, lifted, case_transfer(meta, 2), order, max_steps=1, oracle=star)
    assert warm.trace[0].error_w < cold.trace[0].error_w


def test_fine_only_schedule_matches_run_gs():
    qp, part, meta, lifted = temporal(K=4, M=10)
    order = lexicographic(4)
    mg = run_multigrid(qp, part, CoarseningSchedule([10]), order, meta, lifted=lifted,
                       max_steps=15, tol=1e-14)
    gs = run_gs(lifted, CoordinationState.zeros(lifted), order, max_steps=15, tol=1e-14,
                oracle=oracle_state(lifted))
    assert np.array_equal(mg.errors(), gs.errors())
    assert np.array_equal(mg.state.vector(), gs.state.vector())


def test_sequential_schedule_step_count():
    qp, part, meta, lifted = temporal()
    sched = CoarseningSchedule([1, 2, 4, 5, 10, 20, 25, 50])
    res = run_multigrid(qp, part, sched, lexicographic(10), meta, lifted=lifted)
    assert len(res.trace) == 9
    assert res.levels_run == [1, 2, 4, 5, 10, 20, 25, 50]
    assert [r.step for r in res.trace] == list(range(9))


def test_multigrid_needs_transfers(rng):
    qp, part, po = chain_instance(rng, 20, 2)
    with pytest.raises(MissingMetadata):
        run_multigrid(qp, part, CoarseningSchedule([1]), lexicographic(2), pi_owner=po)
    with pytest.raises(MissingMetadata):
        case_transfer({}, 2)


def test_schedule_validation_and_json():
    with pytest.raises(ValueError):
        CoarseningSchedule([4, 2])
    with pytest.raises(ValueError):
        CoarseningSchedule([])
    with pytest.raises(ValueError):
        CoarseningSchedule([1, 2], sweeps_per_level=0)
    with pytest.raises(NonDivisor):
        CoarseningSchedule([1, 3]).validate(100)
    s = CoarseningSchedule([1, 2, 4], sweeps_per_level=2)
    doc = json.loads(json.dumps(s.to_dict()))
    assert doc == {"levels": [1, 2, 4], "sweeps_per_level": 2}
    assert CoarseningSchedule.from_dict(doc) == s
