import numpy as np
import pytest

from fluidsched.core import fluid_model as fm
from fluidsched.core.fluid_model import Allocation, BehaviorCase, SystemState
from fluidsched.core.optimizer import project_box_hyperplane
from fluidsched.core.state_analysis import (
    Criterion,
    FeasibleBox,
    allocation_cases,
    classify_state,
    criterion_witness,
    feasible_box,
    lower_bound_witness,
    predict_state,
    uniform_case,
)


def test_boundary_state_is_decomposable_and_steady(make_state):
    verdict = classify_state(make_state([(0.4, 1.0), (0.4, 1.0)]))
    assert verdict.total_a == pytest.approx(0.8)
    assert verdict.total_b == pytest.approx(2.0)
    assert verdict.decomposable
    assert not verdict.strictly_decomposable
    assert verdict.avoidable
    assert verdict.nonincreasable
    assert verdict.steady


def test_overloaded_symmetric_state_is_steady(make_state):
    verdict = classify_state(make_state([(0.6, 3.0), (0.6, 3.0)]))
    assert not verdict.decomposable
    assert verdict.avoidable
    assert verdict.sum_w_star_plus == pytest.approx(0.8)
    assert not verdict.nonincreasable
    assert verdict.steady


def test_empty_system(make_state):
    verdict = classify_state(make_state([(0.0, 0.0)]))
    assert verdict.decomposable and verdict.avoidable and verdict.nonincreasable
    assert verdict.strictly_decomposable
    assert not verdict.steady
    assert verdict.nodrop_pipes == (0,)


def test_feasible_box_examples(make_state):
    box = feasible_box(make_state([(0.6, 3.0), (0.6, 3.0)]))
    assert box.lo == pytest.approx((0.4, 0.4))
    assert box.hi == pytest.approx((0.9, 0.9))
    assert box.nonempty()

    single = feasible_box(make_state([(0.0, 1.0)]))
    assert single.lo == (0.0,)
    assert single.hi == pytest.approx((0.1,))

    crowded = feasible_box(make_state([(0.9, 4.0), (0.9, 4.0)]))
    assert crowded.lo == pytest.approx((0.8, 0.8))
    assert crowded.lo_sum == pytest.approx(1.6)
    assert not crowded.nonempty()
    assert not classify_state(make_state([(0.9, 4.0), (0.9, 4.0)])).avoidable


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        FeasibleBox(lo=(0.5,), hi=(0.4,))


def test_lower_bound_witness():
    witness = lower_bound_witness([0.2, -0.3, 0.4])
    assert witness.w == pytest.approx((0.2 + 0.4 / 3, 0.4 / 3, 0.4 + 0.4 / 3))
    assert lower_bound_witness([0.6, 0.6]) is None


def _random_states(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(1, 6))
        t_upd = float(rng.uniform(1.0, 20.0))
        m = float(rng.uniform(0.5, 10.0))
        a = rng.uniform(0.0, 0.5, size=n)
        b = rng.uniform(0.0, m, size=n)
        yield SystemState.from_arrays(a, b, t_upd, m)


def test_criteria_match_constructive_witnesses():
    for state in _random_states(1000, seed=11):
        verdict = classify_state(state)

        drop_free = criterion_witness(state, Criterion.AVOIDABILITY)
        assert verdict.avoidable == (drop_free is not None)
        if drop_free is not None:
            assert all(p.dropped == 0.0 for p in predict_state(state, drop_free))

        emptying = criterion_witness(state, Criterion.DECOMPOSABILITY)
        assert verdict.decomposable == (emptying is not None)
        if emptying is not None:
            for pipe, w in zip(state.pipes, emptying.w):
                assert fm.predicted_queue_size(pipe, w, state.t_upd, state.t_upd, state.m) <= 1e-12

        holding = criterion_witness(state, Criterion.NONINCREASE)
        assert verdict.nonincreasable == (holding is not None)
        if holding is not None:
            assert np.all(holding.vector >= state.a - 1e-12)

        assert verdict.steady == (verdict.avoidable and verdict.sum_w_prime >= 1.0)
        if verdict.decomposable:
            assert verdict.avoidable


def test_avoidability_aggregate_without_nodrop_pipes():
    checked = 0
    for state in _random_states(1000, seed=12):
        verdict = classify_state(state)
        if verdict.nodrop_pipes:
            continue
        checked += 1
        assert verdict.avoidable == (verdict.sum_w_star <= 1.0)
    assert checked > 0


def test_steady_allocations_are_uniformly_confined(random_steady_states):
    for state in random_steady_states(200, seed=13):
        box = feasible_box(state)
        assert box.nonempty()
        start = np.full(state.n, 1.0 / state.n)
        w = project_box_hyperplane(start, box.lo_vector, box.hi_vector, 1.0)
        allocation = Allocation.from_vector(w)
        assert uniform_case(state, allocation) is BehaviorCase.CONFINED


def test_allocation_cases(make_state):
    state = make_state([(0.8, 2.0), (0.5, 1.0), (0.2, 1.0)])
    allocation = Allocation(w=(0.2, 0.3, 0.5))
    assert allocation_cases(state, allocation) == [
        BehaviorCase.OVERFILLS,
        BehaviorCase.CONFINED,
        BehaviorCase.NULLIFIES,
    ]
    assert uniform_case(state, allocation) is None


def test_allocation_size_must_match(make_state):
    with pytest.raises(ValueError):
        predict_state(make_state([(0.5, 1.0)]), Allocation(w=(0.5, 0.5)))
