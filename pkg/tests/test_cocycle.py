import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lyapgap import cocycle
from lyapgap.cocycle import (
    GapTrajectory,
    PerturbationModel,
    ProductAccumulator,
    SequenceSource,
)
from lyapgap.errors import PreconditionError

from .oracles import mp_product_log_singular_values


@st.composite
def factor_list(draw, max_len=30):
    d = draw(st.integers(2, 5))
    L = draw(st.integers(1, max_len))
    el = st.floats(-1, 1, width=64)
    mats = draw(hnp.arrays(np.float64, (L, d, d), elements=el))
    return mats + 0.3 * np.eye(d)  # keeps most factors away from exact singularity


@settings(max_examples=40)
@given(factor_list())
def test_accumulator_matches_extended_precision(mats):
    acc = ProductAccumulator(mats.shape[1])
    acc.advance_many(mats)
    got = acc.log_singular_values()
    ref = mp_product_log_singular_values(mats)
    finite = np.isfinite(ref) & (ref > ref[0] - 30)
    # relative accuracy of each singular value, on the log scale
    assert np.all(np.abs(got[finite] - ref[finite]) < 1e-9 * len(mats) + 1e-9)


@given(factor_list(max_len=10), st.integers(1, 5))
def test_accumulator_batched_equals_single(mats, trials):
    d = mats.shape[1]
    batched = ProductAccumulator(d, trials=trials)
    batched.advance_many(np.broadcast_to(mats[:, None], (len(mats), trials, d, d)))
    single = ProductAccumulator(d).advance_many(mats)
    for t in range(trials):
        assert np.allclose(batched.log_singular_values()[t], single.log_singular_values(), atol=1e-12)


def test_accumulator_long_diagonal_product():
    acc = ProductAccumulator(3)
    for _ in range(5000):
        acc.advance(np.diag([0.9, 0.5, 0.01]))
    expected = 5000 * np.log([0.9, 0.5, 0.01])
    assert np.allclose(acc.log_singular_values(), expected, rtol=1e-12)


def test_accumulator_track_right_reconstructs():
    rng = np.random.default_rng(1)
    mats = rng.uniform(-1, 1, size=(12, 3, 3))
    acc = ProductAccumulator(3, track_right=True).advance_many(mats)
    U, logs, V = acc.svd_factors()
    P = np.eye(3)
    for M in mats:
        P = M @ P
    assert np.allclose(U @ np.diag(np.exp(logs)) @ V.T, P, rtol=1e-10, atol=1e-14 * np.abs(P).max())


def test_accumulator_reset_and_copy():
    acc = ProductAccumulator(2, trials=3)
    acc.advance(np.broadcast_to(np.diag([2.0, 0.5]), (3, 2, 2)))
    snap = acc.copy()
    acc.reset(np.array([True, False, True]))
    logs = acc.log_singular_values()
    assert np.allclose(logs[0], 0.0) and np.allclose(logs[1], np.log([2.0, 0.5]))
    assert np.allclose(snap.log_singular_values()[0], np.log([2.0, 0.5]))


def test_accumulator_singular_factor_gives_minus_inf():
    acc = ProductAccumulator(2).advance(np.diag([1.0, 0.0]))
    logs = acc.log_singular_values()
    assert logs[0] == 0.0 and logs[1] == -np.inf


def test_accumulator_validation():
    with pytest.raises(PreconditionError):
        ProductAccumulator(1)
    with pytest.raises(PreconditionError):
        ProductAccumulator(9)
    with pytest.raises(ValueError):
        ProductAccumulator(2).advance(np.eye(3))
    with pytest.raises(ValueError):
        ProductAccumulator(2).svd_factors()


def test_perturbation_model_validation():
    with pytest.raises(PreconditionError):
        PerturbationModel(1.0)
    with pytest.raises(PreconditionError):
        PerturbationModel(0.1, law="gauss")
    with pytest.raises(PreconditionError):
        PerturbationModel(0.1, seed=-1)


@given(st.floats(0.0, 0.99), st.integers(1, 10 ** 6), st.integers(2, 8))
def test_perturbation_bounds_and_reproducible(eps, n, d):
    m = PerturbationModel(eps, seed=5, stream_id=2)
    X = cocycle.sample_perturbation(m, n, d)
    assert np.abs(X).max() <= eps
    assert np.array_equal(X, cocycle.perturbation_block(m, d, n, 1)[0])


def test_sequence_source_explicit():
    seq = SequenceSource.explicit([np.eye(2), 2 * np.eye(2)])
    assert not seq.norm_bounded
    assert np.array_equal(seq.matrix(3), np.eye(2))
    assert np.array_equal(seq.block(2, 2)[1], np.eye(2))
    with pytest.raises(ValueError):
        seq.block(0, 1)


def test_gaps_from_logs():
    g = cocycle.gaps_from_logs(np.array([0.0, -2.0, -6.0]), 2)
    assert np.allclose(g, [1.0, 2.0])


def test_unperturbed_diagonal_trajectory_exact():
    seq = SequenceSource.explicit(np.diag([1.0, 0.5, 0.25]))
    traj = cocycle.gap_trajectory(seq, PerturbationModel(0.0), 200, sample_schedule=50)
    assert np.allclose(traj.gaps, np.log(2.0), rtol=1e-13)
    assert traj.sample_steps.tolist() == [50, 100, 150, 200]


def test_trajectory_round_trips():
    seq = SequenceSource.explicit(np.eye(3))
    traj = cocycle.gap_trajectory(seq, PerturbationModel(0.3, seed=2), 300, sample_schedule="geometric")
    for back in (GapTrajectory.from_csv(traj.to_csv()), GapTrajectory.from_json(traj.to_json())):
        assert np.array_equal(back.sample_steps, traj.sample_steps)
        assert np.array_equal(back.gaps, traj.gaps)


def test_trajectory_reproducible():
    seq = SequenceSource.explicit(np.eye(2))
    m = PerturbationModel(0.2, seed=9, stream_id=4)
    a = cocycle.gap_trajectory(seq, m, 500)
    b = cocycle.gap_trajectory(seq, m, 500)
    assert np.array_equal(a.gaps, b.gaps)


def test_schedules():
    assert cocycle.default_schedule(10, samples=3).tolist() == [3, 6, 9, 10]
    assert cocycle._schedule(10, 4).tolist() == [4, 8, 10]
    assert cocycle._schedule(100, "geometric")[-1] == 100
    with pytest.raises(ValueError):
        cocycle._schedule(10, [3, 2])


def test_liminf_proxy_takes_smallest_segment_mean():
    gaps = np.concatenate([np.full(50, 9.0), np.full(25, 1.0), np.full(25, 2.0)])
    assert cocycle.liminf_proxy(gaps, window=0.5, segments=2)[0] == 1.0


@settings(max_examples=10)
@given(st.integers(1, 40), st.integers(0, 2 ** 32))
def test_prefix_invariance_bound(m, seed):
    seq = SequenceSource.explicit(np.diag([1.0, 0.7, 0.3]))
    res = cocycle.prefix_invariance_check(seq, PerturbationModel(0.2, seed=seed), m, 400)
    assert np.all(res.difference <= res.bound + 1e-12)
    assert res.m == m
