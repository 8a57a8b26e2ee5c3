import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmpo.core import (
    DiffusionSchedule,
    ObjectiveSpec,
    RngStream,
    RolloutBatch,
    Trajectory,
    categorical_draw,
    make_linear_schedule,
)
from vmpo.smc import PotentialSpec


class FixedUniform:
    """Stand-in generator that always returns the same uniform draw."""

    def __init__(self, value):
        self.value = value

    def uniform(self, size=None):
        return np.full(size, self.value)


def _traj(T=2, cond=None, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.integers(0, 3, T + 1), rng.normal(size=T), rng.normal(size=T),
                      rng.normal(size=T), rng.normal(size=T + 1), cond)


# Schedules ----------------------------------------------------------------

def test_linear_schedule_single_step():
    sched = make_linear_schedule(1, 0.5)
    assert sched.alphas.tolist() == [1.0, 0.5]
    assert sched.sigmas[1] == pytest.approx(np.sqrt(0.75), abs=1e-15)
    assert sched.steps == 1


def test_linear_schedule_endpoints():
    sched = make_linear_schedule(10, 0.1)
    assert sched.alphas[0] == 1.0 and sched.sigmas[0] == 0.0
    assert sched.alphas[10] == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.floats(0.01, 0.99))
def test_schedule_variance_preserving_and_decreasing(T, alpha_min):
    sched = make_linear_schedule(T, alpha_min)
    assert np.max(np.abs(sched.alphas**2 + sched.sigmas**2 - 1.0)) < 1e-12
    assert np.all(np.diff(sched.alphas) < 0)


@pytest.mark.parametrize("T,alpha_min", [(0, 0.5), (3, 0.0), (3, 1.0), (3, -0.2)])
def test_linear_schedule_rejects_bad_arguments(T, alpha_min):
    with pytest.raises(ValueError):
        make_linear_schedule(T, alpha_min)


def test_schedule_rejects_non_monotone_alphas():
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([1.0, 0.6, 0.8]), np.sqrt(1 - np.array([1.0, 0.6, 0.8]) ** 2))


# Random streams -------------------------------------------------------------

def test_rng_stream_reproducible_and_independent():
    a = RngStream(3, 1).uniform(5)
    assert np.array_equal(a, RngStream(3, 1).uniform(5))
    assert not np.array_equal(a, RngStream(3, 2).uniform(5))
    assert not np.array_equal(a, RngStream(4, 1).uniform(5))


def test_rng_stream_rejects_negative_seed():
    with pytest.raises(ValueError):
        RngStream(-1)


# Categorical draws ----------------------------------------------------------

def test_categorical_degenerate_row_always_selected():
    rng = RngStream(0)
    assert all(categorical_draw([0.0, 0.0, 1.0], rng) == 2 for _ in range(200))


def test_categorical_frequencies_match_probabilities():
    probs = np.array([0.2, 0.5, 0.3])
    idx = categorical_draw(np.broadcast_to(probs, (100_000, 3)), RngStream(1))
    freq = np.bincount(idx, minlength=3) / len(idx)
    # binomial standard error is about 1.6e-3; allow four of them
    assert np.max(np.abs(freq - probs)) < 0.0065


def test_categorical_tie_goes_to_lower_index():
    assert categorical_draw([0.5, 0.5], FixedUniform(0.5)) == 0


def test_categorical_never_returns_zero_mass_entry():
    # u = 1 must land on the last supported index, not on the trailing zero
    assert categorical_draw([0.3, 0.7, 0.0], FixedUniform(0.0)) == 1
    assert categorical_draw([0.0, 1.0], FixedUniform(1.0 - 1e-12)) == 1


@pytest.mark.parametrize("probs", [[0.5, -0.1, 0.6], [0.5, 0.4], [0.5, 0.5 + 1e-6]])
def test_categorical_rejects_invalid_rows(probs):
    with pytest.raises(ValueError):
        categorical_draw(probs, RngStream(0))


# Trajectories and batches ---------------------------------------------------

def test_trajectory_shapes_validated():
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3, int), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3, int), np.zeros(2), np.zeros(1), np.zeros(2), np.zeros(3))


def test_trajectory_is_read_only():
    tr = _traj()
    with pytest.raises(ValueError):
        tr.rewards[0] = 1.0


def test_batch_round_trips_trajectories():
    trajs = [_traj(seed=s) for s in range(4)]
    batch = RolloutBatch.from_trajectories(trajs)
    assert batch.group_size == 4 and batch.steps == 2
    for a, b in zip(trajs, batch.trajectories):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.rewards, b.rewards)
    assert np.array_equal(batch.terminal_rewards, [t.terminal_reward for t in trajs])


def test_batch_rejects_single_trajectory():
    with pytest.raises(ValueError):
        RolloutBatch.from_trajectories([_traj()])
    with pytest.raises(ValueError):
        RolloutBatch(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 3)))


def test_batch_rejects_mixed_lengths_and_conditions():
    with pytest.raises(ValueError):
        RolloutBatch.from_trajectories([_traj(T=2), _traj(T=3)])
    with pytest.raises(ValueError):
        RolloutBatch.from_trajectories([_traj(cond=0), _traj(cond=1)])


def test_batch_stack_adds_group_axis():
    b1 = RolloutBatch.from_trajectories([_traj(seed=s) for s in range(3)])
    b2 = RolloutBatch.from_trajectories([_traj(seed=s + 5) for s in range(3)])
    stacked = RolloutBatch.stack([b1, b2])
    assert stacked.stacked and np.shape(stacked.logp_policy) == (2, 3, 2)
    assert stacked.group_size == 3
    with pytest.raises(ValueError):
        stacked.trajectories


# Objective specs -------------------------------------------------------------

def test_objective_spec_defaults_to_return_to_go():
    spec = ObjectiveSpec("vmpo_mc", 0.5)
    assert spec.potential.kind == "return_to_go" and spec.potential.beta == 0.5


@pytest.mark.parametrize("kwargs", [
    dict(kind="ppo", beta=1.0),
    dict(kind="vmpo_mc", beta=0.0),
    dict(kind="vmpo_mc", beta=1.0, clip_eps=1.0),
    dict(kind="vmpo_mc", beta=1.0, kl_old_coeff=-0.1),
    dict(kind="vmpo_mc", beta=1.0, potential=PotentialSpec("difference", 2.0)),
])
def test_objective_spec_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ObjectiveSpec(**kwargs)
