import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mberil.approx import TabularMap
from mberil.mdp import (Batch, BufferRole, RegularizationConfig, TabularMdp, Transition,
                        TransitionBuffer, buffer_push, buffer_sample, discounted_visitation,
                        gridworld, load_mdp, point_mass, random_mdp, read_transitions_csv,
                        rollout, rollout_batch, sample_discounted_state, sample_union, save_mdp,
                        step, write_transitions_csv)


def chain(p01=1.0):
    p = np.array([[[1 - p01, p01]], [[0.0, 1.0]]])
    return TabularMdp(p, np.zeros(2), 0.5, np.array([1.0, 0.0]))


# -- construction ----------------------------------------------------------------

def test_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[0.5, 0.6]], [[0.0, 1.0]]]), np.zeros(2), 0.9, np.array([1.0, 0.0]))


def test_rejects_negative_entries():
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[-0.1, 1.1]], [[0.0, 1.0]]]), np.zeros(2), 0.9, np.array([1.0, 0.0]))


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.2, 1.5])
def test_rejects_discount_outside_open_interval(gamma):
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[1.0]]]), np.zeros(1), gamma, np.array([1.0]))


def test_rejects_bad_initial_dist():
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), np.zeros(2), 0.9, np.array([0.7, 0.7]))


def test_row_tolerance_is_1e9():
    p = np.array([[[0.5, 0.5 + 5e-10]], [[0.0, 1.0]]])
    TabularMdp(p, np.zeros(2), 0.9, np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[0.5, 0.5 + 5e-9]], [[0.0, 1.0]]]), np.zeros(2), 0.9,
                   np.array([1.0, 0.0]))


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_beta_is_derived(kappa, eta):
    cfg = RegularizationConfig(kappa=kappa, eta=eta)
    assert abs(cfg.beta - kappa * eta / (kappa + eta)) < 1e-12
    assert abs(cfg.beta / kappa + cfg.beta / eta - 1.0) < 1e-12


def test_config_is_immutable():
    cfg = RegularizationConfig()
    with pytest.raises(AttributeError):
        cfg.beta = 3.0
    with pytest.raises(Exception):
        cfg.kappa = 3.0


def test_config_rejects_negative_weights():
    with pytest.raises(ValueError):
        RegularizationConfig(lambda_qv=-1.0)
    with pytest.raises(ValueError):
        RegularizationConfig(kappa=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_random_mdps_are_row_stochastic(n_s, n_a, seed):
    mdp = random_mdp(n_s, n_a, np.random.default_rng(seed), branching=2)
    assert np.allclose(mdp.transition.sum(-1), 1.0, atol=1e-12)
    assert np.all(mdp.transition >= 0)


def test_gridworld_shape_and_slip():
    g = gridworld()
    assert (g.n_states, g.n_actions) == (25, 5)
    assert g.transition[0, 1, 5] == pytest.approx(0.8)  # down from (0,0)
    assert g.transition[0, 1, 0] == pytest.approx(0.2)
    assert g.transition[0, 0, 0] == pytest.approx(1.0)  # up into the wall
    assert g.reward[24] == 1.0 and g.reward.sum() == 1.0


def test_mdp_json_roundtrip(tmp_path):
    mdp = random_mdp(4, 2, np.random.default_rng(0))
    save_mdp(mdp, tmp_path / "m.json")
    back = load_mdp(tmp_path / "m.json")
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.discount == mdp.discount


# -- step ------------------------------------------------------------------------

def test_step_deterministic_row():
    assert step(chain(), 0, 0, np.random.default_rng(0)) == 1


def test_step_empirical_frequency():
    mdp = TabularMdp(np.array([[[0.3, 0.7]], [[0.5, 0.5]]]), np.zeros(2), 0.9,
                     np.array([1.0, 0.0]))
    rng = np.random.default_rng(1)
    draws = mdp.step(np.zeros(100_000, int), np.zeros(100_000, int), rng)
    assert abs(draws.mean() - 0.7) < 0.01


def test_step_scalar_frequency_matches_vectorised():
    mdp = TabularMdp(np.array([[[0.3, 0.7]], [[0.5, 0.5]]]), np.zeros(2), 0.9,
                     np.array([1.0, 0.0]))
    rng = np.random.default_rng(2)
    draws = [mdp.step(0, 0, rng) for _ in range(20_000)]
    assert abs(np.mean(draws) - 0.7) < 0.015


def test_step_out_of_range_state():
    with pytest.raises(IndexError):
        chain().step(5, 0, np.random.default_rng(0))
    with pytest.raises(IndexError):
        chain().step(0, 3, np.random.default_rng(0))


def test_continuous_action_clamping():
    env = point_mass()
    a = env.step(np.zeros(2), np.array([2.0, -3.0]), np.random.default_rng(4))
    b = env.step(np.zeros(2), np.array([1.0, -1.0]), np.random.default_rng(4))
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.integers(0, 1000))
def test_continuous_step_is_finite(vals, seed):
    env = point_mass()
    x = np.clip(np.array(vals[:2]), -2, 2)
    assert np.all(np.isfinite(env.step(x, np.array(vals[2:]), np.random.default_rng(seed))))


# -- rollouts ----------------------------------------------------------------------

def test_rollout_length_and_chaining():
    g = gridworld()
    traj = rollout(g, TabularMap.uniform(25, 5), 50, np.random.default_rng(0))
    assert traj.horizon == 50
    assert traj.is_chained()


def test_rollout_horizon_one_starts_at_initial_state():
    g = gridworld(start=(2, 3))
    traj = rollout(g, TabularMap.uniform(25, 5), 1, np.random.default_rng(0))
    assert len(traj) == 1 and traj.transitions[0].x == 13


def test_rollout_is_reproducible():
    g = gridworld()
    a = rollout_batch(g, TabularMap.uniform(25, 5), 20, 3, np.random.default_rng(9))
    b = rollout_batch(g, TabularMap.uniform(25, 5), 20, 3, np.random.default_rng(9))
    assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("x", "u", "x_next"))


def test_rollout_batch_episodes_are_chained():
    g = gridworld()
    b = rollout_batch(g, TabularMap.uniform(25, 5), 10, 4, np.random.default_rng(3))
    x = b.x.reshape(4, 10)
    nxt = b.x_next.reshape(4, 10)
    assert np.array_equal(x[:, 1:], nxt[:, :-1])
    assert np.all(x[:, 0] == 0)


def test_rollout_rejects_zero_horizon():
    with pytest.raises(ValueError):
        rollout(gridworld(), TabularMap.uniform(25, 5), 0, np.random.default_rng(0))


def test_continuous_rollout_chained():
    env = point_mass()

    class Zero:
        def sample(self, x, rng):
            return np.zeros((len(x), 2))

    traj = rollout(env, Zero(), 5, np.random.default_rng(0))
    assert traj.is_chained() and traj.horizon == 5


# -- discounted state sampling -----------------------------------------------------

def test_discounted_state_tiny_gamma_is_initial_dist():
    mdp = TabularMdp(np.full((3, 1, 3), 1 / 3), np.zeros(3), 0.9, np.array([0.2, 0.3, 0.5]))
    xs = sample_discounted_state(mdp, TabularMap.uniform(3, 1), 1e-9, np.random.default_rng(0),
                                 n=50_000)
    freq = np.bincount(xs, minlength=3) / len(xs)
    assert np.allclose(freq, [0.2, 0.3, 0.5], atol=0.01)


def test_discounted_state_two_state_chain():
    xs = sample_discounted_state(chain(), TabularMap.uniform(2, 1), 0.5,
                                 np.random.default_rng(5), n=100_000)
    sigma = np.sqrt(0.25 / 100_000)
    assert abs(np.mean(xs == 0) - 0.5) < 3 * sigma


def test_discounted_state_self_loop():
    mdp = TabularMdp(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), np.zeros(2), 0.9,
                     np.array([1.0, 0.0]))
    xs = sample_discounted_state(mdp, TabularMap.uniform(2, 1), 0.9, np.random.default_rng(0),
                                 n=1000)
    assert np.all(xs == 0)


def test_discounted_state_matches_linear_solve_on_random_mdp():
    rng = np.random.default_rng(11)
    mdp = random_mdp(4, 2, rng, gamma=0.7)
    pol = TabularMap.from_probs(rng.dirichlet(np.ones(2), size=4))
    exact = discounted_visitation(mdp, pol.table(), None)
    n = 100_000
    xs = sample_discounted_state(mdp, pol, 0.7, rng, n=n)
    freq = np.bincount(xs, minlength=4) / n
    assert np.all(np.abs(freq - exact) < 3 * np.sqrt(exact * (1 - exact) / n) + 1e-3)


def test_discounted_state_rejects_bad_gamma():
    with pytest.raises(ValueError):
        sample_discounted_state(chain(), TabularMap.uniform(2, 1), 1.0, np.random.default_rng(0))


# -- buffers -----------------------------------------------------------------------

def test_singleton_buffer_sample():
    buf = TransitionBuffer(BufferRole.EXPERT)
    buffer_push(buf, Transition(3, 1, 4))
    assert buffer_sample(buf, 1, np.random.default_rng(0)) == [Transition(3, 1, 4)]


def test_fifo_eviction():
    buf = TransitionBuffer(BufferRole.SIMULATED, capacity=2)
    for i in range(3):
        buffer_push(buf, Transition(i, 0, i))
    assert list(buf.as_batch().x) == [1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.lists(st.integers(1, 7), min_size=1, max_size=8))
def test_fifo_keeps_newest_entries(capacity, chunks):
    buf = TransitionBuffer("simulated", capacity=capacity)
    seen = []
    for n in chunks:
        vals = np.arange(len(seen), len(seen) + n)
        seen.extend(vals.tolist())
        buf.push_batch(Batch(vals, np.zeros(n, int), vals))
    assert buf.as_batch().x.tolist() == seen[-capacity:]


def test_uncapped_buffer_keeps_everything():
    buf = TransitionBuffer("real_learner")
    for k in range(5):
        vals = np.arange(k * 30, (k + 1) * 30)
        buf.push_batch(Batch(vals, vals, vals))
    assert buf.as_batch().x.tolist() == list(range(150))


def test_empty_buffer_sample_is_state_error():
    with pytest.raises(RuntimeError):
        TransitionBuffer("expert").sample(1, np.random.default_rng(0))


def test_nonfinite_transition_rejected():
    with pytest.raises(ValueError):
        Transition(np.array([np.nan]), np.zeros(1), np.zeros(1))


def test_buffer_sampling_uniform_chi_square():
    buf = TransitionBuffer("real_learner")
    buf.push_batch(Batch(np.arange(100), np.zeros(100, int), np.arange(100)))
    counts = np.bincount(buf.sample_batch(100_000, np.random.default_rng(7)).x, minlength=100)
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.all(np.abs(counts - 1000) < 120)


def test_buffer_samples_reproducible():
    buf = TransitionBuffer("real_learner")
    buf.push_batch(Batch(np.arange(10), np.zeros(10, int), np.arange(10)))
    a = buf.sample_batch(50, np.random.default_rng(1)).x
    b = buf.sample_batch(50, np.random.default_rng(1)).x
    assert np.array_equal(a, b)


def test_sample_union_weights_by_size():
    a, b = TransitionBuffer("expert"), TransitionBuffer("real_learner")
    a.push_batch(Batch(np.zeros(10, int), np.zeros(10, int), np.zeros(10, int)))
    b.push_batch(Batch(np.ones(30, int), np.zeros(30, int), np.ones(30, int)))
    x = sample_union([a, b], 40_000, np.random.default_rng(0)).x
    assert abs(np.mean(x == 0) - 0.25) < 0.01


def test_transition_csv_roundtrip(tmp_path):
    batch = Batch(np.random.default_rng(0).normal(size=(5, 2)), np.ones((5, 2)) / 3,
                  np.full((5, 2), 1e-300))
    write_transitions_csv(batch, tmp_path / "t.csv")
    back = read_transitions_csv(tmp_path / "t.csv", tabular=False)
    assert np.array_equal(back.x, batch.x) and np.array_equal(back.u, batch.u)
    assert np.array_equal(back.x_next, batch.x_next)


def test_buffer_csv_roundtrip_tabular(tmp_path):
    buf = TransitionBuffer("expert")
    buf.push_batch(Batch(np.array([0, 1]), np.array([2, 3]), np.array([4, 5])))
    buf.to_csv(tmp_path / "b.csv")
    back = TransitionBuffer.from_csv(tmp_path / "b.csv", "expert", tabular=True)
    assert back.as_batch().u.tolist() == [2, 3]
