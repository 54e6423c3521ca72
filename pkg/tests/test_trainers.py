import dataclasses
import warnings

import numpy as np
import pytest

from mberil.approx import NumericError, TabularMap
from mberil.losses import d_model, d_policy
from mberil.mdp import (BufferRole, RegularizationConfig, TransitionBuffer, gridworld,
                        point_mass, rollout_batch)
from mberil.trainers import (HAS_MODEL, PHASES, Schedule, TrainingDiverged, Variant,
                             check_sizes, collect_real, collect_sim, expert_world,
                             load_checkpoint, make_expert, new_state, optimizer_step,
                             run_phase, save_checkpoint, schedule_from_dict, schedule_to_dict,
                             train)

CFG = RegularizationConfig()
# tiny schedules deliberately violate the size ordering
pytestmark = pytest.mark.filterwarnings("ignore:expected N_sim")


@pytest.fixture(scope="module")
def grid():
    res, world = expert_world(gridworld(3, slip=0.2), CFG)
    expert = make_expert(world, CFG, 10, 20, np.random.default_rng(0), solution=res)
    return res, world, expert


def small_schedule(**kw):
    base = dict(iterations=2, n_real=20, n_sim=60, horizon=10, disc_steps=3, pe_steps=4,
                improve_steps=2, model_steps=2, bc_steps=5, batch_size=16,
                lr_critic=0.01, lr_policy=0.01, lr_model=0.01)
    base.update(kw)
    return Schedule(**base)


# -- optimizer -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    m = {}
    for _ in range(5):
        optimizer_step(p, {"w": np.zeros(2)}, m, 0.1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = {"w": np.zeros(3)}
    m = {}
    g = np.array([2.5, -0.01, 40.0])
    for _ in range(200):
        before = p["w"].copy()
        optimizer_step(p, {"w": g}, m, 1e-3)
    assert np.allclose(p["w"] - before, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_zero_lr_and_nonfinite():
    p = {"w": np.ones(2)}
    optimizer_step(p, {"w": np.ones(2)}, {}, 0.0)
    assert p["w"].tolist() == [1.0, 1.0]
    with pytest.raises(NumericError):
        optimizer_step(p, {"w": np.array([np.inf, 0.0])}, {}, 0.1)


# -- collection ------------------------------------------------------------------------

def test_collect_real_counter_and_determinism(grid):
    _, world, expert = grid
    sched = small_schedule()
    a, b = new_state(world, expert, sched, 3), new_state(world, expert, sched, 3)
    for s in (a, b):
        collect_real(s, world, 100, 10)
        collect_real(s, world, 7, 10)
    assert a.real_interactions == 107 and len(a.real) == 107
    ba, bb = a.real.as_batch(), b.real.as_batch()
    assert np.array_equal(ba.x, bb.x) and np.array_equal(ba.u, bb.u)
    assert np.array_equal(ba.x_next, bb.x_next)


def test_collect_real_rejects_zero(grid):
    _, world, expert = grid
    with pytest.raises(ValueError):
        collect_real(new_state(world, expert, small_schedule(), 0), world, 0)


def test_collect_sim_leaves_counter(grid):
    _, world, expert = grid
    s = new_state(world, expert, small_schedule(), 0)
    collect_sim(s, world, 123, 10)
    assert s.real_interactions == 0 and len(s.sim) == 123 and len(s.real) == 0


@pytest.mark.filterwarnings("default")
def test_size_ordering_warning():
    with pytest.warns(UserWarning):
        check_sizes(1500, 100, 10_000)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_sizes(1500, 3000, 10_000)


# -- schedules ----------------------------------------------------------------------

def test_variant_enumeration_is_exhaustive():
    assert {v.value for v in Variant} == {"MB-ERIL", "ERMBC", "MB-ERIL-noPE", "Dyna-MF-ERIL",
                                          "MF-ERIL", "BC"}
    assert set(PHASES) == set(Variant)


def test_mb_eril_schedule_trace(grid):
    _, world, expert = grid
    sched = small_schedule()
    state, reports = train("MB-ERIL", world, expert, CFG, sched, 0)
    want = []
    for it in range(2):
        want += [(it, "collect_real", 20), (it, "collect_sim", 60), (it, "disc", 3),
                 (it, "collect_sim", 60), (it, "pe", 4), (it, "improve", 2)]
    assert state.trace == want
    assert [r.real_interactions for r in reports] == [20, 40]
    assert [r.iteration for r in reports] == [1, 2]


def test_no_pe_variant_runs_no_policy_evaluation(grid):
    _, world, expert = grid
    state, _ = train("MB-ERIL-noPE", world, expert, CFG, small_schedule(), 0)
    assert not any(p.startswith("pe") for _, p, _ in state.trace)
    assert sum(1 for _, p, _ in state.trace if p == "collect_sim") == 2


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_trains(grid, variant):
    _, world, expert = grid
    state, reports = train(variant, world, expert, CFG, small_schedule(), 1)
    assert len(reports) == 2
    if variant is Variant.BC:
        assert state.real_interactions == 0
    else:
        assert state.real_interactions == 40
    if variant not in HAS_MODEL:
        assert not any(p in ("improve", "model_mle") for _, p, _ in state.trace)


def test_mf_variant_never_touches_model_or_sim(grid):
    _, world, expert = grid
    state, _ = train("MF-ERIL", world, expert, CFG, small_schedule(), 2)
    fresh = new_state(world, expert, small_schedule(), 2)
    assert np.array_equal(state.model.params["logits"], fresh.model.params["logits"])
    assert len(state.sim) == 0


def test_frozen_maps_during_discriminator_phase(grid):
    _, world, expert = grid
    sched = small_schedule(disc_steps=20)
    state = new_state(world, expert, sched, 4)
    collect_real(state, world, 50, 10)
    collect_sim(state, world, 80, 10)
    state.model.params["logits"] += np.random.default_rng(0).normal(size=state.model.params[
        "logits"].shape)
    q0 = state.model.params["logits"].copy()
    b0 = state.policy.params["logits"].copy()
    r0 = state.vf.reward.params["table"].copy()
    run_phase("disc", state, world, CFG, sched, Variant.MB_ERIL)
    assert np.array_equal(q0, state.model.params["logits"])
    assert np.array_equal(b0, state.policy.params["logits"])
    assert not np.array_equal(r0, state.vf.reward.params["table"])


def test_discriminators_balanced_when_learner_matches_expert(grid):
    res, world, expert = grid
    sched = small_schedule(disc_steps=400, batch_size=256)
    state = new_state(world, expert, sched, 5)
    state.model = TabularMap(np.log(np.maximum(world.transition, 1e-300)))
    state.policy = TabularMap(np.log(res.expert_policy.table()))
    collect_real(state, world, 200, 20)
    collect_sim(state, world, 2000, 20)
    run_phase("disc", state, world, CFG, sched, Variant.MB_ERIL)
    real = state.real.as_batch()
    sim = state.sim.as_batch()
    ex = expert.as_batch()
    dm_real = d_model(state.vf, state.model, real, CFG).mean()
    dm_sim = d_model(state.vf, state.model, sim, CFG).mean()
    dp_ex = d_policy(state.vf, state.policy, ex.x, ex.u, CFG).mean()
    dp_sim = d_policy(state.vf, state.policy, sim.x, sim.u, CFG).mean()
    for d in (dm_real, dm_sim, dp_ex, dp_sim):
        assert abs(d - 0.5) < 0.05


def test_bc_matches_deterministic_expert(grid):
    _, world, _ = grid
    rng = np.random.default_rng(6)
    acts = rng.integers(0, world.n_actions, world.n_states)
    det = TabularMap.from_probs(np.eye(world.n_actions)[acts])
    buf = TransitionBuffer(BufferRole.EXPERT)
    buf.push_batch(rollout_batch(world, det, 20, 20, rng))
    sched = small_schedule(iterations=1, bc_steps=300, lr_policy=0.05)
    state, _ = train("BC", world, buf, CFG, sched, 0)
    b = buf.as_batch()
    pred = np.argmax(state.policy.table()[b.x], axis=1)
    assert np.mean(pred == b.u) == 1.0


def test_seeded_reports_identical(grid):
    _, world, expert = grid
    runs = [train("MB-ERIL", world, expert, CFG, small_schedule(), 9)[1] for _ in range(2)]
    assert [r.losses.as_dict() for r in runs[0]] == [r.losses.as_dict() for r in runs[1]]


def test_checkpoint_resume_matches_uninterrupted(grid, tmp_path):
    _, world, expert = grid
    full_state, full = train("MB-ERIL", world, expert, CFG, small_schedule(iterations=4), 11)
    half_sched = small_schedule(iterations=2)
    s, first = train("MB-ERIL", world, expert, CFG, half_sched, 11)
    save_checkpoint(s, tmp_path / "ck.npz")
    restored = load_checkpoint(tmp_path / "ck.npz", world, small_schedule(iterations=4))
    _, rest = train("MB-ERIL", world, expert, CFG, small_schedule(iterations=4), 11,
                    state=restored)
    assert [r.losses.as_dict() for r in first + rest] == [r.losses.as_dict() for r in full]
    assert np.array_equal(restored.policy.params["logits"], full_state.policy.params["logits"])
    assert restored.trace == full_state.trace


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard(grid):
    _, world, expert = grid
    sched = small_schedule()
    state = new_state(world, expert, sched, 0)
    state.vf.reward.params["table"][:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train("MB-ERIL", world, expert, CFG, sched, 0, state=state)
    assert "MB-ERIL" in str(info.value) and info.value.reports == []


def test_empty_expert_rejected(grid):
    _, world, _ = grid
    with pytest.raises(ValueError):
        train("MB-ERIL", world, TransitionBuffer(BufferRole.EXPERT), CFG, small_schedule(), 0)


def test_evaluate_callback_and_eval_accounting(grid):
    _, world, expert = grid

    def evaluate(state):
        state.eval_interactions += 5
        return {"eval_return": 1.0}

    state, reports = train("MF-ERIL", world, expert, CFG, small_schedule(), 0, evaluate)
    assert [r.eval_return for r in reports] == [1.0, 1.0]
    assert state.total_interactions == 2 * 20 + 2 * 5


# -- expert --------------------------------------------------------------------------

def test_expert_dataset_shape():
    res, world = expert_world(gridworld(5), CFG)
    buf = make_expert(world, CFG, 30, 50, np.random.default_rng(0), solution=res)
    assert len(buf) == 1500 and buf.role is BufferRole.EXPERT


def test_expert_action_frequencies_within_three_sigma():
    res, world = expert_world(gridworld(5), CFG)
    buf = make_expert(world, CFG, 30, 50, np.random.default_rng(1), solution=res)
    b = buf.as_batch()
    pi = res.expert_policy.table()
    counts = np.zeros_like(pi)
    np.add.at(counts, (b.x, b.u), 1.0)
    n = counts.sum(1, keepdims=True)
    sd = np.sqrt(n * pi * (1 - pi))
    assert np.all(np.abs(counts - n * pi) <= 3 * sd + 1e-12)


def test_expert_world_moves_by_induced_model():
    res, world = expert_world(gridworld(3), CFG)
    assert np.allclose(world.transition, res.expert_model.table())


# -- config plumbing -------------------------------------------------------------------

def test_schedule_dict_roundtrip_and_validation():
    s = small_schedule(hidden=(8, 4))
    assert schedule_from_dict(schedule_to_dict(s)) == s
    with pytest.raises(ValueError):
        schedule_from_dict({"iterations": 2, "bogus": 1})
    with pytest.raises(ValueError):
        Schedule(model_init="zeros")
    with pytest.raises(ValueError):
        Schedule(n_real=0)


def test_continuous_learner_runs_one_iteration():
    env = point_mass()
    rng = np.random.default_rng(0)
    from mberil.evaluation import ScriptedGaussianPolicy
    buf = TransitionBuffer(BufferRole.EXPERT)
    buf.push_batch(rollout_batch(env, ScriptedGaussianPolicy(np.array([1.0, 1.0])), 10, 5, rng))
    sched = small_schedule(iterations=1, hidden=(8,))
    state, reports = train("MB-ERIL", env, buf, CFG, sched, 0)
    assert len(reports) == 1 and np.isfinite(reports[0].losses.total_disc)
    assert dataclasses.is_dataclass(reports[0])
