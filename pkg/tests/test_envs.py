"""Built-in environments: dynamics, determinism, ground truths."""

import math

import numpy as np
import pytest

from causalworld.envs import (
    CartpoleEnv,
    EpisodeFinishedError,
    SyntheticAimEnv,
    VacuumEnv,
    collect_steps,
    env_schema,
    ground_truth,
    make_env,
    uniform_random_policy,
)
from causalworld.fmdp import ReplayBuffer


def test_registry_and_unknown_name():
    for name in ("vacuum", "synthetic-aim", "cartpole"):
        assert make_env(name).schema is env_schema(name)
    with pytest.raises(KeyError):
        make_env("lunarlander")
    with pytest.raises(KeyError):
        ground_truth("lunarlander")


def test_seeded_replay_is_bit_exact():
    rng = np.random.default_rng(0)
    actions = [int(a) for a in rng.integers(0, 4, size=40)]
    trajs = []
    for _ in range(2):
        env = make_env("synthetic-aim")
        env.reset(123)
        out = []
        for a in actions:
            if env.finished:
                env.reset(77)
            out.append(env.step({"a": a}))
        trajs.append(out)
    for t1, t2 in zip(*trajs):
        assert t1 == t2


# ---------------------------------------------------------------------------
# Vacuum.

def test_vacuum_reset_distribution():
    positions = set()
    for seed in range(30):
        env = VacuumEnv()
        s = env.reset(seed)
        positions.add(s["position"])
        assert s["clean_1"] is False and s["clean_2"] is False
    assert positions == {0, 1}


def test_vacuum_suck_cleans_current_cell():
    env = VacuumEnv(seed=0)
    env.reset(0)
    env._state = {"position": 0, "clean_1": False, "clean_2": False}
    t = env.step({"a": 2})
    assert t.s_next["clean_1"] is True
    assert t.o["failure"] is False
    assert t.rewards["cleaned_1"] == 1.0


def test_vacuum_move_into_boundary_fails():
    env = VacuumEnv(seed=0)
    env.reset(0)
    env._state = {"position": 1, "clean_1": False, "clean_2": False}
    t = env.step({"a": 1})  # Right from the rightmost cell
    assert t.s_next["position"] == 1
    assert t.o["failure"] is True


def test_vacuum_clean_flags_monotone_and_position_in_range():
    env = VacuumEnv(seed=5)
    rng = np.random.default_rng(5)
    env.reset(5)
    prev = env.state
    while not env.finished:
        t = env.step({"a": int(rng.integers(0, 3))})
        assert t.s_next["position"] in (0, 1)
        assert t.s_next["clean_1"] >= prev["clean_1"]
        assert t.s_next["clean_2"] >= prev["clean_2"]
        prev = t.s_next


def test_vacuum_terminates_when_both_clean():
    env = VacuumEnv(seed=0)
    env.reset(0)
    env._state = {"position": 0, "clean_1": False, "clean_2": True}
    t = env.step({"a": 2})
    assert t.done
    with pytest.raises(EpisodeFinishedError):
        env.step({"a": 2})


# ---------------------------------------------------------------------------
# Synthetic environment.

def test_synthetic_reset_is_origin():
    env = SyntheticAimEnv()
    s = env.reset(9)
    assert s == {"x_1": 0.0, "x_2": 0.0, "x_3": 0.0, "x_4": 0.0, "tau": 0.0}


def test_synthetic_tau_update_is_exact():
    env = SyntheticAimEnv(seed=0)
    env.reset(0)
    t = env.step({"a": 1})
    assert t.s_next["tau"] == 20.0
    t = env.step({"a": 2})
    assert t.s_next["tau"] == 25.0


def test_synthetic_x4_conditional_mean():
    # E[x_4' | x_3=10, x_4=0] = 1.0
    env = SyntheticAimEnv(seed=1)
    env.reset(1)
    samples = []
    for _ in range(4000):
        env._state = {"x_1": 0.0, "x_2": 0.0, "x_3": 10.0, "x_4": 0.0, "tau": 0.0}
        env._steps = 0
        samples.append(env.step({"a": 0}).s_next["x_4"])
    mean = np.mean(samples)
    sigma = math.sqrt(0.5)
    assert abs(mean - 1.0) < 3 * sigma / math.sqrt(len(samples))


def test_synthetic_x1_drift_mean():
    env = SyntheticAimEnv(seed=2)
    rng = np.random.default_rng(2)
    env.reset(2)
    n = 100_000
    deltas = np.empty(n)
    for i in range(n):
        if env.finished:
            env.reset(int(rng.integers(0, 10**6)))
        x1 = env.state["x_1"]
        t = env.step({"a": int(rng.integers(0, 4))})
        deltas[i] = t.s_next["x_1"] - x1
    assert abs(deltas.mean() - 1.0) < 3.0 / math.sqrt(n)


def test_synthetic_reward_is_x4_gain():
    env = SyntheticAimEnv(seed=3)
    env.reset(3)
    t = env.step({"a": 0})
    assert t.rewards["gain_x4"] == pytest.approx(t.s_next["x_4"] - t.s["x_4"])


def test_synthetic_truncates_at_64_steps():
    env = SyntheticAimEnv(seed=0)
    env.reset(0)
    for _ in range(64):
        env.step({"a": 0})
    assert env.truncated and not env._done


# ---------------------------------------------------------------------------
# Cartpole.

def test_cartpole_reset_within_init_band():
    env = CartpoleEnv()
    for seed in range(5):
        s = env.reset(seed)
        assert all(-0.05 < v < 0.05 for v in s.values())


def test_cartpole_alive_reward_until_bounds():
    env = CartpoleEnv(seed=0)
    env.reset(0)
    t = env.step({"a": 1})
    assert t.rewards["alive"] == 1.0 and not t.done


def test_cartpole_terminates_out_of_bounds():
    env = CartpoleEnv(seed=0)
    env.reset(0)
    env._state = {"x": 0.0, "x_dot": 0.0, "theta": 0.205, "theta_dot": 3.0}
    t = env.step({"a": 1})
    assert t.done
    assert t.rewards["alive"] == 0.0


def test_cartpole_step_limit_truncates():
    env = CartpoleEnv(seed=0)
    env.reset(0)
    steps = 0
    rng = np.random.default_rng(0)
    while not env.finished and steps < 300:
        # alternate pushes to keep the pole up long enough is not guaranteed;
        # only assert the cap is respected
        env.step({"a": int(rng.integers(0, 2))})
        steps += 1
    assert steps <= 200


# ---------------------------------------------------------------------------
# Ground truth tables.

def test_ground_truth_containment_invariant():
    for name in ("vacuum", "synthetic-aim", "cartpole"):
        assert ground_truth(name).check_containment()


def test_synthetic_union_graph_table():
    truth = ground_truth("synthetic-aim")
    assert truth.union_parents == {
        "x_1'": frozenset({"x_1"}),
        "x_2'": frozenset({"x_1", "x_2", "a"}),
        "x_3'": frozenset({"x_1", "x_2", "x_3", "a"}),
        "x_4'": frozenset({"x_3", "x_4"}),
        "tau'": frozenset({"tau", "a"}),
    }


def test_synthetic_per_action_examples():
    truth = ground_truth("synthetic-aim")
    assert truth.aim_parents[(3, "x_3'")] == {"x_3"}
    for a in range(4):
        assert truth.aim_parents[(a, "x_4'")] == {"x_3", "x_4"}


def _numeric_dependence_parents(env_name: str, n_probes: int = 200) -> dict:
    """Oracle: symbolic dependence of the implemented update, estimated by
    perturbing each input and watching which outputs move (noise disabled
    by fixing the rng draw via identical seeds)."""
    env = make_env(env_name)
    schema = env.schema
    rng = np.random.default_rng(0)
    parents = {out: set() for out in schema.output_names()}
    for _ in range(n_probes):
        if env_name == "cartpole":
            base_s = {k: float(v) for k, v in zip(
                ["x", "x_dot", "theta", "theta_dot"], rng.uniform(-0.15, 0.15, 4))}
            actions = [0, 1]
        else:
            raise NotImplementedError
        for a in actions:
            def step_from(s, action):
                env.reset(0)
                env._state = dict(s)
                return env.step({"a": action})

            base = step_from(base_s, a)
            for var in schema.names("state"):
                bumped = dict(base_s)
                bumped[var] += 1e-4
                out = step_from(bumped, a)
                for name in schema.names("state"):
                    if not math.isclose(out.s_next[name], base.s_next[name],
                                        rel_tol=0.0, abs_tol=1e-12):
                        parents[name + "'"].add(var)
            other = step_from(base_s, 1 - a)
            for name in schema.names("state"):
                if not math.isclose(other.s_next[name], base.s_next[name],
                                    rel_tol=0.0, abs_tol=1e-12):
                    parents[name + "'"].add("a")
    return parents


def test_cartpole_union_graph_matches_numeric_dependence():
    truth = ground_truth("cartpole")
    probed = _numeric_dependence_parents("cartpole")
    assert {k: frozenset(v) for k, v in probed.items()} == truth.union_parents


def test_collect_steps_fills_buffer():
    env = make_env("vacuum")
    buf = ReplayBuffer(env.schema, capacity=500)
    collect_steps(env, uniform_random_policy(env.schema), 200, buf,
                  np.random.default_rng(0))
    assert len(buf) == 200
