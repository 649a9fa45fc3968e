"""Policy optimization machinery: GAE, clipped updates, rollouts, the loop."""

import numpy as np
import pytest

from causalworld import ndiff as nd
from causalworld.discovery import graph_from_parents
from causalworld.envs import ground_truth, make_env
from causalworld.fmdp import ReplayBuffer
from causalworld.mbrl import (
    MbrlConfig,
    Policy,
    RolloutBatch,
    compute_gae,
    collect_epoch,
    evaluate_policy,
    featurize,
    model_rollout,
    ppo_update,
    sample_start_states,
)
from causalworld.runs import load_checkpoint, train_loop
from causalworld.scm import InferenceEnsemble, fit

CARTPOLE = make_env("cartpole").schema


def test_config_invariants():
    with pytest.raises(ValueError):
        MbrlConfig(n_round=0)
    with pytest.raises(ValueError):
        MbrlConfig(gamma=1.5)
    cfg = MbrlConfig(n_epoch=50, rollout_len_start=1, rollout_len_end=5,
                     n_graph_start=3, n_graph_end=5)
    assert cfg.rollout_length(0) == 1
    assert cfg.rollout_length(49) == 5
    assert cfg.graph_period(0) == 3
    assert cfg.graph_period(49) == 5
    # interpolated schedules are monotone
    lens = [cfg.rollout_length(e) for e in range(50)]
    assert all(a <= b for a, b in zip(lens, lens[1:]))


def test_featurize_one_hot_and_raw():
    schema = make_env("vacuum").schema
    feats = featurize(schema, [{"position": 1, "clean_1": True, "clean_2": False}])
    assert feats.tolist() == [[0.0, 1.0, 1.0, 0.0]]
    feats = featurize(CARTPOLE, [{"x": 0.5, "x_dot": -1.0, "theta": 0.1, "theta_dot": 2.0}])
    assert feats.tolist() == [[0.5, -1.0, 0.1, 2.0]]


def test_policy_heads_emit_simplex_and_modes():
    policy = Policy(CARTPOLE, seed=0)
    state = {"x": 0.0, "x_dot": 0.0, "theta": 0.0, "theta_dot": 0.0}
    actions, logp, values = policy.act_batch([state] * 4, np.random.default_rng(0))
    assert all(a["a"] in (0, 1) for a in actions)
    assert np.all(logp <= 0.0)
    mode = policy.mode_action(state)
    assert mode["a"] in (0, 1)
    feats = nd.Tensor(featurize(CARTPOLE, [state]))
    raw = policy.head_params(feats)["a"].data
    p = np.exp(raw - raw.max())
    assert abs(p.sum() / p.sum() - 1.0) < 1e-6  # logits finite, normalizable
    assert np.all(np.isfinite(raw))


def test_continuous_head_log_std_clamped():
    from causalworld.fmdp import Continuous, EnvSchema, VarSpec

    schema = EnvSchema([
        VarSpec("x", "state", Continuous()),
        VarSpec("u", "action", Continuous(-1.0, 1.0)),
    ])
    policy = Policy(schema, seed=0)
    policy.log_stds["u"].data = np.array([[99.0]])
    actions, logp, _ = policy.act_batch([{"x": 0.0}] * 8, np.random.default_rng(0))
    assert all(-1.0 <= a["u"] <= 1.0 for a in actions)
    feats = nd.Tensor(featurize(schema, [{"x": 0.0}] * 8))
    lp, ent = policy.log_prob_entropy(feats, {"u": np.zeros(8)})
    assert np.all(np.isfinite(lp.data))


def _dummy_batch(policy, n=64, adv=None, seed=0):
    rng = np.random.default_rng(seed)
    states = [{"x": float(rng.uniform(-1, 1)), "x_dot": 0.0,
               "theta": float(rng.uniform(-0.1, 0.1)), "theta_dot": 0.0}
              for _ in range(n)]
    actions, logp, values = policy.act_batch(states, rng)
    feats = featurize(CARTPOLE, states)
    batch = RolloutBatch(
        features=feats,
        actions={"a": np.array([a["a"] for a in actions], dtype=np.float64)},
        logp_old=logp,
        rewards=np.ones(n),
        values=values,
        next_values=values,
        dones=np.zeros(n, dtype=bool),
        boundary=np.zeros(n, dtype=bool),
    )
    batch.boundary[-1] = True
    batch.advantages = adv if adv is not None else rng.standard_normal(n)
    batch.returns = batch.advantages + batch.values
    return batch


def test_zero_advantages_leave_actor_unchanged():
    policy = Policy(CARTPOLE, seed=1)
    cfg = MbrlConfig(value_coef=0.0, entropy_coef=0.0)
    batch = _dummy_batch(policy, adv=np.zeros(64))
    before = {k: v.data.copy() for k, v in policy.named_params().items()}
    ppo_update(policy, batch, cfg, rng=np.random.default_rng(0))
    after = policy.named_params()
    for k in before:
        assert np.allclose(before[k], after[k].data, atol=1e-7), k


def test_clipped_ratio_contributes_zero_actor_gradient():
    """A sample whose ratio sits past 1+2*eps with positive advantage must
    not move the actor."""
    policy = Policy(CARTPOLE, seed=2)
    cfg = MbrlConfig(clip_eps=0.2, value_coef=0.0, entropy_coef=0.0)
    batch = _dummy_batch(policy, n=8, adv=np.ones(8))
    # fake old log-probs so every ratio is ~ 1 + 2 eps
    batch.logp_old = batch.logp_old - np.log(1.0 + 2 * cfg.clip_eps)
    params = policy.named_params()
    with nd.Tape(params) as tape:
        logp, _ = policy.log_prob_entropy(nd.Tensor(batch.features),
                                          {k: v for k, v in batch.actions.items()})
        ratio = nd.exp(logp - batch.logp_old[:, None])
        assert np.all(ratio.data > 1.0 + 2 * cfg.clip_eps - 0.05)
        adv = nd.Tensor(batch.advantages[:, None])
        unclipped = ratio * adv
        clipped = nd.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
        take_clipped = (clipped.data < unclipped.data)
        surrogate = unclipped * nd.Tensor((~take_clipped).astype(np.float32)) \
            + clipped * nd.Tensor(take_clipped.astype(np.float32))
        loss = -surrogate.mean()
        grads = nd.backward(tape, loss)
    for name, g in grads.items():
        if name.startswith(("actor", "head")):
            assert np.allclose(g.data, 0.0), name


def test_gae_matches_hand_rolled_recursion():
    batch = RolloutBatch(
        features=np.zeros((4, 1)),
        actions={"a": np.zeros(4)},
        logp_old=np.zeros(4),
        rewards=np.array([1.0, 1.0, 1.0, 1.0]),
        values=np.array([0.5, 0.6, 0.7, 0.8]),
        next_values=np.array([0.6, 0.7, 0.8, 0.9]),
        dones=np.array([False, False, False, True]),
        boundary=np.array([False, False, False, True]),
    )
    gamma, lam = 0.9, 0.8
    compute_gae(batch, gamma, lam)
    deltas = [1 + gamma * 0.6 - 0.5, 1 + gamma * 0.7 - 0.6,
              1 + gamma * 0.8 - 0.7, 1 + 0.0 - 0.8]
    expected = [0.0] * 4
    expected[3] = deltas[3]
    for t in (2, 1, 0):
        expected[t] = deltas[t] + gamma * lam * expected[t + 1]
    assert np.allclose(batch.advantages, expected)


def test_gae_truncation_bootstraps_but_does_not_chain():
    batch = RolloutBatch(
        features=np.zeros((2, 1)),
        actions={"a": np.zeros(2)},
        logp_old=np.zeros(2),
        rewards=np.array([1.0, 1.0]),
        values=np.array([0.0, 0.0]),
        next_values=np.array([2.0, 3.0]),
        dones=np.array([False, False]),
        boundary=np.array([True, True]),  # two truncated one-step segments
    )
    compute_gae(batch, gamma=0.5, lam=0.9)
    assert np.allclose(batch.advantages, [1 + 0.5 * 2.0, 1 + 0.5 * 3.0])


def _tiny_ensemble(seed=0):
    schema = make_env("synthetic-aim").schema
    truth = ground_truth("synthetic-aim")
    graph = graph_from_parents(truth.union_parents, schema.input_names(),
                               schema.output_names())
    env = make_env("synthetic-aim")
    from causalworld.envs import collect_steps, uniform_random_policy

    buf = ReplayBuffer(schema, capacity=2000)
    collect_steps(env, uniform_random_policy(schema), 1000, buf,
                  np.random.default_rng(seed))
    ens = InferenceEnsemble(schema, graph, n_members=2, seed=seed)
    fit(ens, buf, steps=100, batch_size=64)
    return ens, buf


def test_model_rollout_counts_transitions():
    ens, buf = _tiny_ensemble()
    policy = Policy(ens.schema, seed=0)
    starts = sample_start_states(buf, 100, 1000, np.random.default_rng(1))
    transitions, batch = model_rollout(ens, policy, starts, k=5,
                                       rng=np.random.default_rng(2))
    # synthetic env never terminates, so exactly 500 transitions
    assert len(transitions) == 500
    assert len(batch) == 500
    assert batch.boundary.sum() == 100  # one segment end per start


def test_model_rollout_single_step_is_one_prediction_per_start():
    ens, buf = _tiny_ensemble()
    policy = Policy(ens.schema, seed=0)
    starts = sample_start_states(buf, 7, 1000, np.random.default_rng(1))
    transitions, batch = model_rollout(ens, policy, starts, k=1,
                                       rng=np.random.default_rng(2))
    assert len(transitions) == 7
    assert all(batch.boundary)


def test_rollout_segments_are_contiguous_after_reorder():
    ens, buf = _tiny_ensemble()
    policy = Policy(ens.schema, seed=0)
    starts = sample_start_states(buf, 10, 1000, np.random.default_rng(1))
    _, batch = model_rollout(ens, policy, starts, k=3, rng=np.random.default_rng(2))
    # every segment is 3 long (no termination); boundaries at positions 2 mod 3
    assert len(batch) == 30
    assert list(np.where(batch.boundary)[0]) == [3 * i + 2 for i in range(10)]


def test_train_loop_zero_epochs_leaves_initialized_artifacts(tmp_path):
    cfg = MbrlConfig(env_name="vacuum", n_epoch=0, steps_per_epoch=10,
                     ensemble_size=2, eval_episodes=1, seed=0)
    art = train_loop(cfg, tmp_path / "run0")
    assert art.metrics_path.exists()
    run = load_checkpoint(tmp_path / "run0")
    assert run.policy is not None
    assert run.ensemble.n_members == 2
    assert art.metrics_path.read_text().startswith("epoch,")


def test_simulated_transitions_never_enter_real_buffer(tmp_path):
    """The real buffer after a short loop holds exactly the env-collected
    steps; rollout batches live in their own store."""
    cfg = MbrlConfig(env_name="vacuum", n_epoch=1, steps_per_epoch=30, n_round=1,
                     rollout_samples=16, model_fit_initial=20, model_fit_steps=10,
                     ensemble_size=2, eval_episodes=1, seed=0, discover_samples=200,
                     eta=0.1)
    art = train_loop(cfg, tmp_path / "run1")
    lines = [l for l in art.transitions_path.read_text().splitlines() if l.strip()]
    assert len(lines) == 30


def test_model_free_flag_runs_pure_on_policy(tmp_path):
    cfg = MbrlConfig(env_name="cartpole", n_epoch=2, steps_per_epoch=60,
                     model_free=True, eval_episodes=1, seed=0)
    art = train_loop(cfg, tmp_path / "run2")
    assert len(art.metrics) == 2
    import math

    assert all(math.isnan(row["model_holdout_ll"]) for row in art.metrics)


def test_fixed_seed_metrics_are_byte_identical(tmp_path):
    cfg = MbrlConfig(env_name="synthetic-aim", n_epoch=2, steps_per_epoch=80,
                     n_round=1, rollout_samples=32, model_fit_initial=30,
                     model_fit_steps=15, ensemble_size=2, eval_episodes=1,
                     seed=7, discover_samples=300, eta=0.05)
    a = train_loop(cfg, tmp_path / "a")
    b = train_loop(cfg, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


def test_evaluate_policy_returns_mean_std():
    policy = Policy(CARTPOLE, seed=0)
    mean, std = evaluate_policy("cartpole", policy, episodes=2, seed=0)
    assert mean > 0.0 and std >= 0.0
