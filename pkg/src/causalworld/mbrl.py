"""Model-based policy optimization on top of the causal world model.

The loop interleaves real-environment collection, periodic graph
re-discovery, structural-equation fitting, k-step model rollouts, and
clipped-surrogate policy updates.  Simulated transitions live in their own
store and never enter the real replay buffer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff as nd
from .discovery import CausalGraph, CitConfig, discover_graph, full_graph
from .envs import Env, make_env
from .fmdp import (
    Boolean,
    Categorical,
    Continuous,
    EnvSchema,
    ReplayBuffer,
    TransitionTuple,
    ValueMap,
)
from .scm import InferenceEnsemble, ScmHyperparams, fit

log = logging.getLogger(__name__)


@dataclass
class MbrlConfig:
    env_name: str = "cartpole"
    n_epoch: int = 50
    steps_per_epoch: int = 800
    n_round: int = 20
    n_graph_start: int = 3      # epochs per graph update, interpolated
    n_graph_end: int = 5
    rollout_len_start: int = 1  # model rollout length, interpolated
    rollout_len_end: int = 5
    rollout_samples: int = 1536
    eta: float = 0.1
    tau: float = 0.1
    ensemble_size: int = 5
    gamma: float | None = None  # None: use the schema's discount
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    minibatch_passes: int = 4
    minibatch_size: int = 256
    policy_lr: float = 3e-4
    model_lr: float = 3e-4
    model_fit_steps: int = 200
    model_fit_initial: int = 1000
    model_batch: int = 256
    buffer_capacity: int = 100_000
    discover_samples: int = 8000
    start_state_window: int = 10_000
    model_free: bool = False
    model_free_passes: int = 10
    eval_episodes: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_epoch", "steps_per_epoch", "n_round", "rollout_samples",
                     "ensemble_size", "eval_episodes"):
            if getattr(self, name) < 0 or (name != "n_epoch" and getattr(self, name) < 1):
                raise ValueError(f"{name} must be >= 1")
        if self.gamma is not None and not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def graph_period(self, epoch: int) -> int:
        return _int_schedule(self.n_graph_start, self.n_graph_end, epoch, self.n_epoch)

    def rollout_length(self, epoch: int) -> int:
        return _int_schedule(self.rollout_len_start, self.rollout_len_end, epoch, self.n_epoch)

    def to_dict(self) -> dict:
        return asdict(self)


def _int_schedule(start: int, end: int, epoch: int, n_epoch: int) -> int:
    if n_epoch <= 1:
        return start
    frac = min(max(epoch / (n_epoch - 1), 0.0), 1.0)
    return int(round(start + (end - start) * frac))


# ---------------------------------------------------------------------------
# Policy.

def featurize(schema: EnvSchema, states: Sequence[ValueMap]) -> np.ndarray:
    """State variables as a flat feature row: raw continuous values, one-hot
    categoricals, 0/1 booleans."""
    cols = []
    for v in schema.state_vars:
        vals = np.array([s[v.name] for s in states], dtype=np.float64)
        if isinstance(v.kind, Categorical):
            block = np.zeros((len(states), v.kind.n))
            block[np.arange(len(states)), vals.astype(int)] = 1.0
            cols.append(block)
        else:
            cols.append(vals[:, None])
    return np.concatenate(cols, axis=1)


def feature_dim(schema: EnvSchema) -> int:
    total = 0
    for v in schema.state_vars:
        total += v.kind.n if isinstance(v.kind, Categorical) else 1
    return total


LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class Policy:
    """Actor-critic: a shared-nothing pair of MLPs with one head per action
    variable.  Discrete heads emit a simplex; continuous heads emit a mean
    and a state-independent log-std, both clamped."""

    def __init__(self, schema: EnvSchema, seed: int = 0, hidden: int = 64):
        self.schema = schema
        rng = np.random.default_rng(seed)
        in_dim = feature_dim(schema)
        self.actor_l1 = nd.Linear(in_dim, hidden, rng)
        self.actor_l2 = nd.Linear(hidden, hidden, rng)
        self.heads: dict[str, nd.Linear] = {}
        self.log_stds: dict[str, nd.Tensor] = {}
        for v in schema.action_vars:
            if isinstance(v.kind, Categorical):
                self.heads[v.name] = nd.Linear(hidden, v.kind.n, rng)
            elif isinstance(v.kind, Boolean):
                self.heads[v.name] = nd.Linear(hidden, 2, rng)
            else:
                self.heads[v.name] = nd.Linear(hidden, 1, rng)
                self.log_stds[v.name] = nd.Tensor(np.zeros((1, 1)), requires_grad=True)
        self.critic = nd.Mlp([in_dim, hidden, hidden, 1], rng, activation="tanh")

    def named_params(self) -> dict[str, nd.Tensor]:
        out: dict[str, nd.Tensor] = {}
        out.update(self.actor_l1.named_params("actor_l1"))
        out.update(self.actor_l2.named_params("actor_l2"))
        for name, head in self.heads.items():
            out.update(head.named_params(f"head/{name}"))
        for name, p in self.log_stds.items():
            out[f"log_std/{name}"] = p
        out.update(self.critic.named_params("critic"))
        return out

    def _trunk(self, feats: nd.Tensor) -> nd.Tensor:
        return nd.tanh(self.actor_l2(nd.tanh(self.actor_l1(feats))))

    def head_params(self, feats: nd.Tensor) -> dict[str, nd.Tensor]:
        trunk = self._trunk(feats)
        return {name: head(trunk) for name, head in self.heads.items()}

    def values(self, feats: np.ndarray) -> np.ndarray:
        return self.critic(nd.Tensor(feats)).data[:, 0].astype(np.float64)

    # -- sampling -------------------------------------------------------------

    def act_batch(self, states: Sequence[ValueMap], rng: np.random.Generator
                  ) -> tuple[list[ValueMap], np.ndarray, np.ndarray]:
        """Sample actions; returns (actions, log-probs, values)."""
        feats = featurize(self.schema, states)
        raw = self.head_params(nd.Tensor(feats))
        n = len(states)
        actions: list[ValueMap] = [dict() for _ in range(n)]
        logp = np.zeros(n)
        for v in self.schema.action_vars:
            out = raw[v.name].data
            if isinstance(v.kind, (Categorical, Boolean)):
                z = out - out.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                u = rng.random((n, 1))
                idx = (u > np.cumsum(p, axis=1)).sum(axis=1)
                idx = np.minimum(idx, p.shape[1] - 1)
                logp += np.log(p[np.arange(n), idx] + 1e-12)
                for i in range(n):
                    actions[i][v.name] = bool(idx[i]) if isinstance(v.kind, Boolean) else int(idx[i])
            else:
                mean = out[:, 0].astype(np.float64)
                std = math.exp(float(np.clip(self.log_stds[v.name].data[0, 0], LOG_STD_MIN, LOG_STD_MAX)))
                a = rng.normal(mean, std)
                if np.isfinite(v.kind.lo) and np.isfinite(v.kind.hi):
                    a = np.clip(a, v.kind.lo, v.kind.hi)
                logp += -0.5 * (((a - mean) / std) ** 2 + 2 * math.log(std) + math.log(2 * math.pi))
                for i in range(n):
                    actions[i][v.name] = float(a[i])
        return actions, logp, self.values(feats)

    def act(self, state: ValueMap, rng: np.random.Generator) -> ValueMap:
        return self.act_batch([state], rng)[0][0]

    def mode_action(self, state: ValueMap) -> ValueMap:
        feats = featurize(self.schema, [state])
        raw = self.head_params(nd.Tensor(feats))
        action: ValueMap = {}
        for v in self.schema.action_vars:
            out = raw[v.name].data[0]
            if isinstance(v.kind, Boolean):
                action[v.name] = bool(np.argmax(out))
            elif isinstance(v.kind, Categorical):
                action[v.name] = int(np.argmax(out))
            else:
                action[v.name] = float(out[0])
        return action

    # -- training -------------------------------------------------------------

    def log_prob_entropy(self, feats: nd.Tensor, actions: dict[str, np.ndarray]
                         ) -> tuple[nd.Tensor, nd.Tensor]:
        """Differentiable log-probability and entropy columns for a batch."""
        raw = self.head_params(feats)
        n = feats.shape[0]
        logp = nd.Tensor(np.zeros((n, 1)))
        entropy = nd.Tensor(np.zeros((n, 1)))
        for v in self.schema.action_vars:
            out = raw[v.name]
            if isinstance(v.kind, (Categorical, Boolean)):
                logs = nd.log_softmax(out, axis=1)
                idx = actions[v.name].astype(np.int64)
                logp = logp + nd.pick_cols(logs, idx)
                probs = nd.softmax(out, axis=1)
                entropy = entropy + nd.tsum(probs * logs, axis=1, keepdims=True) * -1.0
            else:
                mean = out
                log_std = nd.clip(self.log_stds[v.name], LOG_STD_MIN, LOG_STD_MAX)
                a = nd.Tensor(actions[v.name][:, None])
                z = (a - mean) * nd.exp(-log_std)
                logp = logp + (z * z + 2.0 * log_std + math.log(2 * math.pi)) * -0.5
                entropy = entropy + log_std + 0.5 * (1.0 + math.log(2 * math.pi))
        return logp, entropy


# ---------------------------------------------------------------------------
# Advantage estimation and the clipped-surrogate update.

@dataclass
class RolloutBatch:
    """Flat transition arrays; `boundary` marks the last row of a segment
    (episode end, truncation, or rollout horizon)."""

    features: np.ndarray
    actions: dict[str, np.ndarray]
    logp_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray
    boundary: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> None:
    """Generalized advantage estimation over flat segment arrays.  Done
    steps do not bootstrap; truncated segment ends bootstrap through
    ``next_values``."""
    n = len(batch)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        not_done = 0.0 if batch.dones[t] else 1.0
        delta = batch.rewards[t] + gamma * batch.next_values[t] * not_done - batch.values[t]
        if batch.boundary[t]:
            running = delta
        else:
            running = delta + gamma * lam * not_done * running
        adv[t] = running
    batch.advantages = adv
    batch.returns = adv + batch.values


@dataclass
class PpoStats:
    actor_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def ppo_update(policy: Policy, batch: RolloutBatch, cfg: MbrlConfig,
               optim: nd.Adam | None = None, rng: np.random.Generator | None = None,
               passes: int | None = None) -> PpoStats:
    """Clipped-surrogate ascent with value loss and entropy bonus."""
    if batch.advantages is None:
        raise ValueError("run compute_gae before ppo_update")
    params = policy.named_params()
    optim = optim or nd.Adam(params, lr=cfg.policy_lr)
    rng = rng or np.random.default_rng(cfg.seed)
    n = len(batch)
    adv = batch.advantages
    std = adv.std()
    norm_adv = (adv - adv.mean()) / (std + 1e-8)

    stats = PpoStats(0.0, 0.0, 0.0, 0.0, 0.0)
    count = 0
    n_passes = passes if passes is not None else cfg.minibatch_passes
    for _ in range(n_passes):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = order[lo : lo + cfg.minibatch_size]
            feats = nd.Tensor(batch.features[idx])
            acts = {k: v[idx] for k, v in batch.actions.items()}
            with nd.Tape(params) as tape:
                logp, entropy = policy.log_prob_entropy(feats, acts)
                ratio = nd.exp(logp - batch.logp_old[idx][:, None])
                a_col = nd.Tensor(norm_adv[idx][:, None])
                unclipped = ratio * a_col
                clipped = nd.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a_col
                # elementwise min via masking keeps the clip-region gradient exact
                take_clipped = (clipped.data < unclipped.data)
                surrogate = unclipped * nd.Tensor((~take_clipped).astype(unclipped.data.dtype)) \
                    + clipped * nd.Tensor(take_clipped.astype(clipped.data.dtype))
                actor_loss = -surrogate.mean()
                v_pred = policy.critic(feats)
                v_err = v_pred - nd.Tensor(batch.returns[idx][:, None])
                value_loss = (v_err * v_err).mean()
                ent = entropy.mean()
                loss = actor_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
                if not np.isfinite(loss.data):
                    raise FloatingPointError("non-finite policy loss; aborting round")
                grads = nd.backward(tape, loss)
            optim.step(grads)
            ratio_np = ratio.data[:, 0]
            stats.actor_loss += float(actor_loss.data)
            stats.value_loss += float(value_loss.data)
            stats.entropy += float(ent.data)
            stats.clip_fraction += float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_eps))
            stats.approx_kl += float(np.mean(batch.logp_old[idx] - logp.data[:, 0]))
            count += 1
    for name in ("actor_loss", "value_loss", "entropy", "clip_fraction", "approx_kl"):
        setattr(stats, name, getattr(stats, name) / max(count, 1))
    return stats


# ---------------------------------------------------------------------------
# Model rollouts.

def model_rollout(
    ensemble: InferenceEnsemble,
    policy: Policy,
    start_states: Sequence[ValueMap],
    k: int,
    rng: np.random.Generator,
) -> tuple[list[TransitionTuple], RolloutBatch]:
    """Branched k-step rollouts through the ensemble.  Each transition
    samples one member uniformly; predicted termination ends the branch
    without bootstrapping."""
    schema = ensemble.schema
    states = [dict(s) for s in start_states]
    rows_feat, rows_logp, rows_val, rows_nextval = [], [], [], []
    rows_rew, rows_done, rows_bound = [], [], []
    rows_act: dict[str, list] = {v.name: [] for v in schema.action_vars}
    transitions: list[TransitionTuple] = []

    reward_specs = schema.rewards
    termination = schema.termination
    for step in range(k):
        if not states:
            break
        actions, logp, values = policy.act_batch(states, rng)
        s_next_list, o_list = ensemble.sample_next_batch(states, actions, rng)
        feats = featurize(schema, states)
        next_feats = featurize(schema, s_next_list)
        next_values = policy.values(next_feats)
        survivors = []
        for i, (s, a, s_next, o) in enumerate(zip(states, actions, s_next_list, o_list)):
            # hot path: model outputs are clamped already, skip re-validation
            view = schema.transition_view(s, a, s_next, o)
            rewards = {r.name: float(r.evaluate({k_: view[k_] for k_ in r.depends_on}))
                       for r in reward_specs}
            done = termination.check(view)
            t = TransitionTuple(s, a, s_next, o, rewards, done)
            transitions.append(t)
            rows_feat.append(feats[i])
            for name in rows_act:
                rows_act[name].append(a[name])
            rows_logp.append(logp[i])
            rows_val.append(values[i])
            rows_nextval.append(next_values[i])
            rows_rew.append(t.total_reward)
            rows_done.append(done)
            rows_bound.append(done or step == k - 1)
            if not done:
                survivors.append(s_next)
        states = survivors

    # branch segments are interleaved row-wise; rebuild per-branch order
    batch = _reorder_segments(schema, rows_feat, rows_act, rows_logp, rows_val,
                              rows_nextval, rows_rew, rows_done, rows_bound,
                              n_start=len(start_states), k=k)
    return transitions, batch


def _reorder_segments(schema, feats, acts, logps, vals, nextvals, rews, dones,
                      bounds, n_start: int, k: int) -> RolloutBatch:
    """Rows were appended step-major over shrinking survivor sets; regroup
    them into contiguous per-branch segments so GAE scans correctly."""
    per_branch: list[list[int]] = [[] for _ in range(n_start)]
    alive = list(range(n_start))
    row = 0
    for step in range(k):
        next_alive = []
        for b in alive:
            if row >= len(rews):
                break
            per_branch[b].append(row)
            if not dones[row]:
                next_alive.append(b)
            row += 1
        alive = next_alive
        if not alive:
            break
    order = [i for branch in per_branch for i in branch]
    idx = np.array(order, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("empty rollout")

    def take(xs):
        return np.asarray(xs, dtype=np.float64)[idx]

    # segment ends on the reordered layout: the last row of every branch
    boundary = np.zeros(len(idx), dtype=bool)
    pos = 0
    for branch in per_branch:
        if branch:
            pos += len(branch)
            boundary[pos - 1] = True
    actions = {name: np.asarray(vals_, dtype=np.float64)[idx]
               for name, vals_ in acts.items()}
    return RolloutBatch(
        features=np.asarray(feats, dtype=np.float64)[idx],
        actions=actions,
        logp_old=take(logps),
        rewards=take(rews),
        values=take(vals),
        next_values=take(nextvals),
        dones=np.asarray(dones, dtype=bool)[idx],
        boundary=boundary,
    )


# ---------------------------------------------------------------------------
# The training loop lives in runs.py (it owns the artifact layout); the
# helpers below are shared by both the loop and the tests.

def collect_epoch(env: Env, policy: Policy, buffer: ReplayBuffer, n_steps: int,
                  rng: np.random.Generator) -> tuple[RolloutBatch, list[float]]:
    """Collect real steps with the sampling policy; returns the on-policy
    batch (for model-free updates) and the returns of finished episodes."""
    schema = env.schema
    rows_feat, rows_logp, rows_val, rows_nextval = [], [], [], []
    rows_rew, rows_done, rows_bound = [], [], []
    rows_act: dict[str, list] = {v.name: [] for v in schema.action_vars}
    finished_returns: list[float] = []
    episode_return = 0.0

    if env._state is None or env.finished:
        env.reset(int(rng.integers(0, 2**31 - 1)))
        episode_return = 0.0
    for step in range(n_steps):
        state = env.state
        actions, logp, values = policy.act_batch([state], rng)
        t = env.step(actions[0])
        truncated = env.truncated
        buffer.append(t, truncated=truncated)
        episode_return += t.total_reward
        feats = featurize(schema, [state])[0]
        next_value = float(policy.values(featurize(schema, [t.s_next]))[0])
        rows_feat.append(feats)
        for name in rows_act:
            rows_act[name].append(actions[0][name])
        rows_logp.append(logp[0])
        rows_val.append(values[0])
        rows_nextval.append(next_value)
        rows_rew.append(t.total_reward)
        rows_done.append(t.done)
        rows_bound.append(t.done or truncated or step == n_steps - 1)
        if env.finished:
            finished_returns.append(episode_return)
            episode_return = 0.0
            env.reset(int(rng.integers(0, 2**31 - 1)))

    actions = {name: np.asarray(v, dtype=np.float64) for name, v in rows_act.items()}
    batch = RolloutBatch(
        features=np.asarray(rows_feat, dtype=np.float64),
        actions=actions,
        logp_old=np.asarray(rows_logp, dtype=np.float64),
        rewards=np.asarray(rows_rew, dtype=np.float64),
        values=np.asarray(rows_val, dtype=np.float64),
        next_values=np.asarray(rows_nextval, dtype=np.float64),
        dones=np.asarray(rows_done, dtype=bool),
        boundary=np.asarray(rows_bound, dtype=bool),
    )
    return batch, finished_returns


def evaluate_policy(env_name: str, policy: Policy, episodes: int, seed: int) -> tuple[float, float]:
    """Mean/std of episode returns under the mode action."""
    returns = []
    env = make_env(env_name)
    for e in range(episodes):
        env.reset(seed * 1000 + e)
        total = 0.0
        while not env.finished:
            t = env.step(policy.mode_action(env.state))
            total += t.total_reward
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def sample_start_states(buffer: ReplayBuffer, n: int, window: int,
                        rng: np.random.Generator) -> list[ValueMap]:
    recs = buffer.snapshot()
    recent = recs[-window:]
    idx = rng.integers(0, len(recent), size=n)
    return [dict(recent[i].transition.s) for i in idx]
