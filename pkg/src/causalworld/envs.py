"""Built-in simulators with analytically known causal structure.

Three environments ship with the toolkit:

* ``vacuum``        — a 2-cell cleaning world (position, two clean flags,
                      Left/Right/Suck actions, a boundary-failure outcome).
* ``synthetic-aim`` — five drifting reals whose per-action dependence table
                      is known exactly; used to score recovery accuracy.
* ``cartpole``      — the classic pole-balancing control problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fmdp import (
    ACTION,
    Boolean,
    Categorical,
    Continuous,
    EnvSchema,
    ReplayBuffer,
    RewardSpec,
    STATE,
    TerminationRule,
    TransitionTuple,
    ValueMap,
    VarSpec,
    make_transition,
)

ENV_NAMES = ("vacuum", "synthetic-aim", "cartpole")


class EpisodeFinishedError(RuntimeError):
    pass


class Env:
    """One simulator instance.  Identical seed + action sequence replays the
    exact same trajectory."""

    schema: EnvSchema
    step_limit: int

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self._state: ValueMap | None = None
        self._steps = 0
        self._done = False
        self._truncated = False

    # subclasses
    def _initial_state(self, rng: np.random.Generator) -> ValueMap:
        raise NotImplementedError

    def _transition(self, s: ValueMap, a: ValueMap, rng: np.random.Generator) -> tuple[ValueMap, ValueMap]:
        """Return (next state, outcomes)."""
        raise NotImplementedError

    def reset(self, seed: int | None = None) -> ValueMap:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = self._initial_state(self._rng)
        self._steps = 0
        self._done = False
        self._truncated = False
        return dict(self._state)

    @property
    def state(self) -> ValueMap:
        if self._state is None:
            raise RuntimeError("reset() before reading state")
        return dict(self._state)

    @property
    def finished(self) -> bool:
        return self._done or self._truncated

    @property
    def truncated(self) -> bool:
        return self._truncated

    def step(self, action: ValueMap) -> TransitionTuple:
        if self._state is None:
            raise RuntimeError("reset() before step()")
        if self.finished:
            raise EpisodeFinishedError("episode finished; reset() to continue")
        s = self._state
        s_next, o = self._transition(s, action, self._rng)
        t = make_transition(self.schema, s, action, s_next, o, False)
        done = self.schema.termination.check(t.view(self.schema))
        t = TransitionTuple(t.s, t.a, t.s_next, t.o, t.rewards, done)
        self._state = dict(s_next)
        self._steps += 1
        self._done = done
        self._truncated = not done and self._steps >= self.step_limit
        return t


# ---------------------------------------------------------------------------
# Vacuum world: cells 0 and 1; actions 0=Left, 1=Right, 2=Suck.

VACUUM_LEFT, VACUUM_RIGHT, VACUUM_SUCK = 0, 1, 2


def _vacuum_schema() -> EnvSchema:
    vars_ = [
        VarSpec("position", STATE, Categorical(2)),
        VarSpec("clean_1", STATE, Boolean()),
        VarSpec("clean_2", STATE, Boolean()),
        VarSpec("a", ACTION, Categorical(3)),
        VarSpec("failure", "outcome", Boolean()),
    ]
    rewards = [
        RewardSpec("cleaned_1", ["clean_1", "clean_1'"],
                   lambda v: 1.0 if v["clean_1'"] and not v["clean_1"] else 0.0),
        RewardSpec("cleaned_2", ["clean_2", "clean_2'"],
                   lambda v: 1.0 if v["clean_2'"] and not v["clean_2"] else 0.0),
    ]
    term = TerminationRule("both cells clean",
                           lambda v: bool(v["clean_1'"] and v["clean_2'"]))
    return EnvSchema(vars_, rewards, term, gamma=0.99)


class VacuumEnv(Env):
    schema = _vacuum_schema()
    step_limit = 20

    def _initial_state(self, rng):
        return {"position": int(rng.integers(0, 2)), "clean_1": False, "clean_2": False}

    def _transition(self, s, a, rng):
        pos = int(s["position"])
        act = int(a["a"])
        clean = [bool(s["clean_1"]), bool(s["clean_2"])]
        failure = False
        if act == VACUUM_LEFT:
            failure = pos == 0
            pos = max(pos - 1, 0)
        elif act == VACUUM_RIGHT:
            failure = pos == 1
            pos = min(pos + 1, 1)
        else:
            clean[pos] = True
        s_next = {"position": pos, "clean_1": clean[0], "clean_2": clean[1]}
        return s_next, {"failure": failure}


# ---------------------------------------------------------------------------
# Synthetic environment with a known per-action dependence table.  The five
# state variables drift so that several pairs (e.g. x_1 and tau) correlate
# strongly without any causal link, which is the point of the benchmark.

SYNTH_TAU_STEP = {0: 10.0, 1: 20.0, 2: 5.0, 3: 5.0}


def _synthetic_schema() -> EnvSchema:
    vars_ = [
        VarSpec("x_1", STATE, Continuous()),
        VarSpec("x_2", STATE, Continuous()),
        VarSpec("x_3", STATE, Continuous()),
        VarSpec("x_4", STATE, Continuous()),
        VarSpec("tau", STATE, Continuous(0.0, float("inf"))),
        VarSpec("a", ACTION, Categorical(4)),
    ]
    rewards = [
        RewardSpec("gain_x4", ["x_4", "x_4'"], lambda v: float(v["x_4'"] - v["x_4"])),
    ]
    return EnvSchema(vars_, rewards, TerminationRule("never"), gamma=0.99)


class SyntheticAimEnv(Env):
    schema = _synthetic_schema()
    step_limit = 64

    def _initial_state(self, rng):
        return {"x_1": 0.0, "x_2": 0.0, "x_3": 0.0, "x_4": 0.0, "tau": 0.0}

    def _transition(self, s, a, rng):
        act = int(a["a"])
        x1, x2, x3, x4, tau = s["x_1"], s["x_2"], s["x_3"], s["x_4"], s["tau"]
        x1n = x1 + rng.normal(1.0, 1.0)
        x2n = (x1 if act == 0 else x2) + rng.normal(0.0, 1.0)
        inc = {0: x1, 1: x2, 2: 5.0, 3: 10.0}[act]
        x3n = x3 + inc + rng.normal(0.0, 1.0)
        x4n = 0.1 * x3 + 0.9 * x4 + rng.normal(0.0, math.sqrt(0.5))
        taun = tau + SYNTH_TAU_STEP[act]
        return (
            {"x_1": float(x1n), "x_2": float(x2n), "x_3": float(x3n),
             "x_4": float(x4n), "tau": float(taun)},
            {},
        )


# ---------------------------------------------------------------------------
# Cartpole, classic-control parameters, explicit Euler kinematics.

CARTPOLE_X_LIMIT = 2.4
CARTPOLE_THETA_LIMIT = 12.0 * math.pi / 180.0


def _cartpole_schema() -> EnvSchema:
    vars_ = [
        VarSpec("x", STATE, Continuous()),
        VarSpec("x_dot", STATE, Continuous()),
        VarSpec("theta", STATE, Continuous()),
        VarSpec("theta_dot", STATE, Continuous()),
        VarSpec("a", ACTION, Categorical(2)),
    ]

    def in_bounds(v):
        return abs(v["x'"]) <= CARTPOLE_X_LIMIT and abs(v["theta'"]) <= CARTPOLE_THETA_LIMIT

    rewards = [
        RewardSpec("alive", ["x'", "theta'"], lambda v: 1.0 if in_bounds(v) else 0.0),
    ]
    term = TerminationRule("cart or pole out of bounds", lambda v: not in_bounds(v))
    return EnvSchema(vars_, rewards, term, gamma=0.98)


class CartpoleEnv(Env):
    schema = _cartpole_schema()
    step_limit = 200

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    force_mag = 10.0
    dt = 0.02

    def _initial_state(self, rng):
        vals = rng.uniform(-0.05, 0.05, size=4)
        return {"x": float(vals[0]), "x_dot": float(vals[1]),
                "theta": float(vals[2]), "theta_dot": float(vals[3])}

    def _transition(self, s, a, rng):
        x, x_dot = s["x"], s["x_dot"]
        theta, theta_dot = s["theta"], s["theta_dot"]
        force = self.force_mag if int(a["a"]) == 1 else -self.force_mag
        total_mass = self.mass_cart + self.mass_pole
        polemass_length = self.mass_pole * self.half_length
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos_t**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
        s_next = {
            "x": float(x + self.dt * x_dot),
            "x_dot": float(x_dot + self.dt * x_acc),
            "theta": float(theta + self.dt * theta_dot),
            "theta_dot": float(theta_dot + self.dt * theta_acc),
        }
        return s_next, {}


# ---------------------------------------------------------------------------
# Ground truth structure.

@dataclass(frozen=True)
class GroundTruth:
    """Analytic causal structure: union parent sets over all actions, and the
    per-action salient parent sets (state variables only)."""

    union_parents: dict[str, frozenset[str]]
    aim_parents: dict[tuple[int, str], frozenset[str]]

    def check_containment(self) -> bool:
        for (a, out), parents in self.aim_parents.items():
            if not parents <= self.union_parents[out]:
                return False
        return True


def _fs(*names: str) -> frozenset[str]:
    return frozenset(names)


_VACUUM_TRUTH = GroundTruth(
    union_parents={
        "position'": _fs("position", "a"),
        "clean_1'": _fs("clean_1", "position", "a"),
        "clean_2'": _fs("clean_2", "position", "a"),
        "failure": _fs("position", "a"),
    },
    aim_parents={
        # Left / Right move to a fixed cell, so position' has no state parent.
        (VACUUM_LEFT, "position'"): _fs(),
        (VACUUM_RIGHT, "position'"): _fs(),
        (VACUUM_SUCK, "position'"): _fs("position"),
        (VACUUM_LEFT, "clean_1'"): _fs("clean_1"),
        (VACUUM_RIGHT, "clean_1'"): _fs("clean_1"),
        (VACUUM_SUCK, "clean_1'"): _fs("clean_1", "position"),
        (VACUUM_LEFT, "clean_2'"): _fs("clean_2"),
        (VACUUM_RIGHT, "clean_2'"): _fs("clean_2"),
        (VACUUM_SUCK, "clean_2'"): _fs("clean_2", "position"),
        (VACUUM_LEFT, "failure"): _fs("position"),
        (VACUUM_RIGHT, "failure"): _fs("position"),
        (VACUUM_SUCK, "failure"): _fs(),
    },
)

_SYNTH_TRUTH = GroundTruth(
    union_parents={
        "x_1'": _fs("x_1"),
        "x_2'": _fs("x_1", "x_2", "a"),
        "x_3'": _fs("x_1", "x_2", "x_3", "a"),
        "x_4'": _fs("x_3", "x_4"),
        "tau'": _fs("tau", "a"),
    },
    aim_parents={
        (0, "x_1'"): _fs("x_1"), (1, "x_1'"): _fs("x_1"),
        (2, "x_1'"): _fs("x_1"), (3, "x_1'"): _fs("x_1"),
        (0, "x_2'"): _fs("x_1"), (1, "x_2'"): _fs("x_2"),
        (2, "x_2'"): _fs("x_2"), (3, "x_2'"): _fs("x_2"),
        (0, "x_3'"): _fs("x_1", "x_3"), (1, "x_3'"): _fs("x_2", "x_3"),
        (2, "x_3'"): _fs("x_3"), (3, "x_3'"): _fs("x_3"),
        (0, "x_4'"): _fs("x_3", "x_4"), (1, "x_4'"): _fs("x_3", "x_4"),
        (2, "x_4'"): _fs("x_3", "x_4"), (3, "x_4'"): _fs("x_3", "x_4"),
        (0, "tau'"): _fs("tau"), (1, "tau'"): _fs("tau"),
        (2, "tau'"): _fs("tau"), (3, "tau'"): _fs("tau"),
    },
)

_CARTPOLE_STATE_PARENTS = {
    "x'": _fs("x", "x_dot"),
    "x_dot'": _fs("x_dot", "theta", "theta_dot"),
    "theta'": _fs("theta", "theta_dot"),
    "theta_dot'": _fs("theta", "theta_dot"),
}

_CARTPOLE_TRUTH = GroundTruth(
    union_parents={
        "x'": _fs("x", "x_dot"),
        "x_dot'": _fs("x_dot", "theta", "theta_dot", "a"),
        "theta'": _fs("theta", "theta_dot"),
        "theta_dot'": _fs("theta", "theta_dot", "a"),
    },
    aim_parents={
        (a, out): parents
        for a in (0, 1)
        for out, parents in _CARTPOLE_STATE_PARENTS.items()
    },
)

_ENVS: dict[str, type[Env]] = {
    "vacuum": VacuumEnv,
    "synthetic-aim": SyntheticAimEnv,
    "cartpole": CartpoleEnv,
}

_TRUTHS = {
    "vacuum": _VACUUM_TRUTH,
    "synthetic-aim": _SYNTH_TRUTH,
    "cartpole": _CARTPOLE_TRUTH,
}


def make_env(name: str, seed: int | None = None) -> Env:
    if name not in _ENVS:
        raise KeyError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    return _ENVS[name](seed)


def env_schema(name: str) -> EnvSchema:
    if name not in _ENVS:
        raise KeyError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    return _ENVS[name].schema


def ground_truth(name: str) -> GroundTruth:
    if name not in _TRUTHS:
        raise KeyError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    return _TRUTHS[name]


# ---------------------------------------------------------------------------
# Collection helpers.

Policy = Callable[[ValueMap, np.random.Generator], ValueMap]


def uniform_random_policy(schema: EnvSchema) -> Policy:
    def policy(state: ValueMap, rng: np.random.Generator) -> ValueMap:
        action: ValueMap = {}
        for v in schema.action_vars:
            if isinstance(v.kind, Categorical):
                action[v.name] = int(rng.integers(0, v.kind.n))
            elif isinstance(v.kind, Boolean):
                action[v.name] = bool(rng.integers(0, 2))
            else:
                lo = v.kind.lo if np.isfinite(v.kind.lo) else -1.0
                hi = v.kind.hi if np.isfinite(v.kind.hi) else 1.0
                action[v.name] = float(rng.uniform(lo, hi))
        return action

    return policy


def collect_steps(
    env: Env,
    policy: Policy,
    n_steps: int,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    reset_seed_stream: np.random.Generator | None = None,
) -> None:
    """Drive the environment for ``n_steps`` transitions, resetting at
    episode boundaries, and append everything to the buffer."""
    seeds = reset_seed_stream or rng
    if env._state is None or env.finished:
        env.reset(int(seeds.integers(0, 2**31 - 1)))
    for _ in range(n_steps):
        action = policy(env.state, rng)
        t = env.step(action)
        buffer.append(t, truncated=env.truncated)
        if env.finished:
            env.reset(int(seeds.integers(0, 2**31 - 1)))
