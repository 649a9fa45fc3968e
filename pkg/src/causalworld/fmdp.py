"""Factorized-MDP data model: variable schemas, reward decomposition,
transition tuples, and the replay buffer every other module consumes.

State variables appear twice in a transition (before and after the step);
the after-value of state variable ``x`` is referred to as ``x'`` wherever a
single namespace is needed (reward dependencies, transition logs, graphs).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Value = float | int | bool
ValueMap = dict[str, Value]

STATE, ACTION, OUTCOME = "state", "action", "outcome"


class DomainError(ValueError):
    """A value does not fit its variable's declared domain."""


@dataclass(frozen=True)
class Continuous:
    lo: float = float("-inf")
    hi: float = float("inf")

    def contains(self, value) -> bool:
        return isinstance(value, (int, float)) and not isinstance(value, bool) \
            and np.isfinite(value) and self.lo <= value <= self.hi

    def coerce(self, value) -> float:
        return float(value)


@dataclass(frozen=True)
class Categorical:
    n: int

    def contains(self, value) -> bool:
        return isinstance(value, (int, np.integer)) and not isinstance(value, bool) \
            and 0 <= value < self.n

    def coerce(self, value) -> int:
        return int(value)


@dataclass(frozen=True)
class Boolean:
    def contains(self, value) -> bool:
        return isinstance(value, (bool, np.bool_))

    def coerce(self, value) -> bool:
        return bool(value)


Kind = Continuous | Categorical | Boolean


@dataclass(frozen=True)
class VarSpec:
    name: str
    role: str  # state | action | outcome
    kind: Kind


def primed(name: str) -> str:
    return name + "'"


def unprimed(name: str) -> str:
    return name[:-1] if name.endswith("'") else name


@dataclass(frozen=True)
class RewardSpec:
    """One reward term. ``depends_on`` names the variables the term reads,
    with ``x'`` meaning the next-step value of state variable ``x``; the
    evaluator receives exactly those values and nothing else."""

    name: str
    depends_on: frozenset[str]
    evaluate: Callable[[Mapping[str, Value]], float]

    def __init__(self, name: str, depends_on: Iterable[str], evaluate):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "depends_on", frozenset(depends_on))
        object.__setattr__(self, "evaluate", evaluate)


@dataclass(frozen=True)
class TerminationRule:
    description: str
    predicate: Callable[[Mapping[str, Value]], bool] | None = None

    def check(self, values: Mapping[str, Value]) -> bool:
        if self.predicate is None:
            return False
        return bool(self.predicate(values))


@dataclass
class EnvSchema:
    vars: tuple[VarSpec, ...]
    rewards: tuple[RewardSpec, ...]
    termination: TerminationRule
    gamma: float = 0.99

    def __init__(self, vars, rewards=(), termination=None, gamma=0.99):
        self.vars = tuple(vars)
        self.rewards = tuple(rewards)
        self.termination = termination or TerminationRule("never")
        self.gamma = float(gamma)
        self._by_name = {v.name: v for v in self.vars}

    def by_role(self, role: str) -> tuple[VarSpec, ...]:
        return tuple(v for v in self.vars if v.role == role)

    @property
    def state_vars(self):
        return self.by_role(STATE)

    @property
    def action_vars(self):
        return self.by_role(ACTION)

    @property
    def outcome_vars(self):
        return self.by_role(OUTCOME)

    def names(self, role: str) -> list[str]:
        return [v.name for v in self.by_role(role)]

    def var(self, name: str) -> VarSpec:
        return self._by_name[name]

    def input_names(self) -> list[str]:
        """Model inputs: state then action variables, in schema order."""
        return self.names(STATE) + self.names(ACTION)

    def output_names(self) -> list[str]:
        """Model outputs: primed next-state names then outcome names."""
        return [primed(n) for n in self.names(STATE)] + self.names(OUTCOME)

    def output_kind(self, output: str) -> Kind:
        base = unprimed(output)
        return self._by_name[base].kind

    def reward_names(self) -> list[str]:
        return [r.name for r in self.rewards]

    def transition_view(self, s, a, s_next, o) -> dict[str, Value]:
        """Flat view of one transition keyed by name / primed name."""
        view: dict[str, Value] = {}
        view.update(s)
        view.update(a)
        view.update({primed(k): v for k, v in s_next.items()})
        view.update(o)
        return view


def validate_schema(schema: EnvSchema) -> list[str]:
    """Collect invariant violations; an empty list means the schema is valid."""
    violations: list[str] = []
    seen: set[str] = set()
    for v in schema.vars:
        if v.name in seen:
            violations.append(f"duplicate name {v.name}")
        seen.add(v.name)
        if v.role not in (STATE, ACTION, OUTCOME):
            violations.append(f"unknown role {v.role} for {v.name}")
        if isinstance(v.kind, Categorical) and v.kind.n < 2:
            violations.append(f"categorical {v.name} needs at least 2 classes")
        if isinstance(v.kind, Continuous) and np.isfinite(v.kind.lo) and np.isfinite(v.kind.hi) \
                and not v.kind.lo < v.kind.hi:
            violations.append(f"continuous {v.name} has lo >= hi")
    if not schema.by_role(STATE):
        violations.append("no state variable")
    if not schema.by_role(ACTION):
        violations.append("no action variable")
    valid_refs = set(seen) | {primed(v.name) for v in schema.by_role(STATE)}
    for r in schema.rewards:
        for dep in r.depends_on:
            if dep not in valid_refs:
                violations.append(f"reward {r.name} depends on unknown variable {dep}")
    if not 0.0 < schema.gamma <= 1.0:
        violations.append(f"gamma {schema.gamma} outside (0, 1]")
    return violations


def check_values(schema: EnvSchema, role: str, values: Mapping[str, Value]) -> None:
    specs = schema.by_role(role)
    expected = {v.name for v in specs}
    got = set(values)
    if expected != got:
        raise DomainError(f"{role} values must cover exactly {sorted(expected)}, got {sorted(got)}")
    for v in specs:
        if not v.kind.contains(values[v.name]):
            raise DomainError(f"value {values[v.name]!r} out of domain for variable {v.name}")


def compute_rewards(schema: EnvSchema, s, a, s_next, o) -> ValueMap:
    """Evaluate every reward term; the overall reward is the sum of the map."""
    check_values(schema, STATE, s)
    check_values(schema, ACTION, a)
    check_values(schema, STATE, s_next)
    check_values(schema, OUTCOME, o)
    view = schema.transition_view(s, a, s_next, o)
    out: ValueMap = {}
    for r in schema.rewards:
        out[r.name] = float(r.evaluate({k: view[k] for k in r.depends_on}))
    return out


@dataclass(frozen=True)
class TransitionTuple:
    s: ValueMap
    a: ValueMap
    s_next: ValueMap
    o: ValueMap
    rewards: ValueMap
    done: bool

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards.values()))

    def view(self, schema: EnvSchema) -> dict[str, Value]:
        return schema.transition_view(self.s, self.a, self.s_next, self.o)


def make_transition(schema: EnvSchema, s, a, s_next, o, done: bool) -> TransitionTuple:
    rewards = compute_rewards(schema, s, a, s_next, o)
    return TransitionTuple(dict(s), dict(a), dict(s_next), dict(o), rewards, bool(done))


@dataclass(frozen=True)
class BufferRecord:
    transition: TransitionTuple
    episode: int
    step: int


class ReplayBuffer:
    """Bounded transition store with oldest-first eviction and episode ids.

    One writer, many readers: ``snapshot()`` returns an immutable view taken
    at call time; records themselves are never mutated.
    """

    def __init__(self, schema: EnvSchema, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.schema = schema
        self.capacity = capacity
        self._records: list[BufferRecord] = []
        self._episode = 0
        self._step = 0
        self._episode_open = False

    def __len__(self) -> int:
        return len(self._records)

    def append(self, t: TransitionTuple, truncated: bool = False) -> None:
        check_values(self.schema, STATE, t.s)
        check_values(self.schema, ACTION, t.a)
        check_values(self.schema, STATE, t.s_next)
        check_values(self.schema, OUTCOME, t.o)
        if set(t.rewards) != set(self.schema.reward_names()):
            raise DomainError("rewards map does not match schema reward names")
        if not self._episode_open:
            self._episode_open = True
            self._step = 0
        self._records.append(BufferRecord(t, self._episode, self._step))
        self._step += 1
        if t.done or truncated:
            self._episode_open = False
            self._episode += 1
        if len(self._records) > self.capacity:
            del self._records[: len(self._records) - self.capacity]

    def end_episode(self) -> None:
        """Close the current episode without a terminal transition (truncation)."""
        if self._episode_open:
            self._episode_open = False
            self._episode += 1

    def snapshot(self) -> tuple[BufferRecord, ...]:
        return tuple(self._records)

    def transitions(self) -> list[TransitionTuple]:
        return [r.transition for r in self._records]

    def column(self, ref: str) -> np.ndarray:
        """Values of one variable (state, action, primed next-state, outcome,
        or reward name) across the buffer, as a float array."""
        recs = self._records
        names = {v.name for v in self.schema.vars}
        if ref in self.schema.reward_names():
            return np.array([r.transition.rewards[ref] for r in recs], dtype=np.float64)
        if ref.endswith("'") and unprimed(ref) in names:
            key = unprimed(ref)
            return np.array([r.transition.s_next[key] for r in recs], dtype=np.float64)
        if ref not in names:
            raise KeyError(f"unknown variable reference {ref!r}")
        spec = self.schema.var(ref)
        if spec.role == STATE:
            return np.array([r.transition.s[ref] for r in recs], dtype=np.float64)
        if spec.role == ACTION:
            return np.array([r.transition.a[ref] for r in recs], dtype=np.float64)
        return np.array([r.transition.o[ref] for r in recs], dtype=np.float64)

    def episodes(self) -> "OrderedDict[int, list[BufferRecord]]":
        out: OrderedDict[int, list[BufferRecord]] = OrderedDict()
        for r in self._records:
            out.setdefault(r.episode, []).append(r)
        return out


# ---------------------------------------------------------------------------
# Serialization: transition log (line-delimited) and schema file.

def _record_to_obj(schema: EnvSchema, rec: BufferRecord) -> OrderedDict:
    t = rec.transition
    obj: OrderedDict = OrderedDict()
    for v in schema.state_vars:
        obj[v.name] = t.s[v.name]
    for v in schema.action_vars:
        obj[v.name] = t.a[v.name]
    for v in schema.state_vars:
        obj[primed(v.name)] = t.s_next[v.name]
    for v in schema.outcome_vars:
        obj[v.name] = t.o[v.name]
    obj["rewards"] = OrderedDict((r.name, t.rewards[r.name]) for r in schema.rewards)
    obj["done"] = t.done
    obj["episode"] = rec.episode
    obj["step"] = rec.step
    return obj


def write_transition_log(path: str | Path, buffer: ReplayBuffer) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in buffer.snapshot():
            fh.write(json.dumps(_record_to_obj(buffer.schema, rec)) + "\n")


def read_transition_log(path: str | Path, schema: EnvSchema, capacity: int | None = None) -> ReplayBuffer:
    buf = ReplayBuffer(schema, capacity or 1_000_000)
    coerce = {v.name: v.kind.coerce for v in schema.vars}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            s = {v.name: coerce[v.name](obj[v.name]) for v in schema.state_vars}
            a = {v.name: coerce[v.name](obj[v.name]) for v in schema.action_vars}
            s_next = {v.name: coerce[v.name](obj[primed(v.name)]) for v in schema.state_vars}
            o = {v.name: coerce[v.name](obj[v.name]) for v in schema.outcome_vars}
            rewards = {k: float(v) for k, v in obj["rewards"].items()}
            t = TransitionTuple(s, a, s_next, o, rewards, bool(obj["done"]))
            # preserve recorded episode boundaries
            buf._records.append(BufferRecord(t, int(obj["episode"]), int(obj["step"])))
    if buf._records:
        last = buf._records[-1]
        buf._episode = last.episode + 1
        buf._episode_open = False
        if len(buf._records) > buf.capacity:
            del buf._records[: len(buf._records) - buf.capacity]
    return buf


def _kind_to_obj(kind: Kind) -> dict:
    if isinstance(kind, Continuous):
        lo = None if not np.isfinite(kind.lo) else kind.lo
        hi = None if not np.isfinite(kind.hi) else kind.hi
        return {"kind": "continuous", "lo": lo, "hi": hi}
    if isinstance(kind, Categorical):
        return {"kind": "categorical", "n": kind.n}
    return {"kind": "boolean"}


def _kind_from_obj(obj: dict) -> Kind:
    k = obj["kind"]
    if k == "continuous":
        lo = obj.get("lo")
        hi = obj.get("hi")
        return Continuous(float("-inf") if lo is None else float(lo),
                          float("inf") if hi is None else float(hi))
    if k == "categorical":
        return Categorical(int(obj["n"]))
    if k == "boolean":
        return Boolean()
    raise ValueError(f"unknown kind {k!r}")


def schema_to_dict(schema: EnvSchema) -> dict:
    return {
        "vars": [
            {"name": v.name, "role": v.role, **_kind_to_obj(v.kind)} for v in schema.vars
        ],
        "rewards": [
            {"name": r.name, "depends_on": sorted(r.depends_on)} for r in schema.rewards
        ],
        "gamma": schema.gamma,
        "termination": schema.termination.description,
    }


def _missing_reward(name: str):
    def evaluate(values):
        raise NotImplementedError(
            f"reward {name!r} was loaded from a schema file and has no evaluator"
        )

    return evaluate


def schema_from_dict(obj: dict) -> EnvSchema:
    """Rebuild a schema from its file form.  Reward evaluators and the
    termination predicate are declarative-only in files; loaded schemas can
    describe logged data but cannot recompute rewards."""
    vars_ = [VarSpec(v["name"], v["role"], _kind_from_obj(v)) for v in obj["vars"]]
    rewards = [
        RewardSpec(r["name"], r["depends_on"], _missing_reward(r["name"]))
        for r in obj.get("rewards", [])
    ]
    term = TerminationRule(obj.get("termination", "never"))
    return EnvSchema(vars_, rewards, term, obj.get("gamma", 0.99))


def save_schema(path: str | Path, schema: EnvSchema) -> None:
    Path(path).write_text(json.dumps(schema_to_dict(schema), indent=2) + "\n", encoding="utf-8")


def load_schema(path: str | Path) -> EnvSchema:
    return schema_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def schema_digest(schema: EnvSchema) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(schema_to_dict(schema), sort_keys=True).encode()).hexdigest()
