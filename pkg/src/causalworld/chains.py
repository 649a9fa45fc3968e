"""Causal-chain analysis: simulate the most-likely trajectory, unroll the
per-action influence views over time, extract the paths that connect the
queried state to target rewards, and distill them into explanations.

Nodes are (name, absolute step) pairs.  The next-state node of step k is
identified with the state node of step k+1, outcomes and rewards sit on the
step that produced them, and actions are not nodes: the action's influence
enters through the per-step salient parent sets and the first-step rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .discovery import CausalGraph, graph_from_parents
from .envs import GroundTruth
from .fmdp import (
    Boolean,
    Categorical,
    EnvSchema,
    TransitionTuple,
    ValueMap,
    make_transition,
    primed,
    unprimed,
)
from .scm import AimView, InferenceEnsemble

Node = tuple[str, int]


@dataclass(frozen=True)
class SimTrajectory:
    """Chained transitions delta^t .. delta^{t+H-1}."""

    start_step: int
    transitions: tuple[TransitionTuple, ...]
    source: str  # "simulated" | "factual"

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    def __post_init__(self):
        for a, b in zip(self.transitions, self.transitions[1:]):
            if a.s_next != b.s:
                raise ValueError("consecutive transitions do not chain")


def _mode_action(policy, state: ValueMap) -> ValueMap:
    if hasattr(policy, "mode_action"):
        return policy.mode_action(state)
    return policy(state)


def simulate(
    ensemble: InferenceEnsemble,
    policy,
    s_t: ValueMap,
    a_t: ValueMap,
    horizon: int,
    start_step: int = 0,
) -> SimTrajectory:
    """Most-likely trajectory: the queried action first, the policy's mode
    action afterwards, each transition the mode of the member-averaged
    posterior.  Stops early when the schema's termination rule fires."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    schema = ensemble.schema
    transitions = []
    state = dict(s_t)
    action = dict(a_t)
    for k in range(horizon):
        s_next, o = ensemble.mode_next(state, action)
        t = make_transition(schema, state, action, s_next, o, False)
        done = schema.termination.check(t.view(schema))
        t = TransitionTuple(t.s, t.a, t.s_next, t.o, t.rewards, done)
        transitions.append(t)
        if done:
            break
        state = s_next
        action = _mode_action(policy, state)
    return SimTrajectory(start_step, tuple(transitions), "simulated")


def factual_trajectory(transitions: Sequence[TransitionTuple], start_step: int = 0) -> SimTrajectory:
    """Wrap recorded transitions; no simulation needed when the factual
    future is available."""
    return SimTrajectory(start_step, tuple(transitions), "factual")


# ---------------------------------------------------------------------------
# Ground-truth injection: anything with .to_aim(action, tau) and .graph can
# drive the chain builder.

class GroundTruthAim:
    """Adapter exposing an analytic ground truth as an AIM source."""

    def __init__(self, truth: GroundTruth, schema: EnvSchema):
        self.truth = truth
        self.schema = schema
        self.graph = graph_from_parents(
            truth.union_parents, schema.input_names(), schema.output_names()
        )

    def to_aim(self, action: ValueMap, tau: float) -> AimView:
        action_value = int(next(iter(action.values())))
        salient = {}
        influence = {}
        for out in self.schema.output_names():
            parents = self.truth.aim_parents[(action_value, out)]
            salient[out] = frozenset(parents) if tau < 1.0 else frozenset()
            influence[out] = {"action": 1.0, **{s: 1.0 for s in parents}}
        return AimView(dict(action), tau, salient, influence)


@dataclass
class NodeInfo:
    kind: str  # state | outcome | reward
    value: object
    prev_value: object = None


@dataclass
class ExtendedGraph:
    """Time-unrolled graph of state, outcome, and reward nodes."""

    schema: EnvSchema
    start_step: int
    horizon: int
    nodes: dict[Node, NodeInfo]
    edges: dict[tuple[Node, Node], float]
    action_trace: tuple[ValueMap, ...]

    def parents_of(self, node: Node) -> list[Node]:
        return [a for (a, b) in self.edges if b == node]


def _output_node(output: str, step: int) -> Node:
    if output.endswith("'"):
        return (unprimed(output), step + 1)
    return (output, step)


def build_extended_graph(traj: SimTrajectory, aim_source, tau: float) -> ExtendedGraph:
    """Unroll the per-step salient parent sets over the trajectory.

    At the first step, outputs whose union parent set contains no action
    variable get no in-edges: they do not react to the action being
    explained, so paths through them would misattribute influence.
    """
    schema = aim_source_schema(aim_source)
    graph: CausalGraph = aim_source.graph
    action_names = set(schema.names("action"))
    t0 = traj.start_step

    nodes: dict[Node, NodeInfo] = {}
    edges: dict[tuple[Node, Node], float] = {}

    def ensure_state_node(name: str, step: int, value, prev) -> Node:
        node = (name, step)
        if node not in nodes:
            nodes[node] = NodeInfo("state", value, prev)
        return node

    for k, t in enumerate(traj.transitions):
        step = t0 + k
        for name in schema.names("state"):
            ensure_state_node(name, step, t.s[name], None if k == 0 else traj.transitions[k - 1].s[name])
            ensure_state_node(name, step + 1, t.s_next[name], t.s[name])
        for name in schema.names("outcome"):
            nodes[(name, step)] = NodeInfo("outcome", t.o[name])
        for r in schema.rewards:
            nodes[(r.name, step)] = NodeInfo("reward", t.rewards[r.name])

        aim = aim_source.to_aim(t.a, tau)
        for output in graph.outputs:
            if k == 0 and not (set(graph.parents[output]) & action_names):
                continue
            target = _output_node(output, step)
            for s in aim.salient[output]:
                edges[((s, step), target)] = aim.influence[output].get(s, 1.0)
        for r in schema.rewards:
            for dep in r.depends_on:
                if dep in action_names:
                    continue
                if dep.endswith("'"):
                    src = (unprimed(dep), step + 1)
                else:
                    src = (dep, step)
                if src in nodes:
                    edges[(src, (r.name, step))] = 1.0

    return ExtendedGraph(schema, t0, traj.horizon, nodes, edges, tuple(t.a for t in traj.transitions))


def aim_source_schema(aim_source) -> EnvSchema:
    if hasattr(aim_source, "schema"):
        return aim_source.schema
    raise TypeError("aim source must expose .schema")


@dataclass
class CausalChain:
    """Union of all paths from the queried state to the target rewards."""

    schema: EnvSchema
    start_step: int
    horizon: int
    nodes: dict[Node, NodeInfo]
    edges: dict[tuple[Node, Node], float]
    targets: tuple[str, ...]
    action: ValueMap
    action_trace: tuple[ValueMap, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.nodes

    def reward_nodes(self) -> list[Node]:
        return [n for n, info in self.nodes.items() if info.kind == "reward"]

    def parents_of(self, node: Node) -> list[Node]:
        return sorted({a for (a, b) in self.edges if b == node})


def extract_chain(graph: ExtendedGraph, targets: Iterable[str] = ()) -> CausalChain:
    """Forward reachability from the step-t state nodes intersected with
    backward reachability from the target reward nodes."""
    reward_names = set(graph.schema.reward_names())
    targets = tuple(targets) if targets else tuple(graph.schema.reward_names())
    unknown = set(targets) - reward_names
    if unknown:
        raise KeyError(f"unknown reward targets: {sorted(unknown)}")

    succ: dict[Node, list[Node]] = {}
    pred: dict[Node, list[Node]] = {}
    for (a, b) in graph.edges:
        succ.setdefault(a, []).append(b)
        pred.setdefault(b, []).append(a)

    sources = [(s, graph.start_step) for s in graph.schema.names("state")]
    forward: set[Node] = set()
    stack = [n for n in sources if n in graph.nodes]
    while stack:
        n = stack.pop()
        if n in forward:
            continue
        forward.add(n)
        stack.extend(succ.get(n, ()))

    target_nodes = [n for n, info in graph.nodes.items()
                    if info.kind == "reward" and n[0] in targets]
    backward: set[Node] = set()
    stack = [n for n in target_nodes if n in forward]
    while stack:
        n = stack.pop()
        if n in backward:
            continue
        backward.add(n)
        stack.extend(p for p in pred.get(n, ()) if p in forward)

    keep = forward & backward
    nodes = {n: graph.nodes[n] for n in keep}
    edges = {(a, b): w for (a, b), w in graph.edges.items() if a in keep and b in keep}
    action = graph.action_trace[0] if graph.action_trace else {}
    return CausalChain(graph.schema, graph.start_step, graph.horizon,
                       nodes, edges, targets, dict(action), graph.action_trace)


# ---------------------------------------------------------------------------
# Explanans.

@dataclass(frozen=True)
class Entry:
    name: str
    step: int
    value: object
    prev_value: object
    kind: str

    @property
    def key(self) -> tuple[str, int]:
        return (self.name, self.step)


@dataclass
class Explanan:
    """Explanation record: target rewards, heading state variables, and the
    intermediate variables connecting them."""

    rewards: list[Entry]
    heading: list[Entry]
    intermediates: list[Entry]
    action: ValueMap
    start_step: int
    complete: bool = False

    @property
    def empty(self) -> bool:
        return not self.rewards

    def entries(self) -> list[Entry]:
        return self.heading + self.intermediates + self.rewards


def _entry(chain: CausalChain, node: Node) -> Entry:
    info = chain.nodes[node]
    return Entry(node[0], node[1], info.value, info.prev_value, info.kind)


def make_mce(chain: CausalChain) -> Explanan:
    """Minimal form: intermediates are exactly the chain-parents of the
    reward nodes (heading variables excluded)."""
    return _make_explanan(chain, complete=False)


def make_explanan(chain: CausalChain, complete: bool = True) -> Explanan:
    return _make_explanan(chain, complete=complete)


def _make_explanan(chain: CausalChain, complete: bool) -> Explanan:
    if chain.empty:
        return Explanan([], [], [], dict(chain.action), chain.start_step, complete)
    t0 = chain.start_step
    reward_nodes = sorted(chain.reward_nodes(), key=lambda n: (n[1], n[0]))
    heading_nodes = sorted(n for n, info in chain.nodes.items()
                           if info.kind == "state" and n[1] == t0)
    heading_set = set(heading_nodes)
    if complete:
        inter = [n for n in chain.nodes
                 if n not in heading_set and chain.nodes[n].kind != "reward"]
    else:
        inter = set()
        for r in reward_nodes:
            inter.update(p for p in chain.parents_of(r)
                         if p not in heading_set and chain.nodes[p].kind != "reward")
    inter_nodes = sorted(inter, key=lambda n: (n[1], n[0]))
    return Explanan(
        [_entry(chain, n) for n in reward_nodes],
        [_entry(chain, n) for n in heading_nodes],
        [_entry(chain, n) for n in inter_nodes],
        dict(chain.action),
        t0,
        complete,
    )


@dataclass
class Mcce:
    """Contrastive record: entries unique to (or valued differently in) the
    factual explanan, the same for the counterfactual, and the factual
    reward entries."""

    factual_diff: list[Entry]
    counterfactual_diff: list[Entry]
    rewards: list[Entry]
    factual_action: ValueMap
    counterfactual_action: ValueMap

    @property
    def empty(self) -> bool:
        return not self.factual_diff and not self.counterfactual_diff


def _values_equal(a, b, atol: float) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return abs(float(a) - float(b)) <= atol
    return a == b


def make_mcce(factual: Explanan, counterfactual: Explanan, atol: float = 0.0) -> Mcce:
    f_entries = {e.key: e for e in factual.entries()}
    c_entries = {e.key: e for e in counterfactual.entries()}
    f_diff = [e for k, e in sorted(f_entries.items())
              if k not in c_entries or not _values_equal(e.value, c_entries[k].value, atol)]
    c_diff = [e for k, e in sorted(c_entries.items())
              if k not in f_entries or not _values_equal(e.value, f_entries[k].value, atol)]
    return Mcce(f_diff, c_diff, list(factual.rewards),
                dict(factual.action), dict(counterfactual.action))


# ---------------------------------------------------------------------------
# Text rendering.

@dataclass(frozen=True)
class Templates:
    empty: str = "No causal path from this action to the selected rewards was found."
    complete_head: str = "The agent chose {action} because this action causes the following changes:"
    mce_head: str = "The agent chose {action} because this action would eventually cause"
    mcce_head: str = "The agent chose {action} instead of {alt_action}."
    reward_tail: str = "Which leads to {rewards}."
    instantly: str = "Instantly"
    after: str = "After {n} steps"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def format_action(action: ValueMap) -> str:
    return ", ".join(f"{k}={format_value(v)}" for k, v in sorted(action.items()))


def _change_phrase(e: Entry) -> str:
    if e.prev_value is None:
        return f"{e.name} is {format_value(e.value)}"
    if isinstance(e.value, bool):
        return f"{e.name} becomes {format_value(e.value)}"
    if isinstance(e.value, (int, float)) and isinstance(e.prev_value, (int, float)):
        if e.value > e.prev_value:
            verb = "increases"
        elif e.value < e.prev_value:
            verb = "decreases"
        else:
            return f"{e.name} stays at {format_value(e.value)}"
        return f"{e.name} {verb} from {format_value(e.prev_value)} to {format_value(e.value)}"
    return f"{e.name} changes from {format_value(e.prev_value)} to {format_value(e.value)}"


def _step_label(offset: int, templates: Templates) -> str:
    return templates.instantly if offset <= 0 else templates.after.format(n=offset + 1)


def _producing_offset(e: Entry, start_step: int) -> int:
    # state nodes at step j were produced by transition j-1
    if e.kind == "state":
        return e.step - start_step - 1
    return e.step - start_step


def _reward_phrase(rewards: list[Entry], start_step: int, templates: Templates) -> str:
    parts = []
    for e in rewards:
        offset = _producing_offset(e, start_step)
        when = ("instantly" if offset <= 0 else f"after {offset + 1} steps")
        parts.append(f"a reward of {format_value(e.value)} due to {e.name} {when}")
    return " and ".join(parts)


def render_explanan(explanan: Explanan, templates: Templates | None = None) -> str:
    templates = templates or Templates()
    if explanan.empty:
        return templates.empty
    action = format_action(explanan.action)
    if explanan.complete:
        groups: dict[int, list[Entry]] = {}
        for e in explanan.intermediates:
            groups.setdefault(_producing_offset(e, explanan.start_step), []).append(e)
        lines = [templates.complete_head.format(action=action)]
        for i, offset in enumerate(sorted(k for k in groups if k >= 0), start=1):
            phrases = ", and ".join(_change_phrase(e) for e in groups[offset])
            lines.append(f"{i}. {_step_label(offset, templates)}, {phrases}.")
        lines.append(templates.reward_tail.format(
            rewards=_reward_phrase(explanan.rewards, explanan.start_step, templates)))
        return "\n".join(lines)
    changes = ", and ".join(
        f"{_change_phrase(e)} {_step_label(_producing_offset(e, explanan.start_step), templates).lower()}"
        for e in explanan.intermediates
    )
    head = templates.mce_head.format(action=action)
    tail = templates.reward_tail.format(
        rewards=_reward_phrase(explanan.rewards, explanan.start_step, templates))
    if changes:
        return f"{head} {changes}. {tail}"
    return f"{head} the rewards directly. {tail}"


def render_mcce(mcce: Mcce, templates: Templates | None = None) -> str:
    templates = templates or Templates()
    if mcce.empty:
        return "Both actions lead to the same outcome; there is no contrast to explain."
    head = templates.mcce_head.format(
        action=format_action(mcce.factual_action),
        alt_action=format_action(mcce.counterfactual_action),
    )
    lines = [head]
    if mcce.factual_diff:
        phrases = ", and ".join(_change_phrase(e) for e in mcce.factual_diff)
        lines.append(f"With {format_action(mcce.factual_action)}: {phrases}.")
    if mcce.counterfactual_diff:
        phrases = ", and ".join(_change_phrase(e) for e in mcce.counterfactual_diff)
        lines.append(f"Whereas with {format_action(mcce.counterfactual_action)}: {phrases}.")
    if mcce.rewards:
        lines.append(templates.reward_tail.format(
            rewards=_reward_phrase(mcce.rewards, min(e.step for e in mcce.rewards), templates)))
    return "\n".join(lines)


def render_text(obj, templates: Templates | None = None) -> str:
    if isinstance(obj, Explanan):
        return render_explanan(obj, templates)
    if isinstance(obj, Mcce):
        return render_mcce(obj, templates)
    raise TypeError(f"cannot render {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Exports.

def chain_to_node_link(chain: CausalChain, text: str | None = None) -> dict:
    def node_id(n: Node) -> str:
        return f"{n[0]}@{n[1]}"

    nodes = [
        {
            "id": node_id(n),
            "variable": n[0],
            "step": n[1],
            "value": info.value,
            "kind": info.kind,
        }
        for n, info in sorted(chain.nodes.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    ]
    edges = [
        {"source": node_id(a), "target": node_id(b), "weight": w}
        for (a, b), w in sorted(chain.edges.items())
    ]
    return {
        "start_step": chain.start_step,
        "horizon": chain.horizon,
        "action": chain.action,
        "targets": list(chain.targets),
        "nodes": nodes,
        "edges": edges,
        "text": text if text is not None else render_explanan(make_mce(chain)),
    }


def chain_to_dot(chain: CausalChain) -> str:
    lines = ["digraph causal_chain {", "  rankdir=LR;"]
    for n, info in sorted(chain.nodes.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        shape = {"state": "ellipse", "outcome": "diamond", "reward": "box"}[info.kind]
        label = f"{n[0]}\\nt={n[1]}\\n{format_value(info.value)}"
        lines.append(f'  "{n[0]}@{n[1]}" [shape={shape}, label="{label}"];')
    for (a, b), w in sorted(chain.edges.items()):
        lines.append(f'  "{a[0]}@{a[1]}" -> "{b[0]}@{b[1]}" [penwidth={max(0.3, 3.0 * w):.2f}];')
    lines.append("}")
    return "\n".join(lines)
