"""Scripted studies: the action-influence recovery benchmark (direct
splitting vs full-graph attention vs causal-graph attention), the
spurious-edge chain probe, and the threshold sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chains import GroundTruthAim, build_extended_graph, extract_chain, simulate
from .discovery import (
    CausalGraph,
    CitConfig,
    discover_graph,
    empty_graph,
    full_graph,
    graph_from_parents,
    rethreshold,
)
from .envs import GroundTruth, collect_steps, ground_truth, make_env
from .fmdp import Categorical, ReplayBuffer, ValueMap
from .scm import InferenceEnsemble, fit

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data collection with episode-drifting action probabilities.  Early steps
# favor low actions, late steps high ones, so slow state variables end up
# correlated with everything that accumulates over the episode.

def drifting_policy(schema, step_limit: int):
    spec = schema.action_vars[0]
    n = spec.kind.n if isinstance(spec.kind, Categorical) else 2
    state = {"step": 0}

    def policy(s: ValueMap, rng: np.random.Generator) -> ValueMap:
        frac = min(state["step"] / max(step_limit - 1, 1), 1.0)
        state["step"] = (state["step"] + 1) % step_limit
        weights = np.array([(1.0 - frac) if i < n / 2 else frac for i in range(n)]) + 0.25
        weights /= weights.sum()
        return {spec.name: int(rng.choice(n, p=weights))}

    return policy


def collect_benchmark_buffer(env_name: str, n: int, seed: int,
                             policy: str = "drifting") -> ReplayBuffer:
    env = make_env(env_name)
    buf = ReplayBuffer(env.schema, capacity=max(n, 1))
    rng = np.random.default_rng(seed)
    if policy == "drifting":
        pol = drifting_policy(env.schema, env.step_limit)
    else:
        from .envs import uniform_random_policy

        pol = uniform_random_policy(env.schema)
    collect_steps(env, pol, n, buf, rng)
    return buf


# ---------------------------------------------------------------------------
# Benchmark result.

@dataclass
class AimBenchmarkResult:
    mode: str  # direct | full+attn | caus+attn
    seed: int
    n_samples: int
    accuracy: float
    decisions: list[tuple[int, str, str, bool, bool]]  # (action, output, parent, predicted, truth)
    insufficient_actions: list[int] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [
            {"mode": self.mode, "seed": self.seed, "action": a, "output": o,
             "parent": p, "predicted": int(pred), "truth": int(tr)}
            for (a, o, p, pred, tr) in self.decisions
        ]


def aim_accuracy(predicted: dict[int, dict[str, frozenset[str]]], truth: GroundTruth,
                 state_names: list[str], outputs: list[str], mode: str, seed: int,
                 n_samples: int, insufficient: list[int] | None = None) -> AimBenchmarkResult:
    """Score every (action, output, candidate parent) triple against the
    ground-truth table; accuracy counts correct presence and absence."""
    decisions = []
    correct = 0
    total = 0
    insufficient = insufficient or []
    for (a, out), true_parents in truth.aim_parents.items():
        if a in insufficient:
            continue
        for s in state_names:
            pred = s in predicted.get(a, {}).get(out, frozenset())
            tr = s in true_parents
            decisions.append((a, out, s, pred, tr))
            correct += pred == tr
            total += 1
    acc = correct / total if total else float("nan")
    return AimBenchmarkResult(mode, seed, n_samples, acc, decisions, insufficient)


# ---------------------------------------------------------------------------
# The three recovery modes.

def direct_aim(buffer: ReplayBuffer, eta: float, cfg: CitConfig | None = None,
               seed: int = 0) -> tuple[dict[int, dict[str, frozenset[str]]], list[int]]:
    """Split the buffer by action value and run causal discovery per
    partition (state inputs only: the action is constant within one)."""
    cfg = cfg or CitConfig()
    schema = buffer.schema
    action_vars = schema.action_vars
    if len(action_vars) != 1 or not isinstance(action_vars[0].kind, Categorical):
        raise ValueError("direct recovery needs a single discrete action variable")
    name = action_vars[0].name
    n_actions = action_vars[0].kind.n
    state_names = schema.names("state")
    per_action: dict[int, dict[str, frozenset[str]]] = {}
    insufficient: list[int] = []
    for a in range(n_actions):
        part = ReplayBuffer(schema, capacity=max(len(buffer), 1))
        part._records = [r for r in buffer.snapshot() if int(r.transition.a[name]) == a]
        if len(part) < cfg.min_samples:
            insufficient.append(a)
            continue
        graph = discover_graph(part, eta, cfg, seed=seed * 31 + a, input_names=state_names)
        per_action[a] = {v: frozenset(graph.parents[v]) for v in graph.outputs}
    return per_action, insufficient


def attention_aim(buffer: ReplayBuffer, graph: CausalGraph, tau: float,
                  seed: int, n_members: int = 5, steps: int = 3000,
                  batch_size: int = 256, lr: float = 1e-3,
                  ensemble: InferenceEnsemble | None = None
                  ) -> tuple[dict[int, dict[str, frozenset[str]]], InferenceEnsemble]:
    """Fit the inference ensemble on the given graph, then read per-action
    salient parents from the averaged influence weights."""
    schema = buffer.schema
    if ensemble is None:
        ensemble = InferenceEnsemble(schema, graph, n_members=n_members, seed=seed)
        fit(ensemble, buffer, graph, steps=steps, batch_size=batch_size, lr=lr,
            lr_final=lr * 0.01)
    spec = schema.action_vars[0]
    n_actions = spec.kind.n if isinstance(spec.kind, Categorical) else 2
    per_action = {}
    for a in range(n_actions):
        view = ensemble.to_aim({spec.name: a}, tau)
        per_action[a] = dict(view.salient)
    return per_action, ensemble


@dataclass
class BenchmarkRun:
    results: list[AimBenchmarkResult]
    ensembles: dict[tuple[str, int], InferenceEnsemble] = field(default_factory=dict)

    def median_accuracy(self, mode: str) -> float:
        vals = [r.accuracy for r in self.results if r.mode == mode]
        return float(np.median(vals)) if vals else float("nan")


def run_benchmark(
    modes: list[str],
    n_samples: int = 20000,
    eta: float = 0.05,
    tau: float = 0.1,
    seeds: list[int] | None = None,
    env_name: str = "synthetic-aim",
    cit: CitConfig | None = None,
    fit_steps: int = 3000,
    n_members: int = 5,
    keep_ensembles: bool = False,
) -> BenchmarkRun:
    """Collect non-i.i.d. data with the drifting policy and score every
    requested mode on the same buffers."""
    seeds = seeds if seeds is not None else [0, 1, 2, 3, 4]
    truth = ground_truth(env_name)
    schema = make_env(env_name).schema
    state_names = schema.names("state")
    outputs = schema.output_names()
    run = BenchmarkRun([])
    for seed in seeds:
        buf = collect_benchmark_buffer(env_name, n_samples, seed=9000 + seed)
        for mode in modes:
            if mode == "direct":
                per_action, insufficient = direct_aim(buf, eta, cit, seed=seed)
                result = aim_accuracy(per_action, truth, state_names, outputs,
                                      mode, seed, n_samples, insufficient)
            elif mode in ("full+attn", "caus+attn"):
                if mode == "caus+attn":
                    graph = discover_graph(buf, eta, cit, seed=seed)
                else:
                    graph = full_graph(schema, eta)
                per_action, ensemble = attention_aim(
                    buf, graph, tau, seed=seed, n_members=n_members, steps=fit_steps)
                result = aim_accuracy(per_action, truth, state_names, outputs,
                                      mode, seed, n_samples)
                if keep_ensembles:
                    run.ensembles[(mode, seed)] = ensemble
            else:
                raise ValueError(f"unknown mode {mode!r}")
            log.info("benchmark %s seed %d: accuracy %.3f", mode, seed, result.accuracy)
            run.results.append(result)
    return run


def write_benchmark_csv(path: str | Path, run: BenchmarkRun) -> None:
    rows = []
    for r in run.results:
        rows.extend(r.to_rows())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "seed", "action", "output",
                                                "parent", "predicted", "truth"])
        writer.writeheader()
        writer.writerows(rows)


def write_benchmark_summary(path: str | Path, run: BenchmarkRun) -> None:
    modes = sorted({r.mode for r in run.results})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "median_accuracy", "mean_accuracy", "seeds"])
        for mode in modes:
            vals = [r.accuracy for r in run.results if r.mode == mode]
            writer.writerow([mode, f"{np.median(vals):.4f}", f"{np.mean(vals):.4f}", len(vals)])


# ---------------------------------------------------------------------------
# Spurious-edge chain probe: does a chain from the full-graph model contain
# edges absent from the ground truth, and does the causal-graph model's not?

def spurious_chain_edges(ensemble: InferenceEnsemble, truth: GroundTruth,
                         start: ValueMap, action: ValueMap, horizon: int,
                         tau: float) -> list[tuple[str, str]]:
    """Attention edges in the chain whose (state parent -> output) pair is
    not in the ground-truth union graph."""
    schema = ensemble.schema

    class _ModePolicy:
        def mode_action(self, state):
            return dict(action)

    traj = simulate(ensemble, _ModePolicy(), start, action, horizon)
    graph = build_extended_graph(traj, ensemble, tau)
    chain = extract_chain(graph, ())
    reward_names = set(schema.reward_names())
    bad = []
    for (src, dst) in chain.edges:
        if dst[0] in reward_names:
            continue
        src_name, src_step = src
        dst_name, dst_step = dst
        output = dst_name + "'" if dst_step == src_step + 1 else dst_name
        if src_name not in truth.union_parents.get(output, frozenset()):
            bad.append((src_name, output))
    return bad


# ---------------------------------------------------------------------------
# Threshold sweep.

@dataclass
class SweepRow:
    eta: float
    edges: int
    holdout_ll: float


def threshold_sweep(buffer: ReplayBuffer, etas: list[float],
                    base_graph: CausalGraph | None = None,
                    cit: CitConfig | None = None, seed: int = 0,
                    fit_steps: int = 0, n_members: int = 1) -> list[SweepRow]:
    """Edge count and (optionally) post-fit held-out log-likelihood per
    threshold, reusing one set of p-values for the whole sweep."""
    graph = base_graph or discover_graph(buffer, max(etas), cit, seed=seed)
    rows = []
    for eta in etas:
        g = rethreshold(graph, eta)
        ll = float("nan")
        if fit_steps > 0:
            ensemble = InferenceEnsemble(buffer.schema, g, n_members=n_members, seed=seed)
            metrics = fit(ensemble, buffer, g, steps=fit_steps)
            ll = metrics.total_holdout_ll()
        rows.append(SweepRow(eta, g.edge_count(), ll))
    return rows


def write_sweep_csv(path: str | Path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eta", "edges", "holdout_ll"])
        for r in rows:
            writer.writerow([f"{r.eta:.6g}", r.edges, f"{r.holdout_ll:.6g}"])
