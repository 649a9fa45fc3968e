"""Attention-based structural equations over a discovered causal graph.

Per output variable the model encodes each parent, turns the action
encodings into a query via a GRU, and mixes per-parent contribution vectors
by attention in which the action holds a fixed unit logit.  The attention
weights measure how much each state parent influences the output under the
given action, which is what converts the single SCM into a per-action view.

Members of a bootstrap ensemble never share parameters; within one member
the variable encoders and the per-state-variable key vectors are shared by
all outputs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ndiff as nd
from .discovery import CausalGraph
from .fmdp import (
    Boolean,
    Categorical,
    Continuous,
    EnvSchema,
    ReplayBuffer,
    TransitionTuple,
    ValueMap,
    schema_digest,
    unprimed,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ScmHyperparams:
    embed_dim: int = 64
    key_dim: int = 32
    gru_hidden: int = 64
    decoder_hidden: int = 64
    logvar_min: float = -10.0
    logvar_max: float = 4.0

    def to_dict(self) -> dict:
        return dict(vars(self))


# ---------------------------------------------------------------------------
# Distribution containers.

@dataclass(frozen=True)
class NormalParams:
    mean: float
    var: float

    def mode(self):
        return self.mean

    def sample(self, rng: np.random.Generator):
        return float(rng.normal(self.mean, math.sqrt(self.var)))

    def to_dict(self):
        return {"kind": "normal", "mean": self.mean, "var": self.var}


@dataclass(frozen=True)
class CategoricalParams:
    probs: tuple[float, ...]

    def mode(self):
        return int(np.argmax(self.probs))

    def sample(self, rng: np.random.Generator):
        return int(rng.choice(len(self.probs), p=np.asarray(self.probs) / sum(self.probs)))

    def to_dict(self):
        return {"kind": "categorical", "probs": list(self.probs)}


DistParams = NormalParams | CategoricalParams


@dataclass
class ActivationTrace:
    """Intermediate activations of one posterior prediction."""

    encodings: dict[str, np.ndarray]
    contributions: dict[str, np.ndarray]
    action_contribution: np.ndarray
    action_embedding: np.ndarray
    query: np.ndarray
    influence: dict[str, float]  # state parents plus "action"
    hidden: np.ndarray
    params: DistParams


@dataclass(frozen=True)
class AimView:
    """Per-action view: state parents whose influence weight clears tau."""

    action: ValueMap
    tau: float
    salient: dict[str, frozenset[str]]
    influence: dict[str, dict[str, float]]

    def parents_of(self, output: str) -> frozenset[str]:
        return self.salient[output]


# ---------------------------------------------------------------------------
# Encoders: one per input variable, shared by all outputs of a member.

class ContinuousEncoder(nd.Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.lift = nd.Linear(1, dim, rng)
        self.mu = 0.0
        self.sigma = 1.0

    def set_stats(self, mu: float, sigma: float) -> None:
        self.mu = float(mu)
        self.sigma = float(sigma) if sigma > 1e-8 else 1.0

    def __call__(self, values: np.ndarray) -> nd.Tensor:
        x = (np.asarray(values, dtype=np.float64)[:, None] - self.mu) / self.sigma
        return self.lift(nd.Tensor(x))


class DiscreteEncoder(nd.Module):
    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        self.table = nd.Embedding(n_classes, dim, rng)

    def __call__(self, values: np.ndarray) -> nd.Tensor:
        return self.table(np.asarray(values, dtype=np.int64))


def _make_encoder(kind, dim: int, rng: np.random.Generator):
    if isinstance(kind, Continuous):
        return ContinuousEncoder(dim, rng)
    if isinstance(kind, Categorical):
        return DiscreteEncoder(kind.n, dim, rng)
    return DiscreteEncoder(2, dim, rng)


class InferenceNet(nd.Module):
    """Projections, GRU, and decoder owned by a single output variable."""

    def __init__(self, output: str, kind, hyper: ScmHyperparams, rng: np.random.Generator):
        self.output = output
        self.kind = kind
        self.state_proj = nd.Linear(hyper.embed_dim, hyper.embed_dim, rng)
        self.gru = nd.GruCell(hyper.embed_dim, hyper.gru_hidden, rng)
        self.query_proj = nd.Linear(hyper.gru_hidden, hyper.key_dim, rng)
        self.action_proj = nd.Linear(hyper.gru_hidden, hyper.embed_dim, rng)
        out_dim = 2 if isinstance(kind, Continuous) else (kind.n if isinstance(kind, Categorical) else 2)
        self.decoder = nd.Mlp([hyper.embed_dim, hyper.decoder_hidden, out_dim], rng)
        # standardization of the continuous target (identity until fit)
        self.target_mu = 0.0
        self.target_sigma = 1.0

    def set_target_stats(self, mu: float, sigma: float) -> None:
        self.target_mu = float(mu)
        self.target_sigma = float(sigma) if sigma > 1e-8 else 1.0


class MemberModel:
    """One ensemble member: shared encoders and keys plus per-output nets.

    Parent sets are read from the current graph at forward time, so a graph
    update rewires the inputs without touching any parameters.
    """

    def __init__(self, schema: EnvSchema, graph: CausalGraph, hyper: ScmHyperparams,
                 seed: int):
        self.schema = schema
        self.graph = graph
        self.hyper = hyper
        rng = np.random.default_rng(seed)
        self.encoders: dict[str, nd.Module] = {
            name: _make_encoder(schema.var(name).kind, hyper.embed_dim, rng)
            for name in schema.input_names()
        }
        # keys stored as (key_dim, 1) columns so the query dot product is a matmul
        self.keys: dict[str, nd.Tensor] = {
            name: nd.Tensor(rng.standard_normal((hyper.key_dim, 1)) / math.sqrt(hyper.key_dim),
                            requires_grad=True)
            for name in schema.names("state")
        }
        self.nets: dict[str, InferenceNet] = {
            out: InferenceNet(out, schema.output_kind(out), hyper, rng)
            for out in schema.output_names()
        }
        self._state_names = set(schema.names("state"))
        self._action_names = set(schema.names("action"))

    def set_graph(self, graph: CausalGraph) -> None:
        self.graph = graph

    def named_params(self) -> dict[str, nd.Tensor]:
        out: dict[str, nd.Tensor] = {}
        for name, enc in self.encoders.items():
            out.update(enc.named_params(f"enc/{name}"))
        for name, key in self.keys.items():
            out[f"key/{name}"] = key
        for name, net in self.nets.items():
            out.update(net.named_params(f"net/{name}"))
        return out

    def split_parents(self, output: str) -> tuple[list[str], list[str]]:
        ordered = self.graph.parent_list(output)
        return (
            [u for u in ordered if u in self._state_names],
            [u for u in ordered if u in self._action_names],
        )

    # -- forward ------------------------------------------------------------
    #
    # The action embedding, query, and attention weights depend only on the
    # action values, so they are computed once per distinct action row and
    # gathered back onto the batch.  With a handful of discrete actions this
    # removes the GRU and projection matmuls from the batch-size cost.

    def _encode(self, names: Sequence[str], batch: Mapping[str, np.ndarray],
                cache: dict[str, nd.Tensor]) -> None:
        for name in names:
            if name not in cache:
                cache[name] = self.encoders[name](batch[name])

    def _action_rows(self, batch: Mapping[str, np.ndarray], n_rows: int,
                     cache: dict) -> tuple[Mapping[str, np.ndarray], np.ndarray]:
        """Unique action rows and the inverse map onto the batch."""
        if "__action_rows__" in cache:
            return cache["__action_rows__"]
        names = [v.name for v in self.schema.action_vars if v.name in batch]
        if names:
            stacked = np.stack([np.asarray(batch[a]) for a in names], axis=1)
            uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
            rows = {a: uniq[:, i] for i, a in enumerate(names)}
        else:
            rows, inverse = {}, np.zeros(n_rows, dtype=np.int64)
        cache["__action_rows__"] = (rows, inverse.reshape(-1))
        return rows, inverse.reshape(-1)

    def _attention(self, output: str, batch: Mapping[str, np.ndarray],
                   cache: dict, n_rows: int):
        """Contributions and attention weights for one output over a batch.

        Returns (state_parents, contributions, action contribution rows,
        weight rows with the action in column 0, inverse row map, action
        embedding rows, query rows); rows are per distinct action.
        """
        net = self.nets[output]
        state_parents, action_parents = self.split_parents(output)
        self._encode(state_parents, batch, cache)
        rows, inverse = self._action_rows(batch, n_rows, cache)
        act_cache = cache.setdefault("__action_enc__", {})
        for name in action_parents:
            if name not in act_cache:
                act_cache[name] = self.encoders[name](rows[name])
        n_uniq = len(next(iter(rows.values()))) if rows else 1
        embed = net.gru.run([act_cache[a] for a in action_parents], n_uniq)
        query = net.query_proj(embed)
        action_contrib = net.action_proj(embed)
        contribs = {s: net.state_proj(cache[s]) for s in state_parents}
        logits = [nd.Tensor(np.zeros((n_uniq, 1)))]  # the action's fixed unit logit
        for s in state_parents:
            logits.append(nd.matmul(query, self.keys[s]))
        weights = nd.softmax(nd.concat(logits, axis=1), axis=1)
        return state_parents, contribs, action_contrib, weights, inverse, embed, query

    def _hidden(self, state_parents, contribs, action_contrib, weights, inverse) -> nd.Tensor:
        weight_rows = nd.gather_rows(weights, inverse)
        hidden = nd.slice_cols(weight_rows, 0, 1) * nd.gather_rows(action_contrib, inverse)
        for i, s in enumerate(state_parents):
            hidden = hidden + nd.slice_cols(weight_rows, i + 1, i + 2) * contribs[s]
        return hidden

    def forward_output(self, output: str, batch: Mapping[str, np.ndarray],
                       cache: dict | None = None) -> nd.Tensor:
        """Raw decoder outputs (pre-head) for one output over a batch."""
        cache = cache if cache is not None else {}
        n_rows = len(next(iter(batch.values())))
        state_parents, contribs, action_contrib, weights, inverse, _, _ = self._attention(
            output, batch, cache, n_rows)
        hidden = self._hidden(state_parents, contribs, action_contrib, weights, inverse)
        return self.nets[output].decoder(hidden)

    def log_prob(self, output: str, raw: nd.Tensor, targets: np.ndarray) -> nd.Tensor:
        """Per-sample log-likelihood column for decoded outputs."""
        net = self.nets[output]
        if isinstance(net.kind, Continuous):
            mean = nd.slice_cols(raw, 0, 1)
            logvar = nd.clip(nd.slice_cols(raw, 1, 2), self.hyper.logvar_min, self.hyper.logvar_max)
            x = (np.asarray(targets, dtype=np.float64)[:, None] - net.target_mu) / net.target_sigma
            err = nd.Tensor(x) - mean
            ll = (nd.exp(-logvar) * err * err + logvar + LOG_2PI) * -0.5
            return ll - math.log(net.target_sigma)
        logp = nd.log_softmax(raw, axis=1)
        return nd.pick_cols(logp, np.asarray(targets, dtype=np.int64))

    def decode(self, output: str, raw_row: np.ndarray) -> DistParams:
        net = self.nets[output]
        if isinstance(net.kind, Continuous):
            mean = float(raw_row[0]) * net.target_sigma + net.target_mu
            logvar = float(np.clip(raw_row[1], self.hyper.logvar_min, self.hyper.logvar_max))
            var = math.exp(logvar) * net.target_sigma**2
            return NormalParams(mean, var)
        z = raw_row - np.max(raw_row)
        p = np.exp(z)
        p = p / p.sum()
        return CategoricalParams(tuple(float(v) for v in p))

    def influence_weights(self, action: ValueMap) -> dict[str, dict[str, float]]:
        """Attention weights per output under one action; keys are the state
        parents plus "action".  These depend only on the action values."""
        batch = {name: np.array([action[name]]) for name in self._action_names}
        out: dict[str, dict[str, float]] = {}
        enc_cache: dict[str, nd.Tensor] = {}
        for output in self.graph.outputs:
            net = self.nets[output]
            state_parents, action_parents = self.split_parents(output)
            for name in action_parents:
                if name not in enc_cache:
                    enc_cache[name] = self.encoders[name](batch[name])
            embed = net.gru.run([enc_cache[a] for a in action_parents], 1)
            query = net.query_proj(embed)
            logits = [nd.Tensor(np.zeros((1, 1)))]
            for s in state_parents:
                logits.append(nd.matmul(query, self.keys[s]))
            alpha = nd.softmax(nd.concat(logits, axis=1), axis=1).data[0]
            weights = {"action": float(alpha[0])}
            for i, s in enumerate(state_parents):
                weights[s] = float(alpha[i + 1])
            out[output] = weights
        return out

    def predict(self, output: str, inputs: ValueMap) -> tuple[DistParams, ActivationTrace]:
        """Posterior prediction for one output from a single value map."""
        state_parents, action_parents = self.split_parents(output)
        missing = [u for u in state_parents + action_parents if u not in inputs]
        if missing:
            raise KeyError(f"missing parent values for {output}: {missing}")
        batch = {u: np.array([inputs[u]]) for u in set(state_parents) | set(action_parents)}
        cache: dict = {}
        sp, contribs, action_contrib, weights, inverse, embed, query = self._attention(
            output, batch, cache, 1)
        hidden = self._hidden(sp, contribs, action_contrib, weights, inverse)
        raw = self.nets[output].decoder(hidden)
        params = self.decode(output, raw.data[0])
        alpha = weights.data[0]
        influence = {"action": float(alpha[0])}
        influence.update({s: float(alpha[i + 1]) for i, s in enumerate(sp)})
        encodings = {k: v.data[0].copy() for k, v in cache.items()
                     if isinstance(v, nd.Tensor)}
        encodings.update({k: v.data[0].copy()
                          for k, v in cache.get("__action_enc__", {}).items()})
        trace = ActivationTrace(
            encodings=encodings,
            contributions={s: contribs[s].data[0].copy() for s in sp},
            action_contribution=action_contrib.data[0].copy(),
            action_embedding=embed.data[0].copy(),
            query=query.data[0].copy(),
            influence=influence,
            hidden=hidden.data[0].copy(),
            params=params,
        )
        return params, trace


def predict_posterior(member: MemberModel, output: str, inputs: ValueMap):
    return member.predict(output, inputs)


def log_likelihood(member: MemberModel, transitions: Sequence[TransitionTuple]) -> float:
    """Mean over the batch of the summed per-output log-likelihoods."""
    if not transitions:
        raise ValueError("batch must be non-empty")
    batch, targets = _batch_arrays(member.schema, transitions)
    total = 0.0
    cache: dict = {}
    for output in member.graph.outputs:
        raw = member.forward_output(output, batch, cache)
        ll = member.log_prob(output, raw, targets[output])
        total += float(np.mean(ll.data, dtype=np.float64))
    return total


def _batch_arrays(schema: EnvSchema, transitions: Sequence[TransitionTuple]):
    inputs: dict[str, np.ndarray] = {}
    for name in schema.names("state"):
        inputs[name] = np.array([t.s[name] for t in transitions], dtype=np.float64)
    for name in schema.names("action"):
        inputs[name] = np.array([t.a[name] for t in transitions], dtype=np.float64)
    targets: dict[str, np.ndarray] = {}
    for name in schema.names("state"):
        targets[name + "'"] = np.array([t.s_next[name] for t in transitions], dtype=np.float64)
    for name in schema.names("outcome"):
        targets[name] = np.array([t.o[name] for t in transitions], dtype=np.float64)
    return inputs, targets


# ---------------------------------------------------------------------------
# Ensemble.

class InferenceEnsemble:
    """Bootstrap ensemble of independently initialized members."""

    def __init__(self, schema: EnvSchema, graph: CausalGraph,
                 hyper: ScmHyperparams | None = None, n_members: int = 5,
                 seed: int = 0):
        self.schema = schema
        self.graph = graph
        self.hyper = hyper or ScmHyperparams()
        self.seed = seed
        seqs = np.random.SeedSequence(seed).spawn(n_members)
        self.members = [
            MemberModel(schema, graph, self.hyper, int(s.generate_state(1)[0]))
            for s in seqs
        ]
        self.train_steps = 0

    @property
    def n_members(self) -> int:
        return len(self.members)

    def set_graph(self, graph: CausalGraph) -> None:
        self.graph = graph
        for m in self.members:
            m.set_graph(graph)

    def stats(self) -> dict:
        member = self.members[0]
        input_stats = {}
        for name, enc in member.encoders.items():
            if isinstance(enc, ContinuousEncoder):
                input_stats[name] = [enc.mu, enc.sigma]
        target_stats = {}
        for name, net in member.nets.items():
            if isinstance(net.kind, Continuous):
                target_stats[name] = [net.target_mu, net.target_sigma]
        return {"inputs": input_stats, "targets": target_stats}

    def set_stats(self, stats: dict) -> None:
        for m in self.members:
            for name, (mu, sigma) in stats.get("inputs", {}).items():
                enc = m.encoders[name]
                if isinstance(enc, ContinuousEncoder):
                    enc.set_stats(mu, sigma)
            for name, (mu, sigma) in stats.get("targets", {}).items():
                m.nets[name].set_target_stats(mu, sigma)

    # -- prediction ---------------------------------------------------------

    def to_aim(self, action: ValueMap, tau: float) -> AimView:
        """Average influence weights across members, then threshold."""
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        per_member = [m.influence_weights(action) for m in self.members]
        influence: dict[str, dict[str, float]] = {}
        salient: dict[str, frozenset[str]] = {}
        for output in self.graph.outputs:
            keys = per_member[0][output].keys()
            mean = {k: float(np.mean([w[output][k] for w in per_member])) for k in keys}
            influence[output] = mean
            salient[output] = frozenset(
                s for s, a in mean.items() if s != "action" and a > tau
            )
        return AimView(dict(action), tau, salient, influence)

    def member_posteriors(self, state: ValueMap, action: ValueMap) -> list[dict[str, DistParams]]:
        inputs = {**state, **action}
        out = []
        for m in self.members:
            batch = {u: np.array([inputs[u]]) for u in self.schema.input_names()}
            params = {}
            cache: dict = {}
            for output in self.graph.outputs:
                raw = m.forward_output(output, batch, cache)
                params[output] = m.decode(output, raw.data[0])
            out.append(params)
        return out

    def mean_posterior(self, state: ValueMap, action: ValueMap) -> dict[str, DistParams]:
        """Member-averaged distribution parameters."""
        stacks = self.member_posteriors(state, action)
        out: dict[str, DistParams] = {}
        for output in self.graph.outputs:
            ps = [s[output] for s in stacks]
            if isinstance(ps[0], NormalParams):
                out[output] = NormalParams(
                    float(np.mean([p.mean for p in ps])),
                    float(np.mean([p.var for p in ps])),
                )
            else:
                probs = np.mean([p.probs for p in ps], axis=0)
                out[output] = CategoricalParams(tuple(float(v) for v in probs))
        return out

    def _clamp(self, output: str, value: float) -> float:
        kind = self.schema.output_kind(output)
        if isinstance(kind, Continuous):
            return float(np.clip(value, kind.lo, kind.hi))
        return value

    def _outputs_to_maps(self, values: dict[str, float]) -> tuple[ValueMap, ValueMap]:
        s_next: ValueMap = {}
        o: ValueMap = {}
        for name in self.schema.names("state"):
            v = values[name + "'"]
            kind = self.schema.var(name).kind
            s_next[name] = kind.coerce(v)
        for name in self.schema.names("outcome"):
            kind = self.schema.var(name).kind
            o[name] = kind.coerce(values[name])
        return s_next, o

    def sample_next(self, state: ValueMap, action: ValueMap,
                    rng: np.random.Generator) -> tuple[ValueMap, ValueMap]:
        """Draw one member uniformly, then sample every output from it."""
        member = self.members[int(rng.integers(0, len(self.members)))]
        inputs = {**state, **action}
        batch = {u: np.array([inputs[u]]) for u in self.schema.input_names()}
        values: dict[str, float] = {}
        cache: dict = {}
        for output in self.graph.outputs:
            raw = member.forward_output(output, batch, cache)
            params = member.decode(output, raw.data[0])
            values[output] = self._clamp(output, params.sample(rng))
        return self._outputs_to_maps(values)

    def mode_next(self, state: ValueMap, action: ValueMap) -> tuple[ValueMap, ValueMap]:
        """Most-likely transition: member-averaged params, distribution mode."""
        params = self.mean_posterior(state, action)
        values = {out: self._clamp(out, p.mode()) for out, p in params.items()}
        return self._outputs_to_maps(values)

    def sample_next_batch(
        self,
        states: Sequence[ValueMap],
        actions: Sequence[ValueMap],
        rng: np.random.Generator,
    ) -> tuple[list[ValueMap], list[ValueMap]]:
        """Vectorized sampling for rollouts; each row draws its own member."""
        n = len(states)
        inputs = {}
        for name in self.schema.names("state"):
            inputs[name] = np.array([s[name] for s in states], dtype=np.float64)
        for name in self.schema.names("action"):
            inputs[name] = np.array([a[name] for a in actions], dtype=np.float64)
        member_of = rng.integers(0, len(self.members), size=n)
        out_values: dict[str, np.ndarray] = {
            out: np.empty(n, dtype=np.float64) for out in self.graph.outputs
        }
        for m_idx, member in enumerate(self.members):
            rows = np.where(member_of == m_idx)[0]
            if rows.size == 0:
                continue
            batch = {k: v[rows] for k, v in inputs.items()}
            cache: dict = {}
            for output in self.graph.outputs:
                raw = member.forward_output(output, batch, cache).data
                kind = member.nets[output].kind
                if isinstance(kind, Continuous):
                    net = member.nets[output]
                    mean = raw[:, 0] * net.target_sigma + net.target_mu
                    logvar = np.clip(raw[:, 1], self.hyper.logvar_min, self.hyper.logvar_max)
                    std = np.exp(0.5 * logvar) * net.target_sigma
                    vals = rng.normal(mean, std)
                    vals = np.clip(vals, kind.lo, kind.hi)
                else:
                    z = raw - raw.max(axis=1, keepdims=True)
                    p = np.exp(z)
                    p /= p.sum(axis=1, keepdims=True)
                    cum = np.cumsum(p, axis=1)
                    u = rng.random((rows.size, 1))
                    vals = (u > cum).sum(axis=1).astype(np.float64)
                out_values[output][rows] = vals
        s_next_list: list[ValueMap] = []
        o_list: list[ValueMap] = []
        for i in range(n):
            row = {out: float(out_values[out][i]) for out in self.graph.outputs}
            s_next, o = self._outputs_to_maps(row)
            s_next_list.append(s_next)
            o_list.append(o)
        return s_next_list, o_list


# ---------------------------------------------------------------------------
# Training.

@dataclass
class FitMetrics:
    steps: int
    train_loss: float
    holdout_ll: dict[str, float]
    holdout_mse: dict[str, float]
    member_holdout_ll: list[float]

    def total_holdout_ll(self) -> float:
        return float(sum(self.holdout_ll.values()))


def _compute_stats(schema: EnvSchema, transitions: Sequence[TransitionTuple]) -> dict:
    inputs, targets = _batch_arrays(schema, transitions)
    input_stats = {}
    for name in schema.input_names():
        if isinstance(schema.var(name).kind, Continuous):
            col = inputs[name]
            input_stats[name] = [float(col.mean()), float(col.std()) or 1.0]
    target_stats = {}
    for name, col in targets.items():
        if isinstance(schema.output_kind(name), Continuous):
            target_stats[name] = [float(col.mean()), float(col.std()) or 1.0]
    return {"inputs": input_stats, "targets": target_stats}


def fit(
    ensemble: InferenceEnsemble,
    buffer: ReplayBuffer,
    graph: CausalGraph | None = None,
    steps: int = 2000,
    batch_size: int = 256,
    lr: float = 3e-4,
    holdout_fraction: float = 0.1,
    seed: int | None = None,
    lr_final: float | None = None,
) -> FitMetrics:
    """Train every member on its own bootstrap resample of the buffer.

    The learning rate decays geometrically from ``lr`` to ``lr_final``
    (a tenth of ``lr`` by default); near-deterministic outputs need the fine
    final steps to drive the decoded mean onto the exact relation.
    """
    if graph is not None:
        ensemble.set_graph(graph)
    transitions = buffer.transitions()
    n = len(transitions)
    if n < 10:
        raise ValueError("buffer too small to fit")
    rng = np.random.default_rng(ensemble.seed * 7919 + (seed if seed is not None else 0))
    perm = rng.permutation(n)
    n_hold = max(1, int(n * holdout_fraction))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    train = [transitions[i] for i in train_idx]
    holdout = [transitions[i] for i in hold_idx]

    stats = _compute_stats(ensemble.schema, train)
    ensemble.set_stats(stats)

    inputs, targets = _batch_arrays(ensemble.schema, train)
    outputs = list(ensemble.graph.outputs)

    lr_end = lr_final if lr_final is not None else lr * 0.1
    decay = (lr_end / lr) ** (1.0 / max(steps - 1, 1))
    for m_idx, member in enumerate(ensemble.members):
        member_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
        boot = member_rng.integers(0, len(train), size=len(train))
        params = member.named_params()
        optim = nd.Adam(params, lr=lr)
        for step in range(steps):
            optim.lr = lr * decay**step
            idx = boot[member_rng.integers(0, len(boot), size=batch_size)]
            batch = {k: v[idx] for k, v in inputs.items()}
            with nd.Tape(params) as tape:
                loss = nd.Tensor(np.zeros(()))
                cache: dict = {}
                for output in outputs:
                    raw = member.forward_output(output, batch, cache)
                    ll = member.log_prob(output, raw, targets[output][idx])
                    term = -ll.mean()
                    if not np.isfinite(term.data):
                        raise FloatingPointError(
                            f"non-finite loss for output {output!r} at step {step}")
                    loss = loss + term
                grads = nd.backward(tape, loss)
            optim.step(grads)
        ensemble.train_steps += steps

    return evaluate(ensemble, holdout)


def evaluate(ensemble: InferenceEnsemble, transitions: Sequence[TransitionTuple]) -> FitMetrics:
    """Held-out per-output log-likelihood and, for continuous outputs, the
    mean squared error of the decoded mean."""
    batch, targets = _batch_arrays(ensemble.schema, transitions)
    holdout_ll: dict[str, float] = {}
    holdout_mse: dict[str, float] = {}
    member_ll = []
    per_output_member_ll: dict[str, list[float]] = {o: [] for o in ensemble.graph.outputs}
    for member in ensemble.members:
        total = 0.0
        cache: dict = {}
        for output in ensemble.graph.outputs:
            raw = member.forward_output(output, batch, cache)
            ll = float(np.mean(member.log_prob(output, raw, targets[output]).data,
                               dtype=np.float64))
            per_output_member_ll[output].append(ll)
            total += ll
            if isinstance(member.nets[output].kind, Continuous):
                mean = raw.data[:, 0] * member.nets[output].target_sigma + member.nets[output].target_mu
                mse = float(np.mean((mean - targets[output]) ** 2, dtype=np.float64))
                holdout_mse[output] = holdout_mse.get(output, 0.0) + mse / ensemble.n_members
        member_ll.append(total)
    for output, lls in per_output_member_ll.items():
        holdout_ll[output] = float(np.mean(lls))
    return FitMetrics(
        steps=ensemble.train_steps,
        train_loss=float("nan"),
        holdout_ll=holdout_ll,
        holdout_mse=holdout_mse,
        member_holdout_ll=member_ll,
    )


# ---------------------------------------------------------------------------
# Checkpointing.

CHECKPOINT_VERSION = 1


def save_ensemble(directory: str | Path, ensemble: InferenceEnsemble) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = []
    for i, member in enumerate(ensemble.members):
        path = directory / f"member_{i}.params"
        digest = nd.save_params(path, member.named_params())
        blobs.append({"file": path.name, "sha256": digest})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "schema_digest": schema_digest(ensemble.schema),
        "hyperparams": ensemble.hyper.to_dict(),
        "n_members": ensemble.n_members,
        "train_steps": ensemble.train_steps,
        "seed": ensemble.seed,
        "stats": ensemble.stats(),
        "graph": {
            "inputs": list(ensemble.graph.inputs),
            "outputs": list(ensemble.graph.outputs),
            "eta": ensemble.graph.eta,
            "pvalues": [[u, v, p] for (u, v), p in sorted(ensemble.graph.pvalues.items())],
        },
        "blobs": blobs,
    }
    (directory / "ensemble.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest


class CheckpointError(RuntimeError):
    pass


def load_ensemble(directory: str | Path, schema: EnvSchema) -> InferenceEnsemble:
    directory = Path(directory)
    manifest_path = directory / "ensemble.json"
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    if manifest["schema_digest"] != schema_digest(schema):
        raise CheckpointError("schema digest mismatch")
    g = manifest["graph"]
    graph = CausalGraph(
        tuple(g["inputs"]), tuple(g["outputs"]), g["eta"],
        {(u, v): p for u, v, p in g["pvalues"]},
    )
    ensemble = InferenceEnsemble(
        schema, graph, ScmHyperparams(**manifest["hyperparams"]),
        n_members=manifest["n_members"], seed=manifest.get("seed", 0),
    )
    ensemble.train_steps = manifest.get("train_steps", 0)
    ensemble.set_stats(manifest["stats"])
    for i, blob in enumerate(manifest["blobs"]):
        path = directory / blob["file"]
        if not path.exists():
            raise CheckpointError(f"missing parameter blob {path}")
        if nd.file_digest(path) != blob["sha256"]:
            raise CheckpointError(f"digest mismatch for {path}")
        nd.assign_params(ensemble.members[i].named_params(), nd.load_params(path))
    return ensemble
