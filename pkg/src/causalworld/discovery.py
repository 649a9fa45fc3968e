"""Bipartite causal-graph identification from buffered transitions.

Each candidate edge (input u_i, output v_j) is tested by comparing two
cross-fitted predictors of v_j: one over all inputs, one with u_i removed.
A paired one-sided mean comparison of the held-out per-sample losses yields
the p-value; an edge is kept when p < eta.  Conditioning on all remaining
inputs blocks the backdoor paths that policies and history create, so the
recovered parent sets do not depend on the collection policy.

Predictor notes.  When every input is discrete and the joint domain is
small, both sides use the cross-fitted cell-mean table: it is exact, so
deterministic relations produce zero loss on both sides and no spurious
edges.  Otherwise both sides are ridge regressions over the inputs plus
discrete-by-anything interaction features, with a gradient-boosted tree
stage on the residual that is enabled per output only when it
demonstrably improves held-out prediction.  The gate matters: the paired
test cancels sample noise, so when trees add nothing but fitting noise,
the capacity difference between two separately grown ensembles is itself
detected as dependence.  The linear stage also strips wide-range trends;
without it, regressors that bin continuous features let correlated
proxies refine the within-bin position and spurious edges appear.
Standard errors are clustered by episode because per-step losses are
serially dependent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm
from sklearn.ensemble import HistGradientBoostingRegressor
from sklearn.linear_model import Ridge

from .fmdp import Boolean, Categorical, Continuous, EnvSchema, ReplayBuffer

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


@dataclass(frozen=True)
class CitConfig:
    n_trees: int = 50          # boosting rounds of the tree stage
    max_depth: int | None = None
    min_leaf: int = 20
    ridge_alpha: float = 1.0
    folds: int = 3
    min_samples: int = 100
    table_cells_max: int = 4096

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.min_samples < 100:
            raise ValueError("min_samples must be >= 100")


@dataclass(frozen=True)
class CausalGraph:
    """Parent sets for every output, derived purely from stored p-values and
    the threshold eta, so re-thresholding never re-tests."""

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    eta: float
    pvalues: dict[tuple[str, str], float]

    @property
    def parents(self) -> dict[str, frozenset[str]]:
        return {
            v: frozenset(u for u in self.inputs if self.pvalues[(u, v)] < self.eta)
            for v in self.outputs
        }

    def parent_list(self, output: str) -> list[str]:
        """Parents of one output, in input (schema) order."""
        return [u for u in self.inputs if self.pvalues[(u, output)] < self.eta]

    def edge_count(self) -> int:
        return sum(len(p) for p in self.parents.values())


def graph_from_parents(
    parents: dict[str, frozenset[str] | set[str]],
    inputs: list[str] | tuple[str, ...],
    outputs: list[str] | tuple[str, ...] | None = None,
    eta: float = 0.05,
) -> CausalGraph:
    """Build a graph with synthetic p-values (0 for edges, 1 otherwise);
    used for ground-truth injection and for the full/empty baselines."""
    outs = tuple(outputs) if outputs is not None else tuple(parents)
    pvalues = {
        (u, v): (0.0 if u in parents.get(v, frozenset()) else 1.0)
        for v in outs
        for u in inputs
    }
    return CausalGraph(tuple(inputs), outs, eta, pvalues)


def full_graph(schema: EnvSchema, eta: float = 0.05) -> CausalGraph:
    inputs = schema.input_names()
    outputs = schema.output_names()
    return graph_from_parents({v: set(inputs) for v in outputs}, inputs, outputs, eta)


def empty_graph(schema: EnvSchema, eta: float = 0.05) -> CausalGraph:
    inputs = schema.input_names()
    outputs = schema.output_names()
    return graph_from_parents({v: set() for v in outputs}, inputs, outputs, eta)


# ---------------------------------------------------------------------------
# Feature construction.

def _input_block(buffer: ReplayBuffer, name: str) -> np.ndarray:
    """Design-matrix block for one input variable (one-hot for categorical)."""
    kind = buffer.schema.var(name).kind
    col = buffer.column(name)
    if isinstance(kind, Categorical):
        block = np.zeros((col.size, kind.n))
        block[np.arange(col.size), col.astype(int)] = 1.0
        return block
    return col[:, None]


def _target_matrix(buffer: ReplayBuffer, output: str) -> np.ndarray:
    """Target columns: raw value for continuous and boolean, one-hot for
    categorical with 3+ classes (2-class targets need a single column)."""
    kind = buffer.schema.output_kind(output)
    col = buffer.column(output)
    if isinstance(kind, Categorical) and kind.n > 2:
        y = np.zeros((col.size, kind.n))
        y[np.arange(col.size), col.astype(int)] = 1.0
        return y
    return col[:, None]


def _fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def _is_discrete(kind) -> bool:
    return isinstance(kind, (Categorical, Boolean))


def _cardinality(kind) -> int:
    return kind.n if isinstance(kind, Categorical) else 2


class _FeatureSet:
    """Per-variable blocks with interaction features for the linear stage."""

    def __init__(self, buffer: ReplayBuffer, input_names: list[str]):
        self.schema = buffer.schema
        self.names = list(input_names)
        self.blocks = {u: _input_block(buffer, u) for u in input_names}
        self.codes = {u: buffer.column(u).astype(np.int64)
                      for u in input_names if _is_discrete(buffer.schema.var(u).kind)}

    def design(self, keep: list[str], rows: np.ndarray | None = None) -> np.ndarray:
        """Base blocks plus discrete-by-anything interactions, in a fixed
        column layout; ``rows`` restricts to a subset of samples."""
        blocks = {u: (self.blocks[u] if rows is None else self.blocks[u][rows])
                  for u in keep}
        base = [blocks[u] for u in keep]
        inter = []
        for u in keep:
            if _is_discrete(self.schema.var(u).kind):
                bu = blocks[u]
                for w in keep:
                    if w == u:
                        continue
                    for c in range(bu.shape[1]):
                        inter.append(bu[:, c : c + 1] * blocks[w])
        return np.concatenate(base + inter, axis=1)

    def all_discrete(self, keep: list[str]) -> bool:
        return all(_is_discrete(self.schema.var(u).kind) for u in keep)

    def cells(self, keep: list[str]) -> tuple[np.ndarray, int]:
        """Mixed-radix cell ids over the kept discrete variables."""
        n = len(next(iter(self.blocks.values())))
        ids = np.zeros(n, dtype=np.int64)
        radix = 1
        for u in keep:
            ids = ids + self.codes[u] * radix
            radix *= _cardinality(self.schema.var(u).kind)
        return ids, radix


def _table_losses(cells, n_cells, y, folds) -> np.ndarray:
    """Cross-fitted cell-mean predictor; exact on discrete domains."""
    n = y.shape[0]
    loss = np.empty(n)
    all_idx = np.arange(n)
    for test_idx in folds:
        train_idx = np.setdiff1d(all_idx, test_idx)
        counts = np.bincount(cells[train_idx], minlength=n_cells).astype(np.float64)
        pred = np.empty((len(test_idx), y.shape[1]))
        for c in range(y.shape[1]):
            sums = np.bincount(cells[train_idx], weights=y[train_idx, c], minlength=n_cells)
            means = np.divide(sums, counts, out=np.full(n_cells, y[train_idx, c].mean()),
                              where=counts > 0)
            pred[:, c] = means[cells[test_idx]]
        loss[test_idx] = np.sum((pred - y[test_idx]) ** 2, axis=1)
    return loss


TREE_GATE_T = 3.0
TREE_GATE_MIN_GAIN = 1e-3  # fraction of target variance the trees must explain


def _fit_tree(resid, X, cfg: CitConfig, seed: int):
    tree = HistGradientBoostingRegressor(
        max_iter=cfg.n_trees,
        max_depth=cfg.max_depth,
        min_samples_leaf=cfg.min_leaf,
        random_state=seed,
        early_stopping=False,
    )
    tree.fit(X, resid)
    return tree


def _pipeline_losses(features: _FeatureSet, keep: list[str], y, folds,
                     cfg: CitConfig, seed: int, use_tree: bool) -> np.ndarray:
    """Cross-fitted per-sample losses of the ridge(+trees) predictor."""
    n = y.shape[0]
    all_idx = np.arange(n)
    loss = np.empty(n)
    for k, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(all_idx, test_idx)
        if keep:
            X_tr = features.design(keep, rows=train_idx)
            X_te = features.design(keep, rows=test_idx)
        else:
            X_tr = np.zeros((len(train_idx), 1))
            X_te = np.zeros((len(test_idx), 1))
        pred = np.empty((len(test_idx), y.shape[1]))
        for c in range(y.shape[1]):
            lin = Ridge(alpha=cfg.ridge_alpha).fit(X_tr, y[train_idx, c])
            pred[:, c] = lin.predict(X_te)
            if use_tree:
                tree = _fit_tree(y[train_idx, c] - lin.predict(X_tr), X_tr, cfg, seed + k)
                pred[:, c] += tree.predict(X_te)
        loss[test_idx] = np.sum((pred - y[test_idx]) ** 2, axis=1)
    return loss


def _tree_gate(features: _FeatureSet, input_names: list[str], y, folds,
               cfg: CitConfig, seed: int, clusters: np.ndarray) -> bool:
    """Enable the tree stage for this output only if it beats the plain
    ridge out of sample by a clustered t above TREE_GATE_T and explains a
    non-trivial share of the target variance (polishing residuals that are
    already at the noise floor only injects fitting noise into the test)."""
    test_idx = folds[0]
    train_idx = np.setdiff1d(np.arange(y.shape[0]), test_idx)
    X_tr = features.design(input_names, rows=train_idx)
    X_te = features.design(input_names, rows=test_idx)
    d = np.zeros(len(test_idx))
    scale = float(np.sum(np.var(y, axis=0)))
    for c in range(y.shape[1]):
        lin = Ridge(alpha=cfg.ridge_alpha).fit(X_tr, y[train_idx, c])
        base = lin.predict(X_te)
        tree = _fit_tree(y[train_idx, c] - lin.predict(X_tr), X_tr, cfg, seed)
        both = base + tree.predict(X_te)
        d += (y[test_idx, c] - base) ** 2 - (y[test_idx, c] - both) ** 2
    mean_d = float(np.mean(d))
    if mean_d < TREE_GATE_MIN_GAIN * scale:
        return False
    sums = np.bincount(clusters[test_idx], weights=d - mean_d,
                       minlength=int(clusters.max()) + 1)
    se = float(np.sqrt(np.sum(sums**2))) / d.size
    return mean_d / (se + LOSS_FLOOR) > TREE_GATE_T


def _table_output_losses(features: _FeatureSet, input_names: list[str],
                         candidates: list[str], y, folds, cfg: CitConfig
                         ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    cells, n_cells = features.cells(input_names)
    loss_full = _table_losses(cells, n_cells, y, folds)
    loss_restricted = {}
    for u in candidates:
        keep = [w for w in input_names if w != u]
        if keep:
            c_r, n_r = features.cells(keep)
        else:
            c_r, n_r = np.zeros(y.shape[0], dtype=np.int64), 1
        loss_restricted[u] = _table_losses(c_r, n_r, y, folds)
    return loss_full, loss_restricted


def _clustered_pvalue(d: np.ndarray, clusters: np.ndarray) -> float:
    """One-sided mean comparison with episode-clustered standard error.
    Capped below 1 so only the constant-target convention reports p = 1."""
    mean_d = float(np.mean(d))
    sums = np.bincount(clusters, weights=d - mean_d)
    se = float(np.sqrt(np.sum(sums**2))) / d.size
    return min(float(norm.sf(mean_d / (se + LOSS_FLOOR))), 1.0 - 1e-12)


def _episode_clusters(buffer: ReplayBuffer) -> np.ndarray:
    eps = np.array([r.episode for r in buffer.snapshot()], dtype=np.int64)
    _, inverse = np.unique(eps, return_inverse=True)
    return inverse


def _output_pvalues(
    buffer: ReplayBuffer,
    output: str,
    input_names: list[str],
    cfg: CitConfig,
    seed: int,
    candidates: list[str] | None = None,
) -> dict[str, float]:
    """p-values for all (candidate input, output) pairs, sharing the
    full-input cross-fit across candidates."""
    y = _target_matrix(buffer, output)
    n = y.shape[0]
    if n < cfg.min_samples:
        raise ValueError(f"need at least {cfg.min_samples} samples, have {n}")
    candidates = candidates if candidates is not None else input_names
    if np.all(y == y[0]):
        log.warning("constant target %s: p-value 1 by convention for all inputs", output)
        return {u: 1.0 for u in candidates}

    features = _FeatureSet(buffer, input_names)
    clusters = _episode_clusters(buffer)
    folds = _fold_indices(n, cfg.folds, seed)
    use_table = (features.all_discrete(input_names)
                 and features.cells(input_names)[1] <= cfg.table_cells_max)
    if use_table:
        loss_full, loss_restricted = _table_output_losses(
            features, input_names, candidates, y, folds, cfg)
    else:
        use_tree = _tree_gate(features, input_names, y, folds, cfg, seed, clusters)
        loss_full = _pipeline_losses(features, input_names, y, folds, cfg, seed, use_tree)
        loss_restricted = {
            u: _pipeline_losses(features, [w for w in input_names if w != u],
                                y, folds, cfg, seed, use_tree)
            for u in candidates
        }
    loss_full = np.maximum(loss_full, LOSS_FLOOR)
    pvalues: dict[str, float] = {}
    for u in candidates:
        loss_r = np.maximum(loss_restricted[u], LOSS_FLOOR)
        pvalues[u] = _clustered_pvalue(loss_r - loss_full, clusters)
    return pvalues


def cit_pvalue(
    buffer: ReplayBuffer,
    u_i: str,
    v_j: str,
    cfg: CitConfig | None = None,
    seed: int = 0,
) -> float:
    """p-value for the null hypothesis that u_i tells nothing about v_j once
    every other input is known.  Small p means dependence."""
    cfg = cfg or CitConfig()
    input_names = buffer.schema.input_names()
    if u_i not in input_names:
        raise KeyError(f"{u_i!r} is not an input variable")
    if v_j not in buffer.schema.output_names():
        raise KeyError(f"{v_j!r} is not an output variable")
    return _output_pvalues(buffer, v_j, input_names, cfg, seed, candidates=[u_i])[u_i]


def discover_graph(
    buffer: ReplayBuffer,
    eta: float = 0.05,
    cfg: CitConfig | None = None,
    seed: int = 0,
    input_names: list[str] | None = None,
) -> CausalGraph:
    """Test every (input, output) pair and keep edges with p < eta.  All
    p-values are stored so the graph can be re-thresholded without
    re-testing."""
    cfg = cfg or CitConfig()
    schema = buffer.schema
    inputs = input_names if input_names is not None else schema.input_names()
    outputs = schema.output_names()
    pvalues: dict[tuple[str, str], float] = {}
    for j, v in enumerate(outputs):
        ps = _output_pvalues(buffer, v, inputs, cfg, seed * 100003 + j * 101)
        for u, p in ps.items():
            pvalues[(u, v)] = p
    return CausalGraph(tuple(inputs), tuple(outputs), eta, pvalues)


def rethreshold(graph: CausalGraph, eta: float) -> CausalGraph:
    return replace(graph, eta=eta)


# ---------------------------------------------------------------------------
# Graph file: adjacency lines plus a p-value table.

def write_graph(path: str | Path, graph: CausalGraph) -> None:
    lines = [f"# causal graph  eta={graph.eta!r}"]
    parents = graph.parents
    for v in graph.outputs:
        members = " ".join(u for u in graph.inputs if u in parents[v])
        lines.append(f"{v} <- {members}".rstrip())
    lines.append("")
    lines.append("# p-values")
    for v in graph.outputs:
        for u in graph.inputs:
            lines.append(f"{u} {v} {graph.pvalues[(u, v)]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph(path: str | Path) -> CausalGraph:
    text = Path(path).read_text(encoding="utf-8")
    eta = 0.05
    pvalues: dict[tuple[str, str], float] = {}
    inputs: list[str] = []
    outputs: list[str] = []
    in_pvalues = False
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# causal graph"):
            eta = float(line.split("eta=")[1])
        elif line.startswith("# p-values"):
            in_pvalues = True
        elif in_pvalues and line:
            u, v, p = line.split()
            if u not in inputs:
                inputs.append(u)
            if v not in outputs:
                outputs.append(v)
            pvalues[(u, v)] = float(p)
    return CausalGraph(tuple(inputs), tuple(outputs), eta, pvalues)
