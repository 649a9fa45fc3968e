"""Acceptance criteria, one test per criterion, each printing a pass line.

Heavy artifacts (buffers, discovered graphs, benchmark ensembles, training
runs) are shared through session fixtures.  Run with ``-s`` to watch the
per-criterion lines; the whole suite is compute-heavy (a few hours on two
cores), dominated by the model-based RL criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest

from causalworld import ndiff as nd
from causalworld.chains import (
    GroundTruthAim,
    build_extended_graph,
    extract_chain,
    factual_trajectory,
    make_mce,
    make_mcce,
)
from causalworld.discovery import (
    discover_graph,
    empty_graph,
    full_graph,
    graph_from_parents,
    rethreshold,
)
from causalworld.envs import (
    VacuumEnv,
    collect_steps,
    ground_truth,
    make_env,
    uniform_random_policy,
)
from causalworld.experiments import (
    collect_benchmark_buffer,
    run_benchmark,
    spurious_chain_edges,
)
from causalworld.fmdp import ReplayBuffer
from causalworld.mbrl import MbrlConfig
from causalworld.runs import train_loop
from causalworld.scm import InferenceEnsemble, evaluate, fit, predict_posterior

SYNTH = make_env("synthetic-aim").schema
TRUTH = ground_truth("synthetic-aim")
TRUE_GRAPH = graph_from_parents(TRUTH.union_parents, SYNTH.input_names(),
                                SYNTH.output_names())
SEEDS = [0, 1, 2, 3, 4]


def report(line: str) -> None:
    print(line, flush=True)


# ---------------------------------------------------------------------------
# Shared artifacts.

@pytest.fixture(scope="session")
def synth_buffers():
    buffers = []
    for seed in SEEDS:
        env = make_env("synthetic-aim")
        buf = ReplayBuffer(env.schema, capacity=20000)
        collect_steps(env, uniform_random_policy(env.schema), 20000, buf,
                      np.random.default_rng(1000 + seed))
        buffers.append(buf)
    return buffers


@pytest.fixture(scope="session")
def discovered(synth_buffers):
    t0 = time.time()
    graphs = [discover_graph(buf, eta=0.05, seed=seed)
              for seed, buf in zip(SEEDS, synth_buffers)]
    return graphs, time.time() - t0


@pytest.fixture(scope="session")
def benchmark_run():
    t0 = time.time()
    run = run_benchmark(["caus+attn", "full+attn"], n_samples=20000, eta=0.05,
                        tau=0.1, seeds=SEEDS, fit_steps=2500, n_members=5,
                        keep_ensembles=True)
    return run, time.time() - t0


@pytest.fixture(scope="session")
def mbrl_runs(tmp_path_factory):
    """Three model-based and three model-free cartpole runs."""
    root = tmp_path_factory.mktemp("mbrl")
    mb, mf, mb_times = [], [], []
    for seed in (0, 1, 2):
        cfg = MbrlConfig(env_name="cartpole", n_epoch=50, steps_per_epoch=800,
                         eta=0.1, gamma=0.98, ensemble_size=5, eval_episodes=3,
                         seed=seed)
        t0 = time.time()
        art = train_loop(cfg, root / f"mb{seed}")
        mb_times.append(time.time() - t0)
        mb.append(art)
        cfg_mf = MbrlConfig(env_name="cartpole", n_epoch=50, steps_per_epoch=800,
                            gamma=0.98, model_free=True, eval_episodes=3, seed=seed)
        mf.append(train_loop(cfg_mf, root / f"mf{seed}"))
    return mb, mf, mb_times


# ---------------------------------------------------------------------------
# Criteria.

def test_criterion_01_graph_recovery(discovered):
    graphs, elapsed = discovered
    exact = sum(g.parents == TRUTH.union_parents for g in graphs)
    assert exact >= 4, f"exact recovery in only {exact}/5 seeds"
    assert elapsed < 600, f"discovery took {elapsed:.0f}s (budget 600s)"
    report(f"[PASS] criterion 1: union graph exact in {exact}/5 seeds "
           f"({elapsed:.0f}s)")


def test_criterion_02_aim_recovery(benchmark_run):
    run, elapsed = benchmark_run
    caus = run.median_accuracy("caus+attn")
    full = run.median_accuracy("full+attn")
    assert caus >= 0.95, f"caus+attn median accuracy {caus:.3f} < 0.95"
    assert caus > full, f"caus+attn {caus:.3f} not above full+attn {full:.3f}"
    assert elapsed < 3600, f"benchmark took {elapsed:.0f}s (budget 3600s)"
    report(f"[PASS] criterion 2: caus+attn median {caus:.3f} > "
           f"full+attn median {full:.3f} ({elapsed:.0f}s)")


def test_criterion_03_spurious_chain_probe(benchmark_run):
    run, _ = benchmark_run
    good_seeds = 0
    for seed in SEEDS:
        buf = collect_benchmark_buffer("synthetic-aim", 20000, seed=9000 + seed)
        start = dict(buf.snapshot()[15000].transition.s)
        full_bad = caus_bad = 0
        for a in range(4):
            full_bad += len(spurious_chain_edges(
                run.ensembles[("full+attn", seed)], TRUTH, start, {"a": a},
                horizon=4, tau=0.1))
            caus_bad += len(spurious_chain_edges(
                run.ensembles[("caus+attn", seed)], TRUTH, start, {"a": a},
                horizon=4, tau=0.1))
        if full_bad >= 1 and caus_bad == 0:
            good_seeds += 1
    assert good_seeds >= 4, f"probe separated models in only {good_seeds}/5 seeds"
    report(f"[PASS] criterion 3: full-graph chains carry spurious edges, causal "
           f"chains none, in {good_seeds}/5 seeds")


def test_criterion_04_monotonicity(discovered):
    graphs, _ = discovered
    violations = 0
    etas = np.linspace(0.0, 1.0, 20)
    for g in graphs:
        for e1, e2 in itertools.combinations(etas, 2):
            lo, hi = rethreshold(g, min(e1, e2)), rethreshold(g, max(e1, e2))
            for v in g.outputs:
                if not lo.parents[v] <= hi.parents[v]:
                    violations += 1
    assert violations == 0
    report("[PASS] criterion 4: parent-set containment over the 20-point "
           "threshold grid, 0 violations")


def test_criterion_05_tradeoff_direction(synth_buffers):
    lls = {"full": [], "true": [], "empty": []}
    for seed, buf in zip(SEEDS, synth_buffers):
        for name, graph in (("full", full_graph(SYNTH)),
                            ("true", TRUE_GRAPH),
                            ("empty", empty_graph(SYNTH))):
            ens = InferenceEnsemble(SYNTH, graph, n_members=1, seed=seed)
            metrics = fit(ens, buf, graph, steps=2500, batch_size=256, lr=1e-3,
                          lr_final=1e-5)
            lls[name].append(metrics.total_holdout_ll())
    gap_full_true = np.array(lls["full"]) - np.array(lls["true"])
    gap_true_empty = np.array(lls["true"]) - np.array(lls["empty"])
    assert gap_full_true.mean() >= -gap_full_true.std(), (
        f"full-true gap {gap_full_true.mean():.3f} below -1 sigma")
    assert gap_true_empty.mean() >= -gap_true_empty.std(), (
        f"true-empty gap {gap_true_empty.mean():.3f} below -1 sigma")
    report(f"[PASS] criterion 5: held-out LL ordering full >= true >= empty "
           f"(gaps {gap_full_true.mean():.3f}, {gap_true_empty.mean():.3f})")


def test_criterion_06_inference_numerics():
    ens = InferenceEnsemble(SYNTH, TRUE_GRAPH, n_members=1, seed=5)
    member = ens.members[0]
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10_000):
        inputs = {
            "x_1": float(rng.normal(0, 30)), "x_2": float(rng.normal(0, 30)),
            "x_3": float(rng.normal(0, 100)), "x_4": float(rng.normal(0, 50)),
            "tau": float(rng.uniform(0, 1000)), "a": int(rng.integers(0, 4)),
        }
        out = SYNTH.output_names()[int(rng.integers(0, 5))]
        _, trace = predict_posterior(member, out, inputs)
        worst = max(worst, abs(1.0 - sum(trace.influence.values())))
    assert worst < 1e-6, f"weight normalization error {worst:.2e}"

    # state invariance: bit-identical weights across states at fixed action
    for a in range(4):
        traces = []
        for _ in range(50):
            inputs = {k: float(rng.normal(0, 100)) for k in
                      ("x_1", "x_2", "x_3", "x_4")}
            inputs["tau"] = float(rng.uniform(0, 1000))
            inputs["a"] = a
            _, trace = predict_posterior(member, "x_3'", inputs)
            traces.append(trace.influence)
        assert all(t == traces[0] for t in traces)

    # full-composition gradient vs central finite differences
    from tests.test_scm import _four_class_schema
    from tests.test_ndiff import finite_difference_grads, max_rel_err
    from causalworld.scm import ScmHyperparams

    schema = _four_class_schema()
    with nd.using_dtype(np.float64):
        small = InferenceEnsemble(schema, full_graph(schema),
                                  ScmHyperparams(embed_dim=6, key_dim=4,
                                                 gru_hidden=5, decoder_hidden=6),
                                  n_members=1, seed=6)
        m = small.members[0]
        batch = {"c": rng.integers(0, 4, 5).astype(float),
                 "z": rng.standard_normal(5),
                 "a": rng.integers(0, 2, 5).astype(float)}
        tc = rng.integers(0, 4, 5)
        tz = rng.standard_normal(5)
        params = m.named_params()

        def loss_fn():
            cache = {}
            return -(m.log_prob("c'", m.forward_output("c'", batch, cache), tc).mean()
                     + m.log_prob("z'", m.forward_output("z'", batch, cache), tz).mean())

        with nd.Tape(params) as tape:
            loss = loss_fn()
        analytic = nd.backward(tape, loss)
        numeric = finite_difference_grads(params, loss_fn)
    err = max_rel_err(analytic, numeric)
    assert err < 1e-3, f"gradient check rel err {err:.2e}"
    report(f"[PASS] criterion 6: weight normalization {worst:.1e}, state-"
           f"invariant weights, gradient rel err {err:.1e}")


def test_criterion_07_deterministic_dynamics_fit(synth_buffers, discovered):
    graphs, _ = discovered
    ens = InferenceEnsemble(SYNTH, graphs[0], n_members=1, seed=0)
    metrics = fit(ens, synth_buffers[0], graphs[0], steps=15000, batch_size=256,
                  lr=1e-3, lr_final=1e-7)
    mse = metrics.holdout_mse["tau'"]
    assert mse < 0.01, f"tau' held-out MSE {mse:.4f} >= 0.01"

    # posterior mean for the constant-increment case arm: x_3' = x_3 + 10
    member = ens.members[0]
    errs = []
    rng = np.random.default_rng(0)
    holdout = synth_buffers[0].transitions()[-1000:]
    for t in holdout:
        if int(t.a["a"]) != 3:
            continue
        params, _ = predict_posterior(member, "x_3'", {**t.s, **t.a})
        errs.append(params.mean - (t.s["x_3"] + 10.0))
    bias = abs(float(np.mean(errs)))
    assert bias < 0.3, f"x_3' mean off by {bias:.3f} under the +10 arm"
    report(f"[PASS] criterion 7: tau' held-out MSE {mse:.4f} < 0.01; "
           f"x_3' mean bias {bias:.3f} < 0.3")


def test_criterion_08_chain_correctness():
    from tests.test_chains import oracle_chain, run_chain

    checked = 0
    for position, action, c1, c2 in itertools.product(
            (0, 1), (0, 1, 2), (False, True), (False, True)):
        chain, traj = run_chain(position, c1, c2, action)
        nodes, edges = oracle_chain(traj, (), 0.1)
        assert set(chain.nodes) == nodes, (position, action, c1, c2)
        assert set(chain.edges) == edges, (position, action, c1, c2)
        checked += 1
    assert checked == 24
    report("[PASS] criterion 8: chain extraction equals brute-force path "
           "enumeration on all 24 vacuum cases")


def test_criterion_09_explanation_algebra():
    aim = GroundTruthAim(ground_truth("vacuum"), VacuumEnv.schema)
    rng = np.random.default_rng(9)
    checked_chains = 0
    attempts = 0
    while checked_chains < 100 and attempts < 400:
        attempts += 1
        env = VacuumEnv(seed=int(rng.integers(0, 10**6)))
        env.reset(int(rng.integers(0, 10**6)))
        env._state = {"position": int(rng.integers(0, 2)),
                      "clean_1": bool(rng.integers(0, 2)),
                      "clean_2": bool(rng.integers(0, 2))}
        transitions = []
        for _ in range(int(rng.integers(1, 5))):
            transitions.append(env.step({"a": int(rng.integers(0, 3))}))
            if env.finished:
                break
        traj = factual_trajectory(transitions)
        chain = extract_chain(build_extended_graph(traj, aim, 0.1), ())
        if chain.empty:
            continue
        mce = make_mce(chain)
        reward_parents = {p for r in chain.reward_nodes() for p in chain.parents_of(r)}
        heading = {e.key for e in mce.heading}
        inter = {e.key for e in mce.intermediates}
        assert inter == {k for k in reward_parents if k not in heading}
        for e in mce.intermediates:
            assert not reward_parents <= (inter - {e.key}) | heading
        checked_chains += 1
    assert checked_chains == 100

    empties = 0
    for _ in range(1000):
        env = VacuumEnv(seed=int(rng.integers(0, 10**6)))
        env.reset(int(rng.integers(0, 10**6)))
        env._state = {"position": int(rng.integers(0, 2)),
                      "clean_1": bool(rng.integers(0, 2)),
                      "clean_2": bool(rng.integers(0, 2))}
        t = env.step({"a": int(rng.integers(0, 3))})
        traj = factual_trajectory([t])
        chain = extract_chain(build_extended_graph(traj, aim, 0.1), ())
        mce = make_mce(chain)
        assert make_mcce(mce, mce).empty
        empties += 1
    assert empties == 1000
    report("[PASS] criterion 9: MCE minimality on 100 chains; self-contrast "
           "empty in 1000/1000 cases")


def _first_reach(metrics_rows, threshold=150.0):
    for row in metrics_rows:
        if row["eval_return_mean"] >= threshold:
            return row["env_steps"]
    return math.inf


def test_criterion_10_mbrl_cartpole(mbrl_runs):
    mb, mf, mb_times = mbrl_runs
    mb_reached = [max(r["eval_return_mean"] for r in art.metrics) >= 150
                  for art in mb]
    assert sum(mb_reached) >= 2, f"model-based reached 150 in {sum(mb_reached)}/3 seeds"
    mb_steps = sorted(_first_reach(art.metrics) for art in mb)
    mf_steps = sorted(_first_reach(art.metrics) for art in mf)
    mb_median, mf_median = mb_steps[1], mf_steps[1]
    assert mb_median <= mf_median, (
        f"model-based median {mb_median} env steps vs model-free {mf_median}")
    worst_time = max(mb_times)
    assert worst_time < 45 * 60, f"slowest seed took {worst_time:.0f}s"
    report(f"[PASS] criterion 10: model-based reached 150 in {sum(mb_reached)}/3 "
           f"seeds, median {mb_median:.0f} vs model-free {mf_median:.0f} env "
           f"steps ({worst_time:.0f}s worst seed)")


def test_criterion_11_reproducibility(tmp_path):
    cfg = MbrlConfig(env_name="synthetic-aim", n_epoch=2, steps_per_epoch=128,
                     n_round=2, rollout_samples=64, model_fit_initial=60,
                     model_fit_steps=30, ensemble_size=2, eval_episodes=1,
                     seed=13, discover_samples=256, eta=0.05)
    a = train_loop(cfg, tmp_path / "a")
    b = train_loop(cfg, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    report("[PASS] criterion 11: fixed-seed metrics CSVs byte-identical "
           "across two runs")
