"""Command-line interface: train, discover, explain, benchmark-aim,
simulate, and serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .chains import (
    chain_to_dot,
    chain_to_node_link,
    build_extended_graph,
    extract_chain,
    make_mce,
    make_mcce,
    render_text,
    simulate,
)
from .discovery import CitConfig, discover_graph, write_graph
from .envs import ENV_NAMES, env_schema, make_env
from .fmdp import (
    Boolean,
    Categorical,
    EnvSchema,
    ValueMap,
    load_schema,
    read_transition_log,
)
from .mbrl import MbrlConfig
from .runs import LoadedRun, load_checkpoint, train_loop


def _parse_action_values(schema: EnvSchema, values: list[str], flag: str) -> ValueMap:
    specs = schema.action_vars
    if len(values) != len(specs):
        raise SystemExit(
            f"error: {flag} needs {len(specs)} value(s) for {[v.name for v in specs]}")
    out: ValueMap = {}
    for spec, raw in zip(specs, values):
        if isinstance(spec.kind, Boolean):
            out[spec.name] = raw.lower() in ("1", "true", "t", "yes")
        elif isinstance(spec.kind, Categorical):
            out[spec.name] = int(raw)
        else:
            out[spec.name] = float(raw)
    return out


def _load_step_state(run: LoadedRun, step: int) -> ValueMap:
    path = run.run_dir / run.manifest.get("buffer_file", "transitions.jsonl")
    if not path.exists():
        raise SystemExit(f"error: no transition log at {path}")
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if i == step:
                obj = json.loads(line)
                return {v.name: v.kind.coerce(obj[v.name]) for v in run.schema.state_vars}
    raise SystemExit(f"error: step {step} beyond the end of the transition log")


def cmd_train(args) -> int:
    cfg = MbrlConfig(
        env_name=args.env,
        n_epoch=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        eta=args.eta,
        seed=args.seed,
        model_free=args.model_free,
        n_round=args.rounds,
        ensemble_size=args.ensemble_size,
        eval_episodes=args.eval_episodes,
        rollout_samples=args.rollout_samples,
        model_fit_steps=args.model_fit_steps,
        model_fit_initial=args.model_fit_initial,
    )
    artifacts = train_loop(cfg, args.out)
    from .report import plot_learning_curve

    fig = plot_learning_curve(artifacts.metrics_path,
                              artifacts.run_dir / "figures" / "learning_curve.png")
    print(f"run written to {artifacts.run_dir} (metrics: {artifacts.metrics_path}, "
          f"figure: {fig})")
    return 0


def cmd_discover(args) -> int:
    if args.env:
        schema = env_schema(args.env)
    elif args.schema:
        schema = load_schema(args.schema)
    else:
        raise SystemExit("error: discover needs --env or --schema")
    buffer = read_transition_log(args.data, schema)
    cfg = CitConfig()
    graph = discover_graph(buffer, eta=args.eta, cfg=cfg, seed=args.seed)
    write_graph(args.out, graph)
    parents = graph.parents
    for v in graph.outputs:
        print(f"{v} <- {' '.join(graph.parent_list(v))}")
    print(f"graph written to {args.out}")
    return 0


def cmd_explain(args) -> int:
    run = load_checkpoint(args.run)
    if run.policy is None:
        raise SystemExit("error: run has no policy checkpoint")
    schema = run.schema
    state = _load_step_state(run, args.step)
    action = _parse_action_values(schema, args.action, "--action")
    targets = tuple(args.targets or ())
    out_dir = Path(args.out) if args.out else run.run_dir / "explain"
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(a: ValueMap):
        traj = simulate(run.ensemble, run.policy, state, a, args.horizon)
        graph = build_extended_graph(traj, run.ensemble, args.tau)
        return extract_chain(graph, targets)

    chain = build(action)
    mce = make_mce(chain)
    text = render_text(mce)
    stem = f"chain_step{args.step}"
    (out_dir / f"{stem}.json").write_text(
        json.dumps(chain_to_node_link(chain, text), indent=2), encoding="utf-8")
    (out_dir / f"{stem}.dot").write_text(chain_to_dot(chain), encoding="utf-8")
    from .report import plot_chain

    if not chain.empty:
        plot_chain(chain, out_dir / f"{stem}.png")

    if args.contrast:
        alt = _parse_action_values(schema, args.contrast, "--contrast")
        alt_chain = build(alt)
        alt_mce = make_mce(alt_chain)
        mcce = make_mcce(mce, alt_mce)
        text = render_text(mcce)
        (out_dir / f"{stem}_contrast.json").write_text(
            json.dumps(chain_to_node_link(alt_chain, render_text(alt_mce)), indent=2),
            encoding="utf-8")
        (out_dir / f"{stem}_contrast.dot").write_text(chain_to_dot(alt_chain),
                                                      encoding="utf-8")
        if not alt_chain.empty:
            plot_chain(alt_chain, out_dir / f"{stem}_contrast.png")
    print(text)
    print(f"exports written to {out_dir}")
    return 0


def cmd_benchmark(args) -> int:
    from .experiments import run_benchmark, write_benchmark_csv, write_benchmark_summary

    modes = args.mode if args.mode else ["direct", "full+attn", "caus+attn"]
    run = run_benchmark(modes, n_samples=args.n, eta=args.eta, tau=args.tau,
                        seeds=list(range(args.seeds)), fit_steps=args.fit_steps,
                        n_members=args.ensemble_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_benchmark_csv(out_dir / "benchmark_aim.csv", run)
    write_benchmark_summary(out_dir / "benchmark_aim_summary.csv", run)
    from .report import plot_benchmark_summary

    plot_benchmark_summary(out_dir / "benchmark_aim_summary.csv",
                           out_dir / "benchmark_aim.png")
    for mode in modes:
        print(f"{mode}: median accuracy {run.median_accuracy(mode):.4f}")
    print(f"results written to {out_dir}")
    return 0


def cmd_simulate(args) -> int:
    run = load_checkpoint(args.run)
    if run.policy is None:
        raise SystemExit("error: run has no policy checkpoint")
    env = make_env(run.env_name)
    log_path = run.run_dir / run.manifest.get("buffer_file", "transitions.jsonl")
    next_episode = 0
    if log_path.exists():
        with open(log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    next_episode = max(next_episode, json.loads(line)["episode"] + 1)
    returns = []
    with open(log_path, "a", encoding="utf-8") as fh:
        for e in range(args.episodes):
            env.reset(args.seed * 1000 + e)
            total, step = 0.0, 0
            while not env.finished:
                t = env.step(run.policy.mode_action(env.state))
                total += t.total_reward
                obj = {}
                for v in run.schema.state_vars:
                    obj[v.name] = t.s[v.name]
                for v in run.schema.action_vars:
                    obj[v.name] = t.a[v.name]
                for v in run.schema.state_vars:
                    obj[v.name + "'"] = t.s_next[v.name]
                for v in run.schema.outcome_vars:
                    obj[v.name] = t.o[v.name]
                obj["rewards"] = t.rewards
                obj["done"] = t.done
                obj["episode"] = next_episode + e
                obj["step"] = step
                fh.write(json.dumps(obj) + "\n")
                step += 1
            returns.append(total)
            print(f"episode {next_episode + e}: return {total:.1f}")
    print(f"mean return {np.mean(returns):.2f} over {args.episodes} episodes")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.run, args.port, host=args.host)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalworld",
        description="Causal world models: discovery, explanation, and model-based RL",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run the model-based (or model-free) training loop")
    p.add_argument("--env", required=True, choices=ENV_NAMES)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--steps-per-epoch", type=int, default=800)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model-free", action="store_true")
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--ensemble-size", type=int, default=5)
    p.add_argument("--eval-episodes", type=int, default=5)
    p.add_argument("--rollout-samples", type=int, default=2048)
    p.add_argument("--model-fit-steps", type=int, default=200)
    p.add_argument("--model-fit-initial", type=int, default=1000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="discover the causal graph from a transition log")
    p.add_argument("--data", required=True)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--schema")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("explain", help="causal-chain explanation for a recorded step")
    p.add_argument("--run", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--action", nargs="+", required=True)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--targets", nargs="*")
    p.add_argument("--contrast", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark-aim", help="action-influence recovery benchmark")
    p.add_argument("--mode", action="append",
                   choices=["direct", "full+attn", "caus+attn"])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--fit-steps", type=int, default=3000)
    p.add_argument("--ensemble-size", type=int, default=5)
    p.add_argument("--out", default="benchmark")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("simulate", help="run episodes with the saved policy")
    p.add_argument("--run", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="serve the HTTP API over a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 1
        raise
    except Exception as e:  # single-line diagnostics, nonzero status
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
