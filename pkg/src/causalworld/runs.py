"""Run directories: config snapshot, per-epoch metrics, transition log,
checkpoints (ensemble, policy, graph), and the training loop that fills
them.  Directories are flushed at epoch boundaries so an interrupted run
loads cleanly from its last completed epoch."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndiff as nd
from .discovery import CausalGraph, CitConfig, discover_graph, read_graph, write_graph
from .envs import make_env
from .fmdp import EnvSchema, ReplayBuffer, schema_digest, write_transition_log, _record_to_obj
from .mbrl import (
    MbrlConfig,
    Policy,
    collect_epoch,
    compute_gae,
    evaluate_policy,
    model_rollout,
    ppo_update,
    sample_start_states,
)
from .scm import (
    CheckpointError,
    InferenceEnsemble,
    ScmHyperparams,
    fit,
    load_ensemble,
    save_ensemble,
)

log = logging.getLogger(__name__)

RUN_VERSION = 1

METRIC_COLUMNS = [
    "epoch", "env_steps", "eval_return_mean", "eval_return_std",
    "model_holdout_ll", "model_mse_mean", "graph_edges",
    "actor_loss", "value_loss", "entropy", "clip_fraction", "approx_kl",
]


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_path: Path
    transitions_path: Path
    checkpoint_dir: Path
    manifest_path: Path
    metrics: list[dict] = field(default_factory=list)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.8g}"
    return str(value)


def write_metrics(path: Path, rows: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in METRIC_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def init_run_dir(out_dir: str | Path, cfg: MbrlConfig, schema: EnvSchema) -> RunArtifacts:
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "figures").mkdir(exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    manifest = {
        "version": RUN_VERSION,
        "run_id": f"{cfg.env_name}-{cfg.seed}",
        "env_name": cfg.env_name,
        "schema_digest": schema_digest(schema),
        "config": cfg.to_dict(),
        "checkpoints": [],
        "buffer_file": "transitions.jsonl",
        "created": _now(),
        "updated": _now(),
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return RunArtifacts(
        run_dir=run_dir,
        metrics_path=run_dir / "metrics.csv",
        transitions_path=run_dir / "transitions.jsonl",
        checkpoint_dir=run_dir / "checkpoint",
        manifest_path=manifest_path,
    )


def save_checkpoint(artifacts: RunArtifacts, ensemble: InferenceEnsemble,
                    policy: Policy | None, graph: CausalGraph, epoch: int) -> dict:
    ckpt = artifacts.checkpoint_dir
    ckpt.mkdir(parents=True, exist_ok=True)
    ens_manifest = save_ensemble(ckpt, ensemble)
    entry = {
        "epoch": epoch,
        "ensemble": "ensemble.json",
        "blobs": ens_manifest["blobs"],
    }
    if policy is not None:
        digest = nd.save_params(ckpt / "policy.params", policy.named_params())
        entry["policy"] = {"file": "policy.params", "sha256": digest}
    write_graph(artifacts.run_dir / "graph.txt", graph)
    manifest = json.loads(artifacts.manifest_path.read_text(encoding="utf-8"))
    manifest["checkpoints"] = [entry]
    manifest["updated"] = _now()
    artifacts.manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return entry


@dataclass
class LoadedRun:
    run_dir: Path
    manifest: dict
    env_name: str
    schema: EnvSchema
    config: MbrlConfig
    ensemble: InferenceEnsemble
    policy: Policy | None
    graph: CausalGraph


def load_checkpoint(run_dir: str | Path) -> LoadedRun:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest.json in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != RUN_VERSION:
        raise CheckpointError(f"unsupported run version {manifest.get('version')}")
    env_name = manifest["env_name"]
    schema = make_env(env_name).schema
    if manifest["schema_digest"] != schema_digest(schema):
        raise CheckpointError("schema digest mismatch between manifest and environment")
    if not manifest["checkpoints"]:
        raise CheckpointError("run has no checkpoints")
    entry = manifest["checkpoints"][-1]
    ckpt = run_dir / "checkpoint"
    ensemble = load_ensemble(ckpt, schema)
    policy = None
    if "policy" in entry:
        blob = ckpt / entry["policy"]["file"]
        if nd.file_digest(blob) != entry["policy"]["sha256"]:
            raise CheckpointError(f"digest mismatch for {blob}")
        policy = Policy(schema, seed=0)
        nd.assign_params(policy.named_params(), nd.load_params(blob))
    graph = read_graph(run_dir / "graph.txt")
    cfg = MbrlConfig(**manifest["config"])
    return LoadedRun(run_dir, manifest, env_name, schema, cfg, ensemble, policy, graph)


# ---------------------------------------------------------------------------
# Training loop (Algorithm: collect, rediscover, fit, rollout, update).

def _recent_view(buffer: ReplayBuffer, n: int) -> ReplayBuffer:
    view = ReplayBuffer(buffer.schema, capacity=max(n, 1))
    view._records = list(buffer.snapshot()[-n:])
    return view


def train_loop(cfg: MbrlConfig, out_dir: str | Path,
               cit: CitConfig | None = None) -> RunArtifacts:
    """Run the full interleaved loop and leave a complete run directory.

    With ``cfg.model_free`` the model is skipped entirely and the policy
    updates on the freshly collected real batch (plain on-policy updates).
    """
    env = make_env(cfg.env_name, seed=cfg.seed)
    schema = env.schema
    gamma = cfg.gamma if cfg.gamma is not None else schema.gamma
    artifacts = init_run_dir(out_dir, cfg, schema)
    cit = cit or CitConfig(n_trees=30)

    master = np.random.SeedSequence(cfg.seed)
    collect_rng, rollout_rng, ppo_rng, fit_seed_rng = (
        np.random.default_rng(s) for s in master.spawn(4)
    )

    policy = Policy(schema, seed=cfg.seed)
    policy_optim = nd.Adam(policy.named_params(), lr=cfg.policy_lr)
    buffer = ReplayBuffer(schema, cfg.buffer_capacity)
    from .discovery import full_graph

    graph = full_graph(schema, cfg.eta)
    ensemble = InferenceEnsemble(schema, graph, n_members=cfg.ensemble_size, seed=cfg.seed)

    logged = 0
    log_fh = open(artifacts.transitions_path, "w", encoding="utf-8")
    try:
        for epoch in range(cfg.n_epoch):
            batch, _ = collect_epoch(env, policy, buffer, cfg.steps_per_epoch, collect_rng)

            model_ll = float("nan")
            model_mse = float("nan")
            if not cfg.model_free:
                due = epoch == 0 or (epoch % cfg.graph_period(epoch) == 0)
                if due and len(buffer) >= cit.min_samples:
                    view = _recent_view(buffer, cfg.discover_samples)
                    graph = discover_graph(view, cfg.eta, cit, seed=cfg.seed * 1000 + epoch)
                steps = cfg.model_fit_initial if epoch == 0 else cfg.model_fit_steps
                metrics = fit(ensemble, buffer, graph, steps=steps,
                              batch_size=cfg.model_batch, lr=cfg.model_lr,
                              seed=int(fit_seed_rng.integers(0, 2**31 - 1)))
                model_ll = metrics.total_holdout_ll()
                if metrics.holdout_mse:
                    model_mse = float(np.mean(list(metrics.holdout_mse.values())))
                k = cfg.rollout_length(epoch)
                n_starts = max(cfg.rollout_samples // k, 1)
                for _ in range(cfg.n_round):
                    starts = sample_start_states(buffer, n_starts,
                                                 cfg.start_state_window, rollout_rng)
                    _, roll = model_rollout(ensemble, policy, starts, k, rollout_rng)
                    compute_gae(roll, gamma, cfg.gae_lambda)
                    stats = ppo_update(policy, roll, cfg, optim=policy_optim, rng=ppo_rng)
            else:
                compute_gae(batch, gamma, cfg.gae_lambda)
                stats = ppo_update(policy, batch, cfg, optim=policy_optim, rng=ppo_rng,
                                   passes=cfg.model_free_passes)

            eval_mean, eval_std = evaluate_policy(
                cfg.env_name, policy, cfg.eval_episodes, seed=cfg.seed * 7919 + epoch)
            row = {
                "epoch": epoch,
                "env_steps": (epoch + 1) * cfg.steps_per_epoch,
                "eval_return_mean": eval_mean,
                "eval_return_std": eval_std,
                "model_holdout_ll": model_ll,
                "model_mse_mean": model_mse,
                "graph_edges": graph.edge_count(),
                "actor_loss": stats.actor_loss, "value_loss": stats.value_loss,
                "entropy": stats.entropy, "clip_fraction": stats.clip_fraction,
                "approx_kl": stats.approx_kl,
            }
            artifacts.metrics.append(row)
            write_metrics(artifacts.metrics_path, artifacts.metrics)

            records = buffer.snapshot()
            for rec in records[logged:]:
                log_fh.write(json.dumps(_record_to_obj(schema, rec)) + "\n")
            log_fh.flush()
            logged = len(records)

            save_checkpoint(artifacts, ensemble, policy, graph, epoch)
            log.info("epoch %d: eval return %.1f +- %.1f", epoch, eval_mean, eval_std)
    finally:
        log_fh.close()

    if cfg.n_epoch == 0:
        write_metrics(artifacts.metrics_path, [])
        save_checkpoint(artifacts, ensemble, policy, graph, -1)
    return artifacts
