"""Read-only HTTP API over a trained run directory.

Every request is served from one immutable snapshot loaded at startup, so
concurrent queries never observe a half-written model.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .chains import (
    build_extended_graph,
    chain_to_node_link,
    extract_chain,
    make_mce,
    make_mcce,
    render_text,
    simulate,
)
from .discovery import rethreshold
from .fmdp import Boolean, Categorical, Continuous, ValueMap, schema_to_dict
from .runs import LoadedRun, load_checkpoint


def _error(status: int, errors: list[dict]) -> JSONResponse:
    return JSONResponse(status_code=status, content={"errors": errors})


def _field_error(fieldname: str, message: str) -> dict:
    return {"field": fieldname, "message": message}


class RunService:
    def __init__(self, run: LoadedRun):
        self.run = run
        self.episodes = self._load_episodes()

    def _load_episodes(self) -> list[dict]:
        path = self.run.run_dir / self.run.manifest.get("buffer_file", "transitions.jsonl")
        episodes: dict[int, list[dict]] = {}
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for row_index, line in enumerate(fh):
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    obj["row"] = row_index
                    episodes.setdefault(int(obj["episode"]), []).append(obj)
        out = []
        for ep_id in sorted(episodes):
            steps = episodes[ep_id]
            total = sum(sum(s["rewards"].values()) for s in steps)
            out.append({"id": ep_id, "length": len(steps),
                        "total_reward": total, "steps": steps})
        return out

    # -- validation ---------------------------------------------------------

    def parse_values(self, body: dict, key: str, role: str) -> tuple[ValueMap | None, list[dict]]:
        schema = self.run.schema
        specs = schema.by_role(role)
        raw = body.get(key)
        if not isinstance(raw, dict):
            return None, [_field_error(key, f"must be an object with keys "
                                            f"{[v.name for v in specs]}")]
        errors = []
        out: ValueMap = {}
        for spec in specs:
            if spec.name not in raw:
                errors.append(_field_error(f"{key}.{spec.name}", "missing"))
                continue
            value = raw[spec.name]
            try:
                coerced = spec.kind.coerce(value)
            except (TypeError, ValueError):
                errors.append(_field_error(f"{key}.{spec.name}", "wrong type"))
                continue
            if isinstance(spec.kind, Boolean) and not isinstance(value, bool):
                errors.append(_field_error(f"{key}.{spec.name}", "must be a boolean"))
            elif not spec.kind.contains(coerced):
                errors.append(_field_error(f"{key}.{spec.name}", "out of domain"))
            else:
                out[spec.name] = coerced
        extra = set(raw) - {v.name for v in specs}
        for name in sorted(extra):
            errors.append(_field_error(f"{key}.{name}", "unknown variable"))
        return (out if not errors else None), errors

    def parse_chain_request(self, body: dict, with_alt: bool) -> tuple[dict | None, list[dict]]:
        errors: list[dict] = []
        state, errs = self.parse_values(body, "state", "state")
        errors.extend(errs)
        action, errs = self.parse_values(body, "action", "action")
        errors.extend(errs)
        alt_action = None
        if with_alt:
            alt_action, errs = self.parse_values(body, "alt_action", "action")
            errors.extend(errs)
        horizon = body.get("horizon", 4)
        if not isinstance(horizon, int) or horizon < 1:
            errors.append(_field_error("horizon", "must be a positive integer"))
        tau = body.get("tau", 0.1)
        if not isinstance(tau, (int, float)) or not 0.0 <= tau <= 1.0:
            errors.append(_field_error("tau", "must lie in [0, 1]"))
        targets = body.get("targets", [])
        known = set(self.run.schema.reward_names())
        if not isinstance(targets, list):
            errors.append(_field_error("targets", "must be a list of reward names"))
            targets = []
        else:
            for t in targets:
                if t not in known:
                    errors.append(_field_error("targets", f"unknown reward {t!r}"))
        if errors:
            return None, errors
        return {"state": state, "action": action, "alt_action": alt_action,
                "horizon": horizon, "tau": float(tau), "targets": tuple(targets)}, []

    def build_chain(self, state, action, horizon, tau, targets):
        traj = simulate(self.run.ensemble, self.run.policy, state, action, horizon)
        graph = build_extended_graph(traj, self.run.ensemble, tau)
        chain = extract_chain(graph, targets)
        mce = make_mce(chain)
        return chain, mce


def create_app(run_dir: str | Path, static_dir: str | Path | None = None) -> FastAPI:
    run = load_checkpoint(run_dir)
    if run.policy is None:
        raise RuntimeError("run has no policy checkpoint; train before serving")
    svc = RunService(run)
    app = FastAPI(title="causalworld", docs_url=None, redoc_url=None)

    @app.get("/api/schema")
    def get_schema() -> dict:
        payload = schema_to_dict(svc.run.schema)
        payload["env_name"] = svc.run.env_name
        payload["reward_names"] = svc.run.schema.reward_names()
        return payload

    @app.get("/api/graph")
    def get_graph(eta: float | None = None) -> Any:
        graph = svc.run.graph
        if eta is not None:
            if not 0.0 <= eta <= 1.0:
                return _error(400, [_field_error("eta", "must lie in [0, 1]")])
            graph = rethreshold(graph, eta)
        return {
            "inputs": list(graph.inputs),
            "outputs": list(graph.outputs),
            "eta": graph.eta,
            "parents": {v: graph.parent_list(v) for v in graph.outputs},
            "pvalues": [[u, v, p] for (u, v), p in sorted(graph.pvalues.items())],
        }

    @app.get("/api/episodes")
    def get_episodes() -> list[dict]:
        return [{"id": e["id"], "length": e["length"], "total_reward": e["total_reward"]}
                for e in svc.episodes]

    @app.get("/api/episodes/{episode_id}")
    def get_episode(episode_id: int) -> Any:
        for e in svc.episodes:
            if e["id"] == episode_id:
                return e
        return _error(404, [_field_error("episode_id", f"unknown episode {episode_id}")])

    @app.post("/api/chain")
    async def post_chain(request: Request) -> Any:
        body = await _json_body(request)
        if body is None:
            return _error(400, [_field_error("body", "invalid JSON")])
        parsed, errors = svc.parse_chain_request(body, with_alt=False)
        if errors:
            return _error(400, errors)
        chain, mce = svc.build_chain(parsed["state"], parsed["action"],
                                     parsed["horizon"], parsed["tau"], parsed["targets"])
        text = render_text(mce)
        return {"chain": chain_to_node_link(chain, text), "text": text}

    @app.post("/api/contrast")
    async def post_contrast(request: Request) -> Any:
        body = await _json_body(request)
        if body is None:
            return _error(400, [_field_error("body", "invalid JSON")])
        parsed, errors = svc.parse_chain_request(body, with_alt=True)
        if errors:
            return _error(400, errors)
        chain_f, mce_f = svc.build_chain(parsed["state"], parsed["action"],
                                         parsed["horizon"], parsed["tau"], parsed["targets"])
        chain_c, mce_c = svc.build_chain(parsed["state"], parsed["alt_action"],
                                         parsed["horizon"], parsed["tau"], parsed["targets"])
        mcce = make_mcce(mce_f, mce_c)
        text = render_text(mcce)
        return {
            "mcce": {
                "factual_diff": [vars(e) for e in mcce.factual_diff],
                "counterfactual_diff": [vars(e) for e in mcce.counterfactual_diff],
                "rewards": [vars(e) for e in mcce.rewards],
                "empty": mcce.empty,
            },
            "text": text,
            "factual_chain": chain_to_node_link(chain_f, render_text(mce_f)),
            "counterfactual_chain": chain_to_node_link(chain_c, render_text(mce_c)),
        }

    @app.post("/api/step")
    async def post_step(request: Request) -> Any:
        body = await _json_body(request)
        if body is None:
            return _error(400, [_field_error("body", "invalid JSON")])
        errors: list[dict] = []
        state, errs = svc.parse_values(body, "state", "state")
        errors.extend(errs)
        action, errs = svc.parse_values(body, "action", "action")
        errors.extend(errs)
        if errors:
            return _error(400, errors)
        posteriors = svc.run.ensemble.mean_posterior(state, action)
        influence = svc.run.ensemble.to_aim(action, tau=0.0).influence
        return {
            "posteriors": {out: p.to_dict() for out, p in posteriors.items()},
            "influence": influence,
        }

    static = Path(static_dir) if static_dir else _default_static_dir(run.run_dir)
    if static and static.exists():
        app.mount("/", StaticFiles(directory=static, html=True), name="explorer")
    return app


def _default_static_dir(run_dir: Path) -> Path | None:
    candidates = [
        Path(__file__).resolve().parents[3] / "frontend" / "dist",
        run_dir / "frontend",
    ]
    for c in candidates:
        if c.exists():
            return c
    return None


async def _json_body(request: Request) -> dict | None:
    try:
        body = await request.json()
    except Exception:
        return None
    return body if isinstance(body, dict) else None


def serve(run_dir: str | Path, port: int, host: str = "127.0.0.1") -> None:
    import uvicorn

    app = create_app(run_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
