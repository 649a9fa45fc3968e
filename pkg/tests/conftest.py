import pytest

from causalworld.mbrl import MbrlConfig
from causalworld.runs import train_loop


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A small but complete synthetic-env training run for CLI/API tests."""
    out = tmp_path_factory.mktemp("runs") / "tiny"
    cfg = MbrlConfig(env_name="synthetic-aim", n_epoch=2, steps_per_epoch=200,
                     n_round=2, rollout_samples=64, model_fit_initial=300,
                     model_fit_steps=100, ensemble_size=2, eval_episodes=1,
                     seed=11, discover_samples=400, eta=0.05)
    train_loop(cfg, out)
    return out
