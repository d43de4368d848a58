import json

import numpy as np
import pytest

from config import SEED_ENV_VAR


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def lms(kind="ncop", n_agents=1, mu=0.002, sigma_v2=0.01, dimension=2, runs=20, iterations=2000, window=500,
        seed=7, step_size=None, **strategy):
    """Config dict for an LMS experiment with white regressors."""
    return {
        "name": f"test-{kind}",
        "seed": seed,
        "runs": runs,
        "iterations": iterations,
        "window": window,
        "dimension": dimension,
        "agents": {"count": n_agents, "cost": "mse", "R_u": 1.0, "sigma_v2": sigma_v2},
        "strategy": {"kind": kind, "step_size": step_size or {"type": "constant", "mu": mu}, **strategy},
    }


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)
    return write
