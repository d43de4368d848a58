from dataclasses import dataclass
from typing import List, Optional

import numpy as np

# spawn_key namespaces under one master seed
RUN_NAMESPACE = 0
AUXILIARY_NAMESPACE = 1


@dataclass
class RunStreams:
    """Independent generators owned by one Monte Carlo run."""
    step_size: List[np.random.Generator]
    combination: np.random.Generator
    data: List[np.random.Generator]


def run_seed_sequence(master: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=(RUN_NAMESPACE, int(run)))


def run_streams(master: int, run: int, n_step_sizes: int, n_agents: int) -> RunStreams:
    """Split the run seed into step-size, combination and data streams."""
    step_seq, combination_seq, data_seq = run_seed_sequence(master, run).spawn(3)
    return RunStreams(
        step_size=[np.random.default_rng(s) for s in step_seq.spawn(n_step_sizes)],
        combination=np.random.default_rng(combination_seq),
        data=[np.random.default_rng(s) for s in data_seq.spawn(n_agents)],
    )


def auxiliary_generator(master: int, key: int) -> np.random.Generator:
    """Generator for experiment-level estimates that sit outside the runs."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master), spawn_key=(AUXILIARY_NAMESPACE, int(key))))


def parse_seed(value, source: str = "seed") -> Optional[int]:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        raise ValueError(f"{source} must be a non-negative integer, got {value!r}")
    try:
        seed = int(str(value).strip()) if not isinstance(value, int) else value
    except ValueError:
        raise ValueError(f"{source} must be a non-negative integer, got {value!r}")
    if seed < 0:
        raise ValueError(f"{source} must be a non-negative integer, got {seed}")
    return seed
