"""Adversarial illusions on a synthetic embedding space and the consensus defence.

Configs are JSON strings in the same schema the command-line driver reads;
an empty string means the desk defaults.
"""

import json

from ._illusion_core import (
    ConfigError,
    IllusionError,
    Session,
    ShapeError,
    config_hash,
    cosine_similarity,
    default_config,
    generate_dataset,
    majority_attack_probability,
    run_experiment,
)

__all__ = [
    "ConfigError",
    "IllusionError",
    "Session",
    "ShapeError",
    "config_hash",
    "cosine_similarity",
    "default_config",
    "dump_config",
    "generate_dataset",
    "majority_attack_probability",
    "run_experiment",
]


def dump_config(config=None, **overrides):
    """Serialises a config dict, merging top-level overrides."""
    merged = dict(config or {})
    merged.update(overrides)
    return json.dumps(merged)
