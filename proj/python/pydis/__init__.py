"""Distilled importance sampling: Python access to the C++ core."""

import json as _json

from . import _dis
from ._dis import ContractError, Flow, auto_truncate, compute_weights, ess, resample, self_normalised_estimate
from ._dis import generate_data, sinusoid_log_density

__all__ = [
    "ContractError",
    "Flow",
    "auto_truncate",
    "check_config",
    "compute_weights",
    "ess",
    "generate_data",
    "resample",
    "run",
    "self_normalised_estimate",
    "sinusoid_log_density",
    "summarise",
]


def check_config(path, seed=None):
    """Parsed configuration with defaults filled in."""
    return _json.loads(_dis.check_config(str(path), seed))


def run(config, output, seed=None):
    """Run an experiment into a fresh output directory; returns its manifest."""
    return _json.loads(_dis.run(str(config), str(output), seed))


def summarise(path):
    return _json.loads(_dis.summarise(str(path)))
