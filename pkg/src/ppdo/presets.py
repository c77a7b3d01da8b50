"""Bundled reference problems (JSON files under ``presets/``)."""
from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .problem import Problem, problem_from_dict

PRESETS = ("fig2", "comparison", "single-agent", "two-agent-adversary", "raspberry-analog")


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files(__package__).joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def load_preset(name: str) -> Problem:
    doc = preset_document(name)
    problem = problem_from_dict(doc, name=name)
    problem.meta["expected_optimum"] = np.asarray(doc["expected_optimum"], dtype=float)
    return problem
