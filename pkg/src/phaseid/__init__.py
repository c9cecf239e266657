"""Phase identification of distribution-feeder loads from smart-meter data."""

from importlib import resources

from .connection import PhaseAssignment, split_delta_power
from .feeder import FeederError, FeederModel, load_feeder, parse_feeder, reduce_network
from .linear_pf import network_sensitivities, solve_nonlinear_pf
from .measurements import MeasurementSet, difference_series, read_measurements
from .mmle import identify
from .simulate import SimulationSpec, generate, perturb_model

FIXTURES = ("feeder_8node", "feeder_2node", "feeder_4load", "feeder_5load_3ph")


def fixture_path(name: str):
    """Path of a shipped feeder fixture (name without ``.json``)."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture '{name}'; choose from {FIXTURES}")
    return resources.files(__package__) / "data" / f"{name}.json"


def load_fixture(name: str) -> FeederModel:
    return parse_feeder(fixture_path(name).read_text())


__all__ = [
    "FIXTURES", "FeederError", "FeederModel", "MeasurementSet", "PhaseAssignment",
    "SimulationSpec", "difference_series", "fixture_path", "generate", "identify",
    "load_feeder", "load_fixture", "network_sensitivities", "parse_feeder",
    "perturb_model", "read_measurements", "reduce_network", "solve_nonlinear_pf",
    "split_delta_power",
]
