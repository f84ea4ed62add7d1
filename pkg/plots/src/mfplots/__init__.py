"""Batch figures over the mflab CSV/JSON artifacts.

Reads only the public file contract (records.csv, trajectory_*.csv,
gap.csv, radial_profile.csv); never imports the simulator.
"""

from .jobs import KINDS, PlotJob, SchemaError, read_table
from .render import render

__all__ = ["KINDS", "PlotJob", "SchemaError", "read_table", "render"]
