"""Plot jobs and the CSV column contract they draw from."""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

KINDS = ("fn_vs_t", "fn_vs_N_loglog", "trajectory_snapshot", "gap_gronwall")


class SchemaError(ValueError):
    """An input CSV is missing a column the figure needs."""


@dataclass(frozen=True)
class PlotJob:
    """One figure: input CSV path(s), figure kind, output image path."""

    inputs: tuple
    kind: str
    out: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if not self.inputs:
            raise ValueError("inputs: need at least one CSV path")


def read_table(path, required=()) -> dict:
    """Load a CSV into {column: list[float]}; empty cells become nan.

    Raises SchemaError naming the first required column the file lacks.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rd = csv.DictReader(fh)
        cols = rd.fieldnames or []
        for c in required:
            if c not in cols:
                raise SchemaError(f"{path.name}: missing column {c!r}")
        out = {c: [] for c in cols}
        for row in rd:
            for c in cols:
                raw = row.get(c)
                out[c].append(float(raw) if raw not in ("", None) else math.nan)
    return out
