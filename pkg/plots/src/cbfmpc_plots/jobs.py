"""Plot job descriptions and CSV input validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import yaml

KINDS = ("feasibility_map", "barrier_evolution", "overlay_compare")

GRID_COLUMNS = {"x", "v", "a", "feasible", "status"}
TRAJECTORY_COLUMNS = {"t", "h", "status"}


class PlotSchemaError(ValueError):
    pass


@dataclass
class PlotJob:
    kind: str
    inputs: List[Path]
    output: Path
    labels: Optional[List[str]] = None
    title: Optional[str] = None
    axis_labels: Optional[List[str]] = None
    axis_limits: Optional[List[List[float]]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotSchemaError(f"unknown plot kind {self.kind!r}; expected one of {KINDS}")
        self.inputs = [Path(p) for p in self.inputs]
        self.output = Path(self.output)
        if not self.inputs:
            raise PlotSchemaError("at least one input CSV is required")
        if self.kind == "overlay_compare" and len(self.inputs) != 2:
            raise PlotSchemaError("overlay_compare takes exactly two input CSVs")
        if self.kind == "feasibility_map" and len(self.inputs) != 1:
            raise PlotSchemaError("feasibility_map takes exactly one input CSV")
        missing = [str(p) for p in self.inputs if not p.is_file()]
        if missing:
            raise PlotSchemaError(f"input CSVs do not exist: {missing}")
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise PlotSchemaError("labels must match the number of inputs")


def load_job(path) -> PlotJob:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise PlotSchemaError("job config must be a mapping")
    allowed = {"kind", "inputs", "output", "labels", "title", "axis_labels",
               "axis_limits"}
    unknown = set(data) - allowed
    if unknown:
        raise PlotSchemaError(f"unknown keys in job config: {sorted(unknown)}")
    try:
        return PlotJob(**data)
    except TypeError as exc:
        raise PlotSchemaError(str(exc)) from None


def read_csv_columns(path: Path, required) -> Dict[str, list]:
    """Load a CSV into string-valued columns, enforcing the required names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PlotSchemaError(f"{path}: empty file, expected a header row") from None
        missing = sorted(set(required) - set(header))
        if missing:
            raise PlotSchemaError(f"{path}: missing required column(s) {missing}")
        cols: Dict[str, list] = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                cols[name].append(value)
    return cols
