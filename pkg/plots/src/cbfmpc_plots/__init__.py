"""Figure rendering for cbfmpc experiment artifacts."""

from .jobs import PlotJob, PlotSchemaError, load_job
from .render import render

__version__ = "0.1.0"

__all__ = ["PlotJob", "PlotSchemaError", "load_job", "render", "__version__"]
