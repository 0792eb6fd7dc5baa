"""Desk-scale dataflow engine: MapReduce-style operators over multi-process
executors that talk through MPI-style communicators.

The user-facing surface lives in ignis.api (Ignis, ICluster, IWorker,
IDataFrame, ISource); everything else is engine machinery. The API names are
re-exported lazily so importing a leaf module (ignis.values, ignis.storage)
does not pull in the whole engine.
"""

__version__ = "0.1.0"

_API_NAMES = ("Ignis", "ICluster", "IWorker", "IDataFrame", "ISource")

__all__ = list(_API_NAMES) + ["Properties", "IProperties"]


def __getattr__(name):
    if name in _API_NAMES:
        from . import api

        return getattr(api, name)
    if name in ("Properties", "IProperties"):
        from .model import Properties

        return Properties
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
