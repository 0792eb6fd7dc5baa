"""Engine properties and the job hierarchy descriptors (cluster/worker)."""

import os
from dataclasses import dataclass, field

from .errors import PropertyError

DEFAULTS = {
    "ignis.executor.instances": "2",
    "ignis.executor.cores": "1",
    "ignis.partitions": "4",
    "ignis.partition.storage": "memory",       # memory | rawmemory | disk
    "ignis.partition.compression": "6",        # zlib level for rawmemory/disk
    "ignis.partition.directory": "",           # empty -> per-worker temp dir
    "ignis.transport.ports": "31100-31499",
    "ignis.transport.connectTimeout": "5",     # seconds
    "ignis.transport.collectiveTimeout": "120",
    "ignis.transport.probeInterval": "0.25",
    "ignis.scheduler.heartbeatInterval": "2",
    "ignis.scheduler.heartbeatMisses": "3",
    "ignis.scheduler.retries": "3",
    "ignis.scheduler.maxIterations": "100",
    "ignis.driver.resultCap": str(256 * 1024 * 1024),
    "ignis.driver.memory": "1GB",              # accepted for submit parity, not enforced
    "ignis.worker.shared": "false",
}

DRIVER_PREFIX = "ignis.driver."


class Properties:
    """String-to-string configuration with engine defaults.

    Reading an unset key returns the documented default. Driver-scoped keys
    (prefix ``ignis.driver.``) are normally set by ignis-submit; once the
    properties are sealed (session started, or delivered by the submitter)
    they reject modification.
    """

    def __init__(self, entries=None, locked_driver_keys=None):
        self._entries = dict(entries) if entries else {}
        if locked_driver_keys is None:
            # under a submitted job, driver keys come from ignis-submit only
            locked_driver_keys = "IGNIS_PROPERTIES" in os.environ
        self._locked_driver_keys = locked_driver_keys
        self._sealed = False

    def get(self, key, default=None):
        if key in self._entries:
            return self._entries[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        if default is not None:
            return default
        raise PropertyError(f"unknown property {key!r} and no default")

    def set(self, key, value):
        if key.startswith(DRIVER_PREFIX) and (self._sealed or self._locked_driver_keys):
            raise PropertyError(f"{key!r} is a driver property; set it via ignis-submit")
        self._entries[key] = str(value)
        return self

    def _apply(self, key, value):
        """Internal: set bypassing the driver-key lock (submit delivery path)."""
        self._entries[key] = str(value)
        return self

    def unset(self, key):
        self._entries.pop(key, None)
        return self

    def contains(self, key):
        return key in self._entries or key in DEFAULTS

    def seal(self):
        self._sealed = True
        return self

    def copy(self):
        p = Properties(self._entries, self._locked_driver_keys)
        return p

    def to_dict(self):
        merged = dict(DEFAULTS)
        merged.update(self._entries)
        return merged

    def get_int(self, key):
        return int(self.get(key))

    def get_float(self, key):
        return float(self.get(key))

    def get_bool(self, key):
        return self.get(key).strip().lower() in ("1", "true", "yes", "on")

    def ports(self):
        """Expand ignis.transport.ports into an ordered list of candidate ports."""
        out = []
        for entry in self.get("ignis.transport.ports").split(","):
            entry = entry.strip()
            if not entry:
                continue
            if "-" in entry:
                lo, hi = entry.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(entry))
        if not out:
            raise PropertyError("ignis.transport.ports is empty")
        return out

    def __repr__(self):
        return f"Properties({self._entries!r})"


@dataclass
class WorkerDesc:
    """A group of executors bound to one function-registry namespace."""

    id: str
    instances: int
    shared: bool = False

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("a worker needs at least one executor")


@dataclass
class ClusterDesc:
    id: str
    properties: Properties
    workers: list = field(default_factory=list)
