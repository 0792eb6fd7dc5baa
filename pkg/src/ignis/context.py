"""Executor context: what user functions see when they run."""

from .errors import UnknownVariableError


class Context:
    """Handed to every user function on the executor.

    Exposes the executor's coordinates, the driver-captured variables of the
    current invocation, the worker's live base communicator (`comm`) for
    collective-using functions, and `state`, a scratch dict that survives
    across the iterations of one executor-resident loop.
    """

    def __init__(self, worker_id, rank, executors, props, variables=None, comm=None,
                 thread_id=0, state=None, metrics=None):
        self.worker_id = worker_id
        self.rank = rank
        self.executors = executors
        self.props = props
        self.vars = dict(variables) if variables else {}
        self.comm = comm
        self.thread_id = thread_id
        self.state = state if state is not None else {}
        self.metrics = metrics if metrics is not None else {}

    def count(self, key, amount=1):
        self.metrics[key] = self.metrics.get(key, 0) + amount

    def var(self, name, default=None):
        if name in self.vars:
            return self.vars[name]
        if default is not None:
            return default
        raise UnknownVariableError(f"context variable {name!r} is not set")

    def with_vars(self, variables, state=None):
        return Context(
            self.worker_id, self.rank, self.executors, self.props,
            variables, self.comm, self.thread_id,
            state if state is not None else self.state, self.metrics,
        )

    def __repr__(self):
        return f"Context({self.worker_id}/{self.rank} of {self.executors})"
