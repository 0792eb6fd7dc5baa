"""Function registry and source references.

Operator logic reaches executors in exactly two shapes: a *registry name*
(a function registered under a known name, loaded by importing a library
module) or a *text lambda*. Driver-side conveniences also accept a plain
Python function from an importable module, which travels as "module:qualname"
and is imported on the executor; no host-language code is ever serialized.

A SourceRef bundles the target with captured variables; the variables are
placed verbatim into the executor Context before each invocation.
"""

import importlib
import importlib.util
import inspect
import sys
import threading

from .errors import ArityMismatchError, UnknownFunctionError
from .lambdas import LambdaText, lambda_from_value, lambda_to_value, parse_lambda_source

_registry = {}
_registry_lock = threading.Lock()


def register(fn, name=None, returns_value=True):
    """Register a callable under `name` (default: its __name__)."""
    sig = inspect.signature(fn)
    arity = len(sig.parameters) - 1  # first parameter is the executor context
    if arity < 0:
        raise ArityMismatchError(f"{fn!r} must accept the executor context")
    key = name or fn.__name__
    with _registry_lock:
        _registry[key] = (fn, arity, returns_value)
    return fn


def ignis_fn(fn=None, *, name=None, returns=True):
    """Decorator form of register()."""
    if fn is None:
        return lambda f: register(f, name=name, returns_value=returns)
    return register(fn, name=name)


def registered_names():
    with _registry_lock:
        return sorted(_registry)


def load_library(target):
    """Import a library module (dotted name or .py path); returns new names."""
    before = set(registered_names())
    if target.endswith(".py"):
        mod_name = "ignis_lib_" + str(abs(hash(target)) % 10**10)
        if mod_name not in sys.modules:
            spec = importlib.util.spec_from_file_location(mod_name, target)
            if spec is None or spec.loader is None:
                raise UnknownFunctionError(f"cannot load library {target!r}")
            module = importlib.util.module_from_spec(spec)
            sys.modules[mod_name] = module
            spec.loader.exec_module(module)
    else:
        importlib.import_module(target)
    return sorted(set(registered_names()) - before)


class UserFn:
    """Executor-side callable with known arity and void-ness."""

    __slots__ = ("call", "arity", "returns_value", "name")

    def __init__(self, call, arity, returns_value=True, name="?"):
        self.call = call
        self.arity = arity
        self.returns_value = returns_value
        self.name = name

    def __call__(self, ctx, *args):
        if len(args) != self.arity:
            raise ArityMismatchError(
                f"{self.name} takes {self.arity} arguments, got {len(args)}"
            )
        return self.call(ctx, *args)


def _module_callable(ref):
    mod_name, _, qualname = ref.partition(":")
    module = importlib.import_module(mod_name)
    obj = module
    for part in qualname.split("."):
        obj = getattr(obj, part)
    return obj


def resolve(kind, target, namespace=""):
    """Turn a (kind, target) pair into a UserFn on this process."""
    if kind == "lambda":
        l = lambda_from_value(target)
        return UserFn(
            lambda ctx, *args: _eval_for_ctx(l, args, ctx),
            l.arity,
            True,
            f"lambda/{l.arity}",
        )
    if kind == "module":
        fn = _module_callable(target)
        sig = inspect.signature(fn)
        return UserFn(fn, len(sig.parameters) - 1, True, target)
    if kind == "registry":
        with _registry_lock:
            entry = _registry.get(target)
        if entry is None and namespace:
            with _registry_lock:
                entry = _registry.get(f"{namespace}.{target}")
        if entry is None:
            raise UnknownFunctionError(
                f"function {target!r} is not registered (namespace {namespace!r}); "
                f"did loadLibrary run?"
            )
        fn, arity, returns_value = entry
        return UserFn(fn, arity, returns_value, target)
    raise UnknownFunctionError(f"unknown source kind {kind!r}")


def _eval_for_ctx(l, args, ctx):
    from .lambdas import eval_lambda

    return eval_lambda(l, list(args), ctx.vars if ctx is not None else {})


class SourceRef:
    """A function target plus captured variables, in wire-encodable form."""

    __slots__ = ("kind", "target", "params")

    def __init__(self, kind, target, params=None):
        self.kind = kind      # "registry" | "module" | "lambda"
        self.target = target  # name | "mod:qual" | (params, body)
        self.params = dict(params) if params else {}

    @staticmethod
    def of(target, params=None):
        """Coerce user input: SourceRef, callable, lambda text, registry name."""
        if isinstance(target, SourceRef):
            if params:
                merged = dict(target.params)
                merged.update(params)
                return SourceRef(target.kind, target.target, merged)
            return target
        if isinstance(target, LambdaText):
            return SourceRef("lambda", lambda_to_value(target), params)
        if callable(target):
            mod = getattr(target, "__module__", None)
            qual = getattr(target, "__qualname__", "")
            if not mod or mod == "__main__" or "<locals>" in qual or "<lambda>" in qual:
                raise UnknownFunctionError(
                    f"{target!r} is not shippable: use a module-level function, a "
                    f"registry name or a text lambda"
                )
            return SourceRef("module", f"{mod}:{qual}", params)
        if isinstance(target, str):
            if target.lstrip().startswith("lambda"):
                return SourceRef("lambda", lambda_to_value(parse_lambda_source(target)), params)
            return SourceRef("registry", target, params)
        raise UnknownFunctionError(f"cannot interpret {target!r} as a function source")

    def add_param(self, name, value):
        self.params[name] = value
        return self

    def to_value(self):
        if self.kind == "lambda":
            target = (list(self.target[0]), self.target[1])
        else:
            target = self.target
        return [self.kind, target, [(k, v) for k, v in self.params.items()]]

    @staticmethod
    def from_value(v):
        kind, target, params = v
        if kind == "lambda":
            target = (list(target[0]), target[1])
        return SourceRef(kind, target, {k: val for k, val in params})

    def fingerprint(self):
        """Stable identity used for co-partitioning checks."""
        return (self.kind, repr(self.target))

    def __repr__(self):
        return f"SourceRef({self.kind}, {self.target!r})"


# builtins usable by name from any worker ----------------------------------------

@ignis_fn(name="builtin.identity")
def _identity(ctx, x):
    return x


@ignis_fn(name="builtin.pair_key")
def _pair_key(ctx, x):
    return x[0]


@ignis_fn(name="builtin.pair_value")
def _pair_value(ctx, x):
    return x[1]


@ignis_fn(name="builtin.sample_by_key")
def _sample_by_key(ctx, grouped):
    """flatmap body behind sampleByKey: Pair(k, List) -> sampled Pair(k, v)."""
    from .operators import _poisson, _rng_floats
    from .values import hash_value

    key, values = grouped
    fractions = {hash_value(k): float(f) for k, f in ctx.var("fractions")}
    fraction = fractions.get(hash_value(key))
    if fraction is None:
        return []
    seed = (ctx.var("seed") ^ hash_value(key)) & ((1 << 64) - 1)
    floats = _rng_floats(seed)
    out = []
    if ctx.var("withReplacement"):
        for v in values:
            for _ in range(_poisson(fraction, floats)):
                out.append((key, v))
    else:
        for v in values:
            if next(floats) < fraction:
                out.append((key, v))
    return out


IDENTITY = SourceRef("registry", "builtin.identity")
PAIR_KEY = SourceRef("registry", "builtin.pair_key")

# partitionBy fingerprints that make groupByKey/reduceByKey skip the exchange
KEY_ROUTING_FINGERPRINTS = {
    PAIR_KEY.fingerprint(),
    SourceRef("lambda", (["x"], "fst x")).fingerprint(),
}
