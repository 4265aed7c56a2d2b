"""Tape-based reverse-mode differentiation.

Operations in :mod:`xfuse.functional` append a :class:`Node` to the active
:class:`Tape` whenever at least one input requires a gradient.  Because
nodes are appended as they are computed the tape is already in topological
order, so :meth:`Tape.backward` is a single reverse sweep.

    with Tape() as tape:
        loss = model_loss(params)
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np


class TraceError(RuntimeError):
    """The tape is inconsistent (an input recorded after its consumer)."""


class Tensor:
    """A float64 array that may take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A leaf tensor owned by a :class:`ParamStore`."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _TapeStack()


def current_tape() -> "Tape | None":
    stack = _state.stack
    return stack[-1] if stack else None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        position = {id(node.output): i for i, node in enumerate(self.nodes)}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in position:
            _accumulate_leaf(loss, grads.pop(id(loss)))
            return
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                src = position.get(id(inp))
                if src is None:
                    _accumulate_leaf(inp, gi)
                elif src >= i:
                    raise TraceError(f"node {i} ({node.op}) consumes the output of later node {src}")
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


class ParamStore:
    """Named parameters with gradients.  Iteration order is insertion order."""

    def __init__(self, items: Iterable[tuple[str, Parameter]] = ()):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for name, p in items:
            self.add(name, p)

    def add(self, name: str, p: Parameter) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p.name = name
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, p.shape) for n, p in self._params.items()]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n, p in self._params.items():
            if n.startswith(prefix):
                p.trainable = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}


# ----------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        return (f"{status}: max relative error {self.max_rel_error:.3e} (tol {self.tol:g}) "
                f"over {self.checked} coordinates{where}")


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model_fn: Callable[..., Tensor], params, inputs=None, eps: float = 1e-5,
               tol: float = 1e-3, samples: int = 32, seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``params`` is a :class:`ParamStore` or a ``{name: Tensor}`` mapping;
    ``model_fn(inputs)`` (or ``model_fn()`` when ``inputs`` is None) must
    return a scalar tensor.  Tensors with more than ``samples`` entries are
    checked on a random subset of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    call = (lambda: model_fn()) if inputs is None else (lambda: model_fn(inputs))
    named = list(params.items())
    for _, p in named:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = call()
    tape.backward(loss)
    analytic = {n: p.grad.copy() for n, p in named}

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    per_param: dict[str, float] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size) if flat.size <= samples else np.sort(
            rng.choice(flat.size, size=samples, replace=False))
        errs = []
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = call().item()
            flat[k] = orig - eps
            f_minus = call().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = relative_error(float(analytic[name].reshape(-1)[k]), numeric, floor)
            errs.append(err)
            if err > worst_err or worst_at is None:
                worst_err = max(worst_err, err)
                worst_at = (name, tuple(int(i) for i in np.unravel_index(k, p.shape)))
        checked += len(coords)
        per_param[name] = max(errs) if errs else 0.0
    return GradCheckReport(worst_err, tol, checked, worst_at, per_param)
