"""Dense tensors recorded on a reverse-mode autodiff tape.

A :class:`Tensor` wraps a contiguous numpy array. Whenever an op runs with at
least one input that requires gradient (and recording is enabled), the output
carries a :class:`TapeNode` remembering the op id, the input tensors, a saved
forward context and the op's backward rule. :func:`backward` walks the
recorded graph once, in reverse topological order.

Backward rules can be replaced per op id at runtime through
:func:`register_custom_backward`. A registered rule fully replaces the
built-in rule for that op on every subsequent backward pass; this is the
mechanism that lets a non-differentiable op such as ``round`` (whose true
derivative is zero almost everywhere) act as the identity during
backpropagation.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericFaultError

__all__ = [
    "Tensor",
    "TapeNode",
    "Parameter",
    "backward",
    "backward_multi",
    "register_custom_backward",
    "no_grad",
    "declare_op",
]

# Backward rules take (ctx, upstream_grad) and return one gradient array per
# node input, with None marking inputs that receive no gradient.
BackwardRule = Callable[[dict, np.ndarray], tuple]

_grad_enabled = True
_known_ops: set[str] = set()
_custom_rules: dict[str, BackwardRule] = {}


def declare_op(op_id: str) -> str:
    """Register an op id so custom backward rules may target it."""
    _known_ops.add(op_id)
    return op_id


class CustomBackwardHandle:
    """Removable registration of a custom backward rule."""

    def __init__(self, op_id: str):
        self.op_id = op_id
        self._active = True

    def remove(self) -> None:
        if self._active:
            _custom_rules.pop(self.op_id, None)
            self._active = False


def register_custom_backward(op_id: str, rule: BackwardRule) -> CustomBackwardHandle:
    """Replace the backward rule of ``op_id`` for all subsequent backwards.

    The rule must return one gradient per node input, each matching that
    input's shape (or None). Violations surface as NumericFaultError during
    backward. Returns a handle whose ``remove()`` restores the built-in rule.
    """
    if op_id not in _known_ops:
        raise ValueError(f"unknown op id {op_id!r}; known ops: {sorted(_known_ops)}")
    _custom_rules[op_id] = rule
    return CustomBackwardHandle(op_id)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded op: inputs, saved forward context, and backward rule."""

    __slots__ = ("op", "inputs", "ctx", "rule")

    def __init__(self, op: str, inputs: tuple, ctx: dict, rule: BackwardRule):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.rule = rule


class Tensor:
    """N-dimensional float array, optionally recorded on the tape.

    ``name`` marks graph leaves (parameters, quantized weight proxies) so
    that :func:`backward` can report their gradients by name.
    """

    __slots__ = ("data", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}"
        if self.name:
            head += f", name={self.name!r}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"


class Parameter:
    """A named, trainable master tensor.

    The master stays full precision for the whole run; quantization reads it
    and never writes back. ``grad`` holds the most recent applied gradient.
    """

    __slots__ = ("name", "master", "grad")

    def __init__(self, name: str, data, dtype=None):
        self.name = name
        self.master = Tensor(data, requires_grad=True, name=name, dtype=dtype)
        self.grad: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.master.data

    @property
    def shape(self) -> tuple:
        return self.master.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def make_op_output(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], ctx: dict | None, rule: BackwardRule) -> Tensor:
    """Wrap an op's forward result, recording a tape node when needed.

    Raises NumericFaultError when the forward result contains NaN/Inf; a
    non-finite value is an error state, never silently propagated.
    """
    if not out_data.flags.c_contiguous:
        out_data = np.ascontiguousarray(out_data)
    if not np.isfinite(out_data).all():
        raise NumericFaultError(op, "non-finite values in forward output")
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), ctx if ctx is not None else {}, rule)
    return out


def recording(*tensors: Tensor) -> bool:
    """True when an op over these inputs would land on the tape."""
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _toposort(roots: Iterable[Tensor]) -> tuple[list[Tensor], dict[int, Tensor]]:
    """Postorder over tensors that carry tape nodes, plus named leaves seen.

    The tape is a DAG by construction (nodes only ever reference tensors that
    already exist), so no cycle check is needed; the visited set guarantees
    each node is traversed exactly once.
    """
    order: list[Tensor] = []
    named_leaves: dict[int, Tensor] = {}
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        if t.node is None:
            if t.requires_grad and t.name is not None:
                named_leaves[id(t)] = t
            continue
        stack.append((t, True))
        for inp in t.node.inputs:
            if id(inp) not in visited:
                stack.append((inp, False))
    return order, named_leaves


def backward_multi(roots: Sequence[Tensor]) -> list[dict[str, np.ndarray]]:
    """Reverse-mode sweep from several scalar roots in one traversal.

    Gradients for the k-th root are carried in channel k; channels never mix,
    so the result is identical to k independent backward passes while walking
    the shared graph once. Returns, per root, a map from named-leaf name to
    gradient array. Leaves unreachable from a root are absent from its map.
    """
    roots = list(roots)
    for r in roots:
        if r.data.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {r.data.shape}")
    n = len(roots)
    order, named_leaves = _toposort(roots)
    grads: dict[int, list] = {}
    for ch, r in enumerate(roots):
        if not r.requires_grad:
            continue
        slot = grads.setdefault(id(r), [None] * n)
        seed = np.ones((), dtype=r.data.dtype)
        slot[ch] = seed if slot[ch] is None else slot[ch] + seed

    for t in reversed(order):
        slot = grads.pop(id(t), None)
        if slot is None:
            continue
        node = t.node
        rule = _custom_rules.get(node.op, node.rule)
        for ch, g in enumerate(slot):
            if g is None:
                continue
            in_grads = rule(node.ctx, g)
            if len(in_grads) != len(node.inputs):
                raise NumericFaultError(
                    node.op,
                    f"backward rule returned {len(in_grads)} gradients for {len(node.inputs)} inputs",
                )
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig)
                if ig.shape != inp.data.shape:
                    raise NumericFaultError(
                        node.op,
                        f"backward rule produced gradient of shape {ig.shape} "
                        f"for input of shape {inp.data.shape}",
                    )
                islot = grads.setdefault(id(inp), [None] * n)
                islot[ch] = ig if islot[ch] is None else islot[ch] + ig

    results: list[dict[str, np.ndarray]] = [{} for _ in range(n)]
    for tid, leaf in named_leaves.items():
        slot = grads.get(tid)
        if slot is None:
            continue
        for ch, g in enumerate(slot):
            if g is not None:
                results[ch][leaf.name] = g
    return results


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every reachable named leaf.

    Unreachable leaves are absent from the map (callers treat absent as
    zero). Custom rules registered at call time are honored.
    """
    return backward_multi([loss])[0]
