"""Weight and activation quantizers with straight-through gradients.

The fixed-point scheme follows the uniform convention: weights are squashed
with tanh, normalized by the per-layer max into [0, 1], snapped onto a
2^k-level grid, and mapped back to [-1, 1]; activations are clipped to [0, 1]
and snapped onto the same grid. Rounding breaks ties away from zero. The
rounding step backpropagates as the identity; the clip backpropagates as the
inclusive indicator of its range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, declare_op, make_op_output

logger = logging.getLogger(__name__)

__all__ = [
    "QuantScheme", "PrecisionPolicy",
    "quantize_unit", "quantize_weight", "quantize_activation", "binarize",
    "quantize_weight_for", "quantize_activation_for",
    "set_debug_checks",
]

OP_QUANTIZE_UNIT = declare_op("quantize_unit")
OP_BINARIZE = declare_op("binarize")

# toggled by tests; range violations are a caller bug, not a runtime state
_debug_checks = False

DEGENERATE_EPS = 1e-12


def set_debug_checks(enabled: bool) -> None:
    """Enable precondition checks (e.g. quantize_unit input range)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@dataclass(frozen=True)
class QuantScheme:
    """Per-layer quantization scheme: identity, k-bit uniform, or binary."""

    kind: str  # "full" | "uniform" | "binary"
    bits: int | None = None

    def __post_init__(self):
        if self.kind not in ("full", "uniform", "binary"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "uniform":
            if self.bits is None or self.bits < 1:
                raise ValueError("uniform scheme needs bits >= 1")
        elif self.bits is not None:
            raise ValueError(f"{self.kind} scheme takes no bitwidth")

    @staticmethod
    def full() -> "QuantScheme":
        return QuantScheme("full")

    @staticmethod
    def uniform(bits: int) -> "QuantScheme":
        return QuantScheme("uniform", bits)

    @staticmethod
    def binary() -> "QuantScheme":
        return QuantScheme("binary")

    def describe(self) -> str:
        if self.kind == "uniform":
            return f"uniform{self.bits}"
        return self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.bits is not None:
            d["bits"] = self.bits
        return d

    @staticmethod
    def from_dict(d: dict) -> "QuantScheme":
        return QuantScheme(d["kind"], d.get("bits"))


@dataclass(frozen=True)
class PrecisionPolicy:
    """Scheme assignment for a whole backbone.

    ``first_layer`` / ``last_layer`` cover the stem conv and the classifier
    dense layer, ``interior`` every other conv, ``activation`` the quantizer
    applied to interior activations.
    """

    first_layer: QuantScheme
    last_layer: QuantScheme
    interior: QuantScheme
    activation: QuantScheme

    @staticmethod
    def default(bits: int) -> "PrecisionPolicy":
        """8-bit first and last layers, k-bit weights and activations inside."""
        return PrecisionPolicy(
            first_layer=QuantScheme.uniform(8),
            last_layer=QuantScheme.uniform(8),
            interior=QuantScheme.uniform(bits),
            activation=QuantScheme.uniform(bits),
        )

    @staticmethod
    def binary_default() -> "PrecisionPolicy":
        return PrecisionPolicy(
            first_layer=QuantScheme.uniform(8),
            last_layer=QuantScheme.uniform(8),
            interior=QuantScheme.binary(),
            activation=QuantScheme.binary(),
        )

    @staticmethod
    def full() -> "PrecisionPolicy":
        full = QuantScheme.full()
        return PrecisionPolicy(full, full, full, full)

    def to_dict(self) -> dict:
        return {
            "first_layer": self.first_layer.to_dict(),
            "last_layer": self.last_layer.to_dict(),
            "interior": self.interior.to_dict(),
            "activation": self.activation.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "PrecisionPolicy":
        return PrecisionPolicy(*(QuantScheme.from_dict(d[k]) for k in
                                 ("first_layer", "last_layer", "interior", "activation")))


# ---------------------------------------------------------------------------
# primitives

def _identity_bw(ctx, g):
    return (g,)


def quantize_unit(x: Tensor, bits: int) -> Tensor:
    """Snap values in [0, 1] onto the grid {i / (2^k - 1)}.

    Forward: round((2^k - 1) x) / (2^k - 1), ties away from zero. Backward is
    the straight-through identity, installed as this op's rule so the grid
    snap is gradient-transparent bit for bit.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if _debug_checks and x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ValueError(
            f"quantize_unit input outside [0, 1]: range "
            f"[{x.data.min()}, {x.data.max()}] (caller must clip)")
    s = float((1 << bits) - 1)
    out = ops.round_half_away(x.data * s) / s
    return make_op_output(OP_QUANTIZE_UNIT, out, (x,), {}, _identity_bw)


def quantize_weight(w: Tensor, bits: int) -> Tensor:
    """Uniform k-bit weight quantizer, per layer, output in [-1, 1].

    tanh squashes the weights, the per-layer max |tanh| normalizes them into
    [0, 1], the unit quantizer snaps, and an affine map recenters to [-1, 1].
    The normalization max is treated as a constant in backward; tanh and the
    affine pieces differentiate analytically, and the rounding step is the
    straight-through identity.
    """
    t = ops.tanh(w)
    m = float(np.abs(t.data).max()) if t.data.size else 0.0
    if m < DEGENERATE_EPS:
        logger.warning(
            "quantize_weight: max |tanh(w)| = %.3g below %.1g; emitting zeros "
            "with no gradient for this layer", m, DEGENERATE_EPS)
        return Tensor(np.zeros_like(w.data))
    u = ops.shift(ops.scale(t, divisor=2.0 * m), 0.5)
    q = quantize_unit(u, bits)
    return ops.shift(ops.scale(q, 2.0), -1.0)


def quantize_activation(a: Tensor, bits: int) -> Tensor:
    """Clip to [0, 1], then snap onto the k-bit grid.

    The combined backward is the clipped straight-through estimator: upstream
    gradient times the inclusive indicator of 0 <= a <= 1.
    """
    return quantize_unit(ops.clip(a, 0.0, 1.0), bits)


def _binarize_bw(ctx, g):
    return (g * ctx["mask"],)


def binarize(x: Tensor) -> Tensor:
    """Sign quantizer onto {-1, +1}, with sign(0) = +1.

    Backward is the clipped straight-through estimator: gradient passes
    where |x| <= 1 and is zeroed outside.
    """
    out = np.where(x.data >= 0, 1.0, -1.0).astype(x.data.dtype)
    ctx = {"mask": (np.abs(x.data) <= 1.0).astype(x.data.dtype)}
    return make_op_output(OP_BINARIZE, out, (x,), ctx, _binarize_bw)


# ---------------------------------------------------------------------------
# scheme dispatch

def quantize_weight_for(scheme: QuantScheme, w: Tensor) -> Tensor:
    """Apply a scheme to a weight tensor. Full is the exact identity: the
    input tensor is returned unchanged."""
    if scheme.kind == "full":
        return w
    if scheme.kind == "uniform":
        return quantize_weight(w, scheme.bits)
    return binarize(w)


def quantize_activation_for(scheme: QuantScheme, a: Tensor) -> Tensor:
    """Apply a scheme to an activation tensor (Full is the exact identity)."""
    if scheme.kind == "full":
        return a
    if scheme.kind == "uniform":
        return quantize_activation(a, scheme.bits)
    return binarize(a)
