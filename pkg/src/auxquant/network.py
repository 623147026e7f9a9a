"""Declarative backbone construction: stem conv, residual or plain blocks,
global-average-pool classifier, per-layer precision policy, and tap points
exposing quantized block outputs to side networks.

Block layout (two 3x3 conv+BN+activation pairs):

    in -> conv1 -> BN -> ReLU -> actq -> conv2 -> BN -> [+ skip] -> ReLU -> actq -> out

The skip path (residual blocks only) is the identity, or a strided 1x1
conv+BN projection when the shape changes; the addition itself runs in full
precision and the block output is quantized once. Taps are the quantized
block outputs, exactly the tensors the next block consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, rng
from .errors import SpecValidationError
from .quantize import PrecisionPolicy, QuantScheme, quantize_activation_for, quantize_weight_for
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "BlockSpec", "NetworkSpec", "Network",
    "build_network", "forward_backbone", "plain4_spec", "res4_spec",
]


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kind: str = "residual"  # "residual" | "plain"

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "stride": self.stride, "kind": self.kind}

    @staticmethod
    def from_dict(d: dict) -> "BlockSpec":
        return BlockSpec(d["in_channels"], d["out_channels"], d.get("stride", 1),
                         d.get("kind", "residual"))


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    stem_channels: int
    blocks: tuple
    num_classes: int
    policy: PrecisionPolicy
    tap_indices: tuple = ()  # empty means every block

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        taps = tuple(self.tap_indices) if self.tap_indices else tuple(range(len(self.blocks)))
        object.__setattr__(self, "tap_indices", taps)

    def validate(self) -> list[str]:
        """All violations found, empty when the spec is well formed."""
        errs = []
        if self.in_channels < 1:
            errs.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.stem_channels < 1:
            errs.append(f"stem_channels must be >= 1, got {self.stem_channels}")
        if self.num_classes < 2:
            errs.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.blocks:
            errs.append("need at least one block")
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.kind not in ("residual", "plain"):
                errs.append(f"block {i}: unknown kind {b.kind!r}")
            if b.in_channels != prev:
                errs.append(f"block {i}: in_channels {b.in_channels} does not chain "
                            f"from previous width {prev}")
            if b.stride < 1:
                errs.append(f"block {i}: stride must be >= 1, got {b.stride}")
            prev = b.out_channels
        taps = self.tap_indices
        if any(t < 0 or t >= len(self.blocks) for t in taps):
            errs.append(f"tap_indices {taps} out of range for {len(self.blocks)} blocks")
        if any(b >= a for a, b in zip(taps[1:], taps)):
            errs.append(f"tap_indices {taps} must be strictly increasing")
        return errs

    def with_policy(self, policy: PrecisionPolicy) -> "NetworkSpec":
        return NetworkSpec(self.in_channels, self.stem_channels, self.blocks,
                           self.num_classes, policy, self.tap_indices)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "blocks": [b.to_dict() for b in self.blocks],
            "num_classes": self.num_classes,
            "policy": self.policy.to_dict(),
            "tap_indices": list(self.tap_indices),
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            in_channels=d["in_channels"],
            stem_channels=d["stem_channels"],
            blocks=tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            num_classes=d["num_classes"],
            policy=PrecisionPolicy.from_dict(d["policy"]),
            tap_indices=tuple(d.get("tap_indices") or ()),
        )


def plain4_spec(num_classes: int, in_channels: int = 1,
                policy: PrecisionPolicy | None = None,
                tap_indices: tuple = ()) -> NetworkSpec:
    """Desk-scale 4-block plain backbone, widths 16-32-64-64."""
    return _preset(num_classes, in_channels, "plain", policy, tap_indices)


def res4_spec(num_classes: int, in_channels: int = 1,
              policy: PrecisionPolicy | None = None,
              tap_indices: tuple = ()) -> NetworkSpec:
    """Same shape as plain4 but with residual skip paths."""
    return _preset(num_classes, in_channels, "residual", policy, tap_indices)


def _preset(num_classes, in_channels, kind, policy, tap_indices) -> NetworkSpec:
    widths = (16, 32, 64, 64)
    strides = (1, 2, 2, 1)
    blocks = []
    prev = 16
    for w, s in zip(widths, strides):
        blocks.append(BlockSpec(prev, w, s, kind))
        prev = w
    return NetworkSpec(
        in_channels=in_channels, stem_channels=16, blocks=tuple(blocks),
        num_classes=num_classes, policy=policy or PrecisionPolicy.full(),
        tap_indices=tap_indices)


# ---------------------------------------------------------------------------
# layers

class ConvLayer:
    def __init__(self, name, in_ch, out_ch, kernel, stride, padding, scheme, gen, dtype):
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        w = gen.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel))
        self.weight = Parameter(f"{name}.w", w, dtype=dtype)
        self.stride = stride
        self.padding = padding
        self.scheme = scheme

    def forward(self, x, weight):
        return ops.conv2d(x, weight, stride=self.stride, padding=self.padding)


class BatchNormLayer:
    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), dtype=dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._prefix = name

    def forward(self, x, training):
        return ops.batchnorm(x, self.gamma.master, self.beta.master,
                             self.running_mean, self.running_var,
                             training, self.momentum, self.eps)

    def buffers(self):
        return {f"{self._prefix}.running_mean": self.running_mean,
                f"{self._prefix}.running_var": self.running_var}


class DenseLayer:
    def __init__(self, name, in_features, out_features, scheme, gen, dtype):
        std = np.sqrt(2.0 / in_features)
        w = gen.normal(0.0, std, size=(in_features, out_features))
        self.weight = Parameter(f"{name}.w", w, dtype=dtype)
        self.scheme = scheme

    def forward(self, x, weight):
        return ops.matmul(x, weight)


class _Block:
    def __init__(self, index, spec: BlockSpec, policy, gen, dtype):
        p = f"block{index}"
        self.spec = spec
        self.conv1 = ConvLayer(f"{p}.conv1", spec.in_channels, spec.out_channels, 3,
                               spec.stride, 1, policy.interior, gen, dtype)
        self.bn1 = BatchNormLayer(f"{p}.bn1", spec.out_channels, dtype)
        self.conv2 = ConvLayer(f"{p}.conv2", spec.out_channels, spec.out_channels, 3,
                               1, 1, policy.interior, gen, dtype)
        self.bn2 = BatchNormLayer(f"{p}.bn2", spec.out_channels, dtype)
        self.skip_conv = None
        self.skip_bn = None
        if spec.kind == "residual" and (spec.stride != 1 or spec.in_channels != spec.out_channels):
            self.skip_conv = ConvLayer(f"{p}.skip.conv", spec.in_channels, spec.out_channels,
                                       1, spec.stride, 0, policy.interior, gen, dtype)
            self.skip_bn = BatchNormLayer(f"{p}.skip.bn", spec.out_channels, dtype)


class Network:
    """A built backbone: parameters, buffers, and the quantized forward."""

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        errs = spec.validate()
        if errs:
            raise SpecValidationError(errs)
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        gen = rng.stream(seed, "init")
        pol = spec.policy
        self.stem_conv = ConvLayer("stem.conv", spec.in_channels, spec.stem_channels,
                                   3, 1, 1, pol.first_layer, gen, self.dtype)
        self.stem_bn = BatchNormLayer("stem.bn", spec.stem_channels, self.dtype)
        self.blocks = [_Block(i, b, pol, gen, self.dtype) for i, b in enumerate(spec.blocks)]
        self.classifier = DenseLayer("classifier", spec.blocks[-1].out_channels,
                                     spec.num_classes, pol.last_layer, gen, self.dtype)

    # -- parameter access ---------------------------------------------------

    def conv_dense_layers(self):
        yield self.stem_conv
        for b in self.blocks:
            yield b.conv1
            yield b.conv2
            if b.skip_conv is not None:
                yield b.skip_conv
        yield self.classifier

    def bn_layers(self):
        yield self.stem_bn
        for b in self.blocks:
            yield b.bn1
            yield b.bn2
            if b.skip_bn is not None:
                yield b.skip_bn

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for layer in self.conv_dense_layers():
            out[layer.weight.name] = layer.weight
        for bn in self.bn_layers():
            out[bn.gamma.name] = bn.gamma
            out[bn.beta.name] = bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.bn_layers():
            out.update(bn.buffers())
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # -- precision ----------------------------------------------------------

    def bind_weights(self, trainable: bool) -> dict[str, Tensor]:
        """Per-step effective weights: masters quantized under their schemes.

        Full-scheme layers pass their master straight through (exact
        identity, shared object). Quantized layers get a fresh leaf tensor
        carrying the parameter's name, so gradients computed against the
        quantized weights map back onto the masters unchanged.
        """
        eff = {}
        for layer in self.conv_dense_layers():
            p = layer.weight
            if layer.scheme.kind == "full":
                eff[p.name] = p.master
            else:
                with no_grad():
                    q = quantize_weight_for(layer.scheme, p.master)
                eff[p.name] = Tensor(q.data, requires_grad=trainable, name=p.name)
        return eff

    def precision_report(self) -> list[dict]:
        """Applied scheme per layer, for auditing against the policy."""
        rows = []
        for layer in self.conv_dense_layers():
            kind = "dense" if isinstance(layer, DenseLayer) else "conv"
            rows.append({"layer": layer.weight.name, "kind": kind,
                         "weight_scheme": layer.scheme.describe()})
        for bn in self.bn_layers():
            rows.append({"layer": bn._prefix, "kind": "batchnorm", "weight_scheme": "full"})
        rows.append({"layer": "activations", "kind": "activation",
                     "weight_scheme": self.spec.policy.activation.describe()})
        return rows

    def _actq(self, t: Tensor) -> Tensor:
        return quantize_activation_for(self.spec.policy.activation, t)

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "eval",
                weights: dict[str, Tensor] | None = None,
                conv_input_log: dict | None = None):
        """Backbone forward pass.

        Returns (logits, taps) where taps are the quantized block outputs for
        the spec's tap indices, in order, aliasing the internal activations
        bit for bit. ``conv_input_log``, when given a dict, records every
        conv layer's input array for instrumentation.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        if weights is None:
            weights = self.bind_weights(trainable=False)

        def run_conv(layer, inp):
            if conv_input_log is not None:
                conv_input_log[layer.weight.name] = inp.data
            return layer.forward(inp, weights[layer.weight.name])

        h = run_conv(self.stem_conv, x)
        h = self.stem_bn.forward(h, training)
        h = self._actq(ops.relu(h))

        tap_set = set(self.spec.tap_indices)
        taps = []
        for i, block in enumerate(self.blocks):
            inp = h
            h = run_conv(block.conv1, h)
            h = block.bn1.forward(h, training)
            h = self._actq(ops.relu(h))
            h = run_conv(block.conv2, h)
            h = block.bn2.forward(h, training)
            if block.spec.kind == "residual":
                if block.skip_conv is not None:
                    s = run_conv(block.skip_conv, inp)
                    s = block.skip_bn.forward(s, training)
                else:
                    s = inp
                h = ops.add(h, s)
            h = self._actq(ops.relu(h))
            if i in tap_set:
                taps.append(h)

        feats = ops.global_avg_pool(h)
        logits = self.classifier.forward(feats, weights[self.classifier.weight.name])
        return logits, taps

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        """Copy named arrays into masters and running stats (strict names)."""
        own = self.parameters()
        for name, p in own.items():
            if name not in params:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(params[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.master.data = np.ascontiguousarray(arr.copy())
        own_buf = self.buffers()
        for name, buf in own_buf.items():
            if name not in buffers:
                raise KeyError(f"missing buffer {name!r} in state")
            np.copyto(buf, np.asarray(buffers[name], dtype=self.dtype))


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """Allocate and He-initialize a backbone from its spec.

    Parameter names are stable path-like strings; the same seed always yields
    bit-identical initial parameters.
    """
    return Network(spec, seed, dtype)


def forward_backbone(net: Network, x: Tensor, mode: str = "eval",
                     weights: dict[str, Tensor] | None = None):
    """Functional alias for :meth:`Network.forward`."""
    return net.forward(x, mode, weights)
