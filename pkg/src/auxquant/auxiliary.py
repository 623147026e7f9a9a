"""Full-precision auxiliary side network and the joint training objective.

The side network H reads the backbone's quantized tap outputs through small
adaptors (conv + BN), folds them into a running feature with

    g_p = ReLU(adaptor_p(O_p) + g_{p-1}),    g_0 = 0,

and classifies g_P with a global-average-pool + dense head. H only ever
reads taps, so the backbone's own output is bit-identical with or without H
attached, and H is dropped entirely at inference.

Under joint training the shared backbone parameters receive the average of
the two loss gradients, theta_F <- 1/2 (dL/dtheta + dL_aux/dtheta), while H's
own parameters receive dL_aux/dtheta alone. Two comparison baselines live
here too: per-tap auxiliary classifier losses, and logit distillation from a
frozen full-precision teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, rng
from .errors import ShapeMismatchError, SpecValidationError
from .network import BatchNormLayer, ConvLayer, DenseLayer, Network
from .quantize import QuantScheme
from .tensor import Parameter, Tensor, backward_multi, declare_op, make_op_output, recording

__all__ = [
    "AdaptorSpec", "AuxiliarySpec", "AuxiliaryModule", "build_auxiliary",
    "aggregate", "forward_mixed", "joint_loss", "joint_backward",
    "JointGradientReport", "TapHeads", "additional_loss_baseline",
    "kd_baseline", "distill_kl",
]

OP_KD_KL = declare_op("kd_kl")


@dataclass(frozen=True)
class AdaptorSpec:
    kernel: int = 1  # 1 or 3
    out_channels: int = 64

    def to_dict(self) -> dict:
        return {"kernel": self.kernel, "out_channels": self.out_channels}

    @staticmethod
    def from_dict(d: dict) -> "AdaptorSpec":
        return AdaptorSpec(d.get("kernel", 1), d["out_channels"])


@dataclass(frozen=True)
class AuxiliarySpec:
    """One adaptor per backbone tap, a shared aggregator width, and a
    global-average-pool classifier. Every parameter is full precision.

    ``classifier_init`` "zero" starts the side network's classifier at zero,
    so its gradients into the shared backbone switch on only as the side
    network learns to read the taps; "he" draws it like any dense layer.
    """

    adaptors: tuple
    width: int = 64
    classifier_init: str = "zero"

    def __post_init__(self):
        object.__setattr__(self, "adaptors", tuple(self.adaptors))

    @staticmethod
    def uniform(num_taps: int, width: int = 64, kernel: int = 1,
                classifier_init: str = "zero") -> "AuxiliarySpec":
        return AuxiliarySpec(tuple(AdaptorSpec(kernel, width) for _ in range(num_taps)),
                             width, classifier_init)

    def validate(self, num_taps: int | None = None) -> list[str]:
        errs = []
        if self.width < 1:
            errs.append(f"width must be >= 1, got {self.width}")
        if self.classifier_init not in ("zero", "he"):
            errs.append(f"classifier_init must be 'zero' or 'he', got {self.classifier_init!r}")
        if num_taps is not None and len(self.adaptors) != num_taps:
            errs.append(f"got {len(self.adaptors)} adaptors for {num_taps} backbone taps")
        for i, a in enumerate(self.adaptors):
            if a.kernel not in (1, 3):
                errs.append(f"adaptor {i}: kernel must be 1 or 3, got {a.kernel}")
            if a.out_channels != self.width:
                errs.append(f"adaptor {i}: out_channels {a.out_channels} != aggregator "
                            f"width {self.width}")
        return errs

    def to_dict(self) -> dict:
        return {"adaptors": [a.to_dict() for a in self.adaptors], "width": self.width,
                "classifier_init": self.classifier_init}

    @staticmethod
    def from_dict(d: dict) -> "AuxiliarySpec":
        return AuxiliarySpec(tuple(AdaptorSpec.from_dict(a) for a in d["adaptors"]),
                             d.get("width", 64), d.get("classifier_init", "zero"))


class AuxiliaryModule:
    """Built side network: adaptors, aggregation chain, classifier."""

    def __init__(self, spec: AuxiliarySpec, tap_channels: list[int], num_classes: int,
                 seed: int, dtype=np.float32):
        errs = spec.validate(num_taps=len(tap_channels))
        if errs:
            raise SpecValidationError(errs)
        self.spec = spec
        self.tap_channels = list(tap_channels)
        self.dtype = np.dtype(dtype)
        gen = rng.stream(seed, "aux_init")
        full = QuantScheme.full()
        self.adaptor_convs = []
        self.adaptor_bns = []
        for i, (aspec, ch) in enumerate(zip(spec.adaptors, tap_channels)):
            pad = (aspec.kernel - 1) // 2
            self.adaptor_convs.append(ConvLayer(
                f"aux.adaptor{i}.conv", ch, aspec.out_channels, aspec.kernel,
                1, pad, full, gen, self.dtype))
            self.adaptor_bns.append(BatchNormLayer(f"aux.adaptor{i}.bn", aspec.out_channels, self.dtype))
        self.classifier = DenseLayer("aux.classifier", spec.width, num_classes,
                                     full, gen, self.dtype)
        if spec.classifier_init == "zero":
            self.classifier.weight.master.data[:] = 0.0

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for conv in self.adaptor_convs:
            out[conv.weight.name] = conv.weight
        for bn in self.adaptor_bns:
            out[bn.gamma.name] = bn.gamma
            out[bn.beta.name] = bn.beta
        out[self.classifier.weight.name] = self.classifier.weight
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.adaptor_bns:
            out.update(bn.buffers())
        return out

    def precision_report(self) -> list[dict]:
        rows = []
        for conv in self.adaptor_convs:
            rows.append({"layer": conv.weight.name, "kind": "conv",
                         "weight_scheme": conv.scheme.describe()})
        for bn in self.adaptor_bns:
            rows.append({"layer": bn._prefix, "kind": "batchnorm", "weight_scheme": "full"})
        rows.append({"layer": self.classifier.weight.name, "kind": "dense",
                     "weight_scheme": self.classifier.scheme.describe()})
        return rows

    def forward(self, taps: list[Tensor], mode: str = "train") -> Tensor:
        """Aggregate the taps and classify: returns the auxiliary logits."""
        if len(taps) != len(self.adaptor_convs):
            raise SpecValidationError(
                [f"auxiliary module built for {len(self.adaptor_convs)} taps, got {len(taps)}"])
        training = mode == "train"
        g = None
        for p, (tap, conv, bn) in enumerate(zip(taps, self.adaptor_convs, self.adaptor_bns)):
            if tap.data.shape[1] != conv.weight.data.shape[1]:
                raise SpecValidationError(
                    [f"tap {p}: {tap.data.shape[1]} channels, adaptor expects "
                     f"{conv.weight.data.shape[1]}"])
            adapted = bn.forward(conv.forward(tap, conv.weight.master), training)
            if g is not None:
                g = _align_spatial(g, adapted.data.shape, p)
            g = aggregate(adapted, g, tap_index=p)
        feats = ops.global_avg_pool(g)
        return self.classifier.forward(feats, self.classifier.weight.master)


def _align_spatial(g: Tensor, target_shape: tuple, p: int) -> Tensor:
    """Average-pool the running feature down to the next tap's spatial size.

    Tap resolutions only ever shrink along the backbone, so an integer
    pooling factor always exists for well-formed specs.
    """
    gh, gw = g.data.shape[2:]
    th, tw = target_shape[2:]
    if (gh, gw) == (th, tw):
        return g
    if gh % th or gw % tw or gh // th != gw // tw:
        raise ShapeMismatchError(
            "aggregate", f"tap {p}: cannot pool running feature {g.data.shape} "
                         f"to match {target_shape}")
    return ops.avg_pool2d(g, gh // th)


def build_auxiliary(spec: AuxiliarySpec, net: Network, seed: int) -> AuxiliaryModule:
    """Build H against a backbone's tap signature."""
    tap_channels = [net.spec.blocks[i].out_channels for i in net.spec.tap_indices]
    return AuxiliaryModule(spec, tap_channels, net.spec.num_classes, seed, net.dtype)


def aggregate(adapted: Tensor, prev: Tensor | None, tap_index: int | None = None) -> Tensor:
    """One aggregation step: ReLU(adapted + prev), with prev None meaning the
    zero tensor that seeds the chain."""
    if prev is None:
        return ops.relu(adapted)
    if adapted.data.shape != prev.data.shape:
        where = f" at tap {tap_index}" if tap_index is not None else ""
        raise ShapeMismatchError(
            "aggregate", f"adapted {adapted.data.shape} vs running {prev.data.shape}{where}")
    return ops.relu(ops.add(adapted, prev))


# ---------------------------------------------------------------------------
# joint objective

def forward_mixed(net: Network, aux: AuxiliaryModule, x: Tensor, mode: str = "train",
                  weights: dict[str, Tensor] | None = None):
    """Run the backbone once and the side network on its taps.

    The backbone logits are exactly what a bare backbone forward would
    produce: H reads the taps and never writes.
    """
    if len(net.spec.tap_indices) != len(aux.adaptor_convs):
        raise SpecValidationError(
            [f"backbone exposes {len(net.spec.tap_indices)} taps, auxiliary module "
             f"expects {len(aux.adaptor_convs)}"])
    logits_f, taps = net.forward(x, mode, weights)
    logits_h = aux.forward(taps, mode)
    return logits_f, logits_h


def joint_loss(logits_f: Tensor, logits_h: Tensor, labels: np.ndarray):
    """Cross-entropy for the main output and for the auxiliary output."""
    labels = np.asarray(labels)
    if logits_f.data.shape[0] != logits_h.data.shape[0]:
        raise ShapeMismatchError(
            "joint_loss", f"batch sizes differ: {logits_f.data.shape[0]} vs "
                          f"{logits_h.data.shape[0]}")
    return (ops.softmax_cross_entropy(logits_f, labels),
            ops.softmax_cross_entropy(logits_h, labels))


@dataclass
class JointGradientReport:
    """Per-parameter gradient triple from one joint backward pass.

    For backbone parameters ``applied = (main + aux) / 2`` (absent routes
    count as zero); for side-network parameters ``applied = aux``.
    """

    main: dict[str, np.ndarray]
    aux: dict[str, np.ndarray]
    applied: dict[str, np.ndarray]

    def triple(self, name: str):
        zero = None
        for m in (self.main, self.aux, self.applied):
            if name in m:
                zero = np.zeros_like(m[name])
                break
        if zero is None:
            raise KeyError(name)
        return (self.main.get(name, zero), self.aux.get(name, zero), self.applied[name])


def joint_backward(loss_main: Tensor, loss_aux: Tensor, net: Network,
                   aux: AuxiliaryModule) -> JointGradientReport:
    """One two-channel reverse sweep: the main and auxiliary gradients travel
    together through the shared graph without mixing, then the averaging rule
    produces the applied gradient per parameter."""
    g_main, g_aux = backward_multi([loss_main, loss_aux])
    f_names = set(net.parameters())
    h_names = set(aux.parameters())
    applied: dict[str, np.ndarray] = {}
    for name in set(g_main) | set(g_aux):
        if name in f_names:
            gm = g_main.get(name)
            ga = g_aux.get(name)
            if gm is None:
                gm = np.zeros_like(ga)
            if ga is None:
                ga = np.zeros_like(gm)
            applied[name] = 0.5 * (gm + ga)
        elif name in h_names:
            applied[name] = g_aux[name]
        else:
            applied[name] = g_main.get(name, g_aux.get(name))
    return JointGradientReport(main=g_main, aux=g_aux, applied=applied)


# ---------------------------------------------------------------------------
# comparison baseline: per-tap classifier losses

class TapHeads:
    """Lightweight full-precision classifier heads, one per tap
    (global average pool + dense)."""

    def __init__(self, net: Network, seed: int):
        gen = rng.stream(seed, "head_init")
        full = QuantScheme.full()
        self.heads = []
        for i in net.spec.tap_indices:
            ch = net.spec.blocks[i].out_channels
            self.heads.append(DenseLayer(f"heads.tap{i}", ch, net.spec.num_classes,
                                         full, gen, net.dtype))

    def parameters(self) -> dict[str, Parameter]:
        return {h.weight.name: h.weight for h in self.heads}


def additional_loss_baseline(net: Network, heads: TapHeads, x: Tensor,
                             labels: np.ndarray, alphas, mode: str = "train",
                             weights: dict[str, Tensor] | None = None):
    """Main loss plus weighted per-tap classifier losses.

    total = L + sum_i alpha_i * l_i. Zero-weight terms are skipped, so with
    all alphas zero the total is the main loss itself, bit for bit.
    Returns (total, main_loss, per_tap_losses).
    """
    alphas = list(alphas)
    if len(alphas) != len(heads.heads):
        raise ValueError(f"got {len(alphas)} loss weights for {len(heads.heads)} taps")
    if any(a < 0 for a in alphas):
        raise ValueError(f"loss weights must be >= 0, got {alphas}")
    logits, taps = net.forward(x, mode, weights)
    total = ops.softmax_cross_entropy(logits, labels)
    main = total
    per_tap = []
    for head, tap, alpha in zip(heads.heads, taps, alphas):
        feats = ops.global_avg_pool(tap)
        li = ops.softmax_cross_entropy(head.forward(feats, head.weight.master), labels)
        per_tap.append(li)
        if alpha != 0.0:
            total = ops.add(total, ops.scale(li, float(alpha)))
    return total, main, per_tap


# ---------------------------------------------------------------------------
# comparison baseline: knowledge distillation

def _kd_kl_bw(ctx, g):
    return (g * (ctx["q"] - ctx["p"]) / (ctx["temperature"] * ctx["n"]),)


def distill_kl(student_logits: Tensor, teacher_logits: np.ndarray,
               temperature: float) -> Tensor:
    """Mean KL(softmax(teacher/T) || softmax(student/T)) over the batch.

    Teacher logits are plain data: no gradient ever reaches them. The
    student gradient is (softmax(s/T) - softmax(t/T)) / (T * batch).
    """
    t = np.asarray(teacher_logits, dtype=student_logits.data.dtype)
    if t.shape != student_logits.data.shape:
        raise ShapeMismatchError(
            OP_KD_KL, f"teacher logits {t.shape} vs student {student_logits.data.shape}")
    n = t.shape[0]

    def log_softmax(z):
        z = z / temperature
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    logp = log_softmax(t)
    logq = log_softmax(student_logits.data)
    p = np.exp(logp)
    val = np.asarray((p * (logp - logq)).sum(axis=1).mean(), dtype=student_logits.data.dtype)
    ctx = None
    if recording(student_logits):
        ctx = {"p": p, "q": np.exp(logq), "temperature": temperature, "n": n}
    return make_op_output(OP_KD_KL, val, (student_logits,), ctx, _kd_kl_bw)


def kd_baseline(student_logits: Tensor, teacher_logits, labels: np.ndarray,
                beta: float = 1.0, temperature: float = 4.0):
    """Distillation objective: CE(student) + beta * T^2 * KL(teacher || student).

    The teacher must be frozen; passing logits that still require gradient is
    a usage error. With beta = 0 the cross-entropy is returned unchanged.
    Returns (total, ce, kl) with kl None when beta = 0.
    """
    if isinstance(teacher_logits, Tensor):
        if teacher_logits.requires_grad:
            raise ValueError("teacher must be frozen: teacher logits require grad")
        teacher_logits = teacher_logits.data
    ce = ops.softmax_cross_entropy(student_logits, labels)
    if beta == 0.0:
        return ce, ce, None
    kl = distill_kl(student_logits, teacher_logits, temperature)
    total = ops.add(ce, ops.scale(kl, float(beta) * temperature * temperature))
    return total, ce, kl
