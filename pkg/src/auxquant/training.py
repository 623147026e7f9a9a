"""Two-stage training protocol and the four-way method comparison.

Stage one pretrains the full-precision counterpart (the precision policy is
forced to the identity). Stage two fine-tunes under the target policy: every
step quantizes the master weights, runs the forward(s), computes the
loss(es), backpropagates, and hands the optimizer the applied gradient --
the main-loss gradient for the plain baseline, the two-route average for
auxiliary training. Gradients are computed against the quantized weights and
applied to the masters unchanged; the masters themselves are never
overwritten by quantization.

Methods: ``baseline`` (single quantized loss), ``auxi`` (joint objective with
the side network), ``additional_loss`` (per-tap classifier losses), ``kd``
(logit distillation from the frozen full-precision initialization).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops, rng
from .auxiliary import (AuxiliarySpec, TapHeads, additional_loss_baseline,
                        build_auxiliary, forward_mixed, joint_backward,
                        joint_loss, kd_baseline)
from .checkpoint import Checkpoint
from .errors import NumericFaultError, SpecValidationError, TrainingDiverged
from .network import Network, NetworkSpec, build_network
from .optim import lr_at_epoch, make_optimizer
from .quantize import PrecisionPolicy
from .tensor import Tensor, backward, no_grad

__all__ = [
    "TrainConfig", "MetricsRow", "pretrain", "finetune", "evaluate",
    "run_comparison", "ComparisonCell", "ComparisonResult",
    "metrics_to_csv", "metrics_to_json",
]

METHODS = ("baseline", "auxi", "additional_loss", "kd")

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "baseline"
    bitwidth: int = 2
    epochs: int = 10
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-3})
    lr_milestones: tuple = ()
    seed: int = 0
    precision: str = "float32"
    kd_beta: float = 1.0
    kd_temperature: float = 4.0
    aux_loss_weights: tuple | None = None  # additional_loss per-tap weights, default 0.3

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        if self.aux_loss_weights is not None:
            object.__setattr__(self, "aux_loss_weights", tuple(self.aux_loss_weights))

    def validate(self) -> list[str]:
        errs = []
        if self.method not in METHODS:
            errs.append(f"unknown method {self.method!r}; known: {METHODS}")
        if self.bitwidth < 1:
            errs.append(f"bitwidth must be >= 1, got {self.bitwidth}")
        if self.epochs < 0:
            errs.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in _PRECISIONS:
            errs.append(f"precision must be one of {sorted(_PRECISIONS)}, got {self.precision!r}")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            errs.append(f"lr_milestones {ms} must be strictly increasing")
        if ms and (min(ms) < 1 or max(ms) >= max(self.epochs, 1)):
            errs.append(f"lr_milestones {ms} must lie in [1, epochs)")
        if self.kd_beta < 0 or self.kd_temperature <= 0:
            errs.append("kd_beta must be >= 0 and kd_temperature > 0")
        return errs

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]

    @property
    def initial_lr(self) -> float:
        return self.optimizer.get("lr", 1e-3)

    def to_dict(self) -> dict:
        d = {"method": self.method, "bitwidth": self.bitwidth, "epochs": self.epochs,
             "batch_size": self.batch_size, "optimizer": dict(self.optimizer),
             "lr_milestones": list(self.lr_milestones), "seed": self.seed,
             "precision": self.precision, "kd_beta": self.kd_beta,
             "kd_temperature": self.kd_temperature}
        if self.aux_loss_weights is not None:
            d["aux_loss_weights"] = list(self.aux_loss_weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            method=d.get("method", "baseline"), bitwidth=d.get("bitwidth", 2),
            epochs=d.get("epochs", 10), batch_size=d.get("batch_size", 64),
            optimizer=d.get("optimizer", {"kind": "adam", "lr": 1e-3}),
            lr_milestones=tuple(d.get("lr_milestones", ())), seed=d.get("seed", 0),
            precision=d.get("precision", "float32"), kd_beta=d.get("kd_beta", 1.0),
            kd_temperature=d.get("kd_temperature", 4.0),
            aux_loss_weights=tuple(d["aux_loss_weights"]) if d.get("aux_loss_weights") else None)


@dataclass(frozen=True)
class MetricsRow:
    """One metrics record. Rows are emitted strictly ordered by
    (epoch, split) with the split order train < test."""

    epoch: int
    split: str       # "train" | "test"
    loss: float
    top1: float
    top5: float | None
    lr: float
    seconds: float

    SPLIT_ORDER = {"train": 0, "test": 1}

    def sort_key(self):
        return (self.epoch, self.SPLIT_ORDER[self.split])

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "split": self.split, "loss": self.loss,
                "top1": self.top1, "top5": self.top5, "lr": self.lr,
                "seconds": self.seconds}


CSV_COLUMNS = ("epoch", "split", "loss", "top1", "top5", "lr", "seconds")


def metrics_to_csv(rows) -> str:
    """Fixed-column CSV; floats use shortest round-trip formatting."""
    out = [",".join(CSV_COLUMNS)]
    for r in rows:
        top5 = "" if r.top5 is None else repr(r.top5)
        out.append(f"{r.epoch},{r.split},{r.loss!r},{r.top1!r},{top5},{r.lr!r},{r.seconds!r}")
    return "\n".join(out) + "\n"


def metrics_to_json(rows, meta: dict | None = None) -> dict:
    return {"meta": meta or {}, "rows": [r.to_dict() for r in rows]}


# ---------------------------------------------------------------------------
# shared internals

def _topk_hits(logits: np.ndarray, labels: np.ndarray) -> tuple[int, int | None]:
    top1 = int((logits.argmax(axis=1) == labels).sum())
    if logits.shape[1] < 5:
        return top1, None
    top5_idx = np.argsort(-logits, axis=1, kind="stable")[:, :5]
    top5 = int((top5_idx == labels[:, None]).any(axis=1).sum())
    return top1, top5


def _evaluate_net(net: Network, pipeline, batch_size: int, dtype, split: str = "test"):
    total_loss = 0.0
    hits1 = 0
    hits5 = 0
    seen = 0
    has_top5 = net.spec.num_classes >= 5
    with no_grad():
        weights = net.bind_weights(trainable=False)
        for xb, yb in pipeline.eval_batches(batch_size, split=split, dtype=dtype):
            logits, _ = net.forward(Tensor(xb, dtype=dtype), "eval", weights)
            loss = ops.softmax_cross_entropy(logits, yb)
            n = xb.shape[0]
            total_loss += float(loss.data) * n
            c1, c5 = _topk_hits(logits.data, yb)
            hits1 += c1
            hits5 += c5 if c5 is not None else 0
            seen += n
    return (total_loss / seen, hits1 / seen, (hits5 / seen) if has_top5 else None)


class _Stage:
    """One training stage: the models, optimizer, streams, and step logic."""

    def __init__(self, spec: NetworkSpec, pipeline, cfg: TrainConfig, method: str,
                 aux_spec: AuxiliarySpec | None, init: Checkpoint | None, resume: bool):
        errs = cfg.validate()
        if errs:
            raise SpecValidationError(errs)
        self.cfg = cfg
        self.method = method
        self.pipeline = pipeline
        self.dtype = cfg.dtype
        self.net = build_network(spec, cfg.seed, self.dtype)
        if init is not None:
            _check_structure(init.network_spec, spec)
            f_names = set(self.net.parameters())
            self.net.load_state(
                {k: v for k, v in init.params.items() if k in f_names},
                {k: v for k, v in init.buffers.items() if k in self.net.buffers()})

        self.aux = None
        self.heads = None
        self.teacher = None
        self.teacher_weights = None
        if method == "auxi":
            if aux_spec is None:
                raise SpecValidationError(["method 'auxi' requires an auxiliary spec"])
            self.aux = build_auxiliary(aux_spec, self.net, cfg.seed)
            if resume and init is not None:
                aux_names = set(self.aux.parameters())
                if aux_names <= set(init.params):
                    self.aux_load(init)
        elif method == "additional_loss":
            self.heads = TapHeads(self.net, cfg.seed)
            if resume and init is not None:
                head_names = set(self.heads.parameters())
                if head_names <= set(init.params):
                    for name, p in self.heads.parameters().items():
                        p.master.data = np.asarray(init.params[name], dtype=self.dtype).copy()
        elif method == "kd":
            if init is None:
                raise SpecValidationError(["method 'kd' needs a full-precision teacher checkpoint"])
            self.teacher = build_network(
                init.network_spec.with_policy(PrecisionPolicy.full()), cfg.seed, self.dtype)
            f_names = set(self.teacher.parameters())
            self.teacher.load_state(
                {k: v for k, v in init.params.items() if k in f_names},
                {k: v for k, v in init.buffers.items() if k in self.teacher.buffers()})
            with no_grad():
                self.teacher_weights = self.teacher.bind_weights(trainable=False)

        self.optimizer = make_optimizer(cfg.optimizer)
        mid = rng.METHOD_IDS[method]
        if resume and init is not None and init.rng_state:
            self.shuffle_gen = rng.restore(init.rng_state["shuffle"])
            self.augment_gen = rng.restore(init.rng_state["augment"])
        else:
            self.shuffle_gen = rng.stream(cfg.seed, "shuffle", mid)
            self.augment_gen = rng.stream(cfg.seed, "augment", mid)
        if resume and init is not None and init.optimizer is not None:
            if init.optimizer.get("kind") == self.optimizer.kind:
                self.optimizer.load_state_dict(init.optimizer)

    def aux_load(self, init: Checkpoint) -> None:
        for name, p in self.aux.parameters().items():
            p.master.data = np.asarray(init.params[name], dtype=self.dtype).copy()
        for name, buf in self.aux.buffers().items():
            if name in init.buffers:
                np.copyto(buf, np.asarray(init.buffers[name], dtype=self.dtype))

    def trainable(self) -> dict:
        params = dict(self.net.parameters())
        if self.aux is not None:
            params.update(self.aux.parameters())
        if self.heads is not None:
            params.update(self.heads.parameters())
        return params

    def step(self, xb: np.ndarray, yb: np.ndarray):
        """One optimizer step; returns (main loss value, main logits)."""
        x = Tensor(xb, dtype=self.dtype)
        weights = self.net.bind_weights(trainable=True)
        if self.method == "auxi":
            logits, logits_h = forward_mixed(self.net, self.aux, x, "train", weights)
            loss, loss_aux = joint_loss(logits, logits_h, yb)
            report = joint_backward(loss, loss_aux, self.net, self.aux)
            applied = report.applied
        elif self.method == "baseline":
            logits, _ = self.net.forward(x, "train", weights)
            loss = ops.softmax_cross_entropy(logits, yb)
            applied = backward(loss)
        elif self.method == "additional_loss":
            alphas = self.cfg.aux_loss_weights
            if alphas is None:
                alphas = (0.3,) * len(self.heads.heads)
            total, loss, _ = additional_loss_baseline(
                self.net, self.heads, x, yb, alphas, "train", weights)
            applied = backward(total)
            logits = None
        elif self.method == "kd":
            with no_grad():
                t_logits, _ = self.teacher.forward(x, "eval", self.teacher_weights)
            logits, _ = self.net.forward(x, "train", weights)
            total, loss, _ = kd_baseline(logits, t_logits.data, yb,
                                         self.cfg.kd_beta, self.cfg.kd_temperature)
            applied = backward(total)
        else:  # pragma: no cover - config validation rejects this earlier
            raise ValueError(self.method)
        self.optimizer.step(self.trainable(), applied)
        return float(loss.data), (logits.data if logits is not None else None)

    def snapshot(self, spec_for_ckpt: NetworkSpec | None = None, meta: dict | None = None) -> Checkpoint:
        params = {n: p.data.copy() for n, p in self.net.parameters().items()}
        buffers = {n: b.copy() for n, b in self.net.buffers().items()}
        aux_spec = None
        if self.aux is not None:
            aux_spec = self.aux.spec
            params.update({n: p.data.copy() for n, p in self.aux.parameters().items()})
            buffers.update({n: b.copy() for n, b in self.aux.buffers().items()})
        if self.heads is not None:
            params.update({n: p.data.copy() for n, p in self.heads.parameters().items()})
        state = self.optimizer.state_dict()
        state["slots"] = {s: {n: a.copy() for n, a in d.items()}
                          for s, d in state["slots"].items()}
        return Checkpoint(
            network_spec=spec_for_ckpt or self.net.spec,
            params=params, buffers=buffers, aux_spec=aux_spec,
            optimizer=state,
            rng_state={"shuffle": rng.state_of(self.shuffle_gen),
                       "augment": rng.state_of(self.augment_gen)},
            dtype=self.cfg.precision,
            meta=meta or {})


def _check_structure(a: NetworkSpec, b: NetworkSpec) -> None:
    """Same architecture regardless of precision policy."""
    strip = lambda s: (s.in_channels, s.stem_channels,
                       tuple((x.in_channels, x.out_channels, x.stride, x.kind) for x in s.blocks),
                       s.num_classes, s.tap_indices)
    if strip(a) != strip(b):
        raise SpecValidationError(
            ["checkpoint network structure does not match the requested spec"])


def _train_loop(stage: _Stage, max_steps: int | None = None):
    """Run the stage's epochs; emits (train, test) metrics rows per epoch.

    Aborts with TrainingDiverged carrying the last end-of-epoch checkpoint
    when any step produces non-finite values. ``max_steps`` caps the total
    number of optimizer steps (used for step-level equivalence tests).
    """
    cfg = stage.cfg
    rows: list[MetricsRow] = []
    last_good: Checkpoint | None = None
    steps_done = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg.initial_lr, cfg.lr_milestones, epoch)
        stage.optimizer.lr = lr
        t0 = time.perf_counter()
        loss_sum = 0.0
        hits1 = 0
        hits5 = 0
        seen = 0
        try:
            for xb, yb in stage.pipeline.train_batches(
                    cfg.batch_size, stage.shuffle_gen, stage.augment_gen, dtype=stage.dtype):
                if max_steps is not None and steps_done >= max_steps:
                    break
                loss, logits = stage.step(xb, yb)
                if not np.isfinite(loss):
                    raise NumericFaultError("loss", f"non-finite loss {loss}")
                steps_done += 1
                n = xb.shape[0]
                loss_sum += loss * n
                seen += n
                if logits is not None:
                    c1, c5 = _topk_hits(logits, yb)
                    hits1 += c1
                    hits5 += c5 if c5 is not None else 0
            train_secs = time.perf_counter() - t0
            has5 = stage.net.spec.num_classes >= 5
            rows.append(MetricsRow(
                epoch=epoch, split="train",
                loss=loss_sum / max(seen, 1), top1=hits1 / max(seen, 1),
                top5=(hits5 / max(seen, 1)) if has5 else None,
                lr=lr, seconds=train_secs))
            t1 = time.perf_counter()
            ev_loss, ev_top1, ev_top5 = _evaluate_net(
                stage.net, stage.pipeline, cfg.batch_size, stage.dtype)
            rows.append(MetricsRow(
                epoch=epoch, split="test", loss=ev_loss, top1=ev_top1, top5=ev_top5,
                lr=lr, seconds=time.perf_counter() - t1))
        except NumericFaultError as e:
            raise TrainingDiverged(
                f"training diverged in epoch {epoch}: {e}", last_good=last_good,
                diagnostic={"epoch": epoch, "fault": str(e)}) from e
        last_good = stage.snapshot()
        if max_steps is not None and steps_done >= max_steps:
            break
    return rows


# ---------------------------------------------------------------------------
# public protocol

def pretrain(spec: NetworkSpec, pipeline, cfg: TrainConfig,
             init: Checkpoint | None = None, resume: bool = False,
             max_steps: int | None = None):
    """Stage one: train the full-precision counterpart as initialization.

    The precision policy is forced to the identity; the returned checkpoint
    describes the full-precision network it contains. ``init``/``resume``
    continue a previous pretraining run.
    """
    full_spec = spec.with_policy(PrecisionPolicy.full())
    stage = _Stage(full_spec, pipeline, cfg, "baseline", None, init, resume)
    rows = _train_loop(stage, max_steps=max_steps)
    meta = {"stage": "pretrain", "config": cfg.to_dict()}
    return stage.snapshot(meta=meta), rows


def finetune(ckpt: Checkpoint, method: str, pipeline, cfg: TrainConfig,
             aux_spec: AuxiliarySpec | None = None, spec: NetworkSpec | None = None,
             resume: bool = False, max_steps: int | None = None):
    """Stage two: quantized fine-tuning from a checkpoint.

    ``spec`` carries the target precision policy; when omitted, the
    checkpoint's architecture is used with the default policy at the config's
    bitwidth. ``aux_spec`` is required exactly when method == "auxi".
    """
    if method not in METHODS:
        raise SpecValidationError([f"unknown method {method!r}; known: {METHODS}"])
    if method == "auxi" and aux_spec is None:
        raise SpecValidationError(["method 'auxi' requires an auxiliary spec"])
    if spec is None:
        spec = ckpt.network_spec.with_policy(PrecisionPolicy.default(cfg.bitwidth))
    cfg = replace(cfg, method=method)
    stage = _Stage(spec, pipeline, cfg, method, aux_spec, ckpt, resume)
    rows = _train_loop(stage, max_steps=max_steps)
    meta = {"stage": "finetune", "method": method, "config": cfg.to_dict()}
    return stage.snapshot(meta=meta), rows


def evaluate(ckpt: Checkpoint, pipeline, batch_size: int = 256,
             split: str = "test", epoch: int = 0) -> MetricsRow:
    """Deterministic evaluation of a checkpoint's backbone.

    Batch norm uses the stored running statistics and the side network is
    never touched: only the (possibly quantized) backbone runs.
    """
    dtype = _PRECISIONS[ckpt.dtype]
    net = build_network(ckpt.network_spec, seed=0, dtype=dtype)
    f_names = set(net.parameters())
    net.load_state({k: v for k, v in ckpt.params.items() if k in f_names},
                   {k: v for k, v in ckpt.buffers.items() if k in net.buffers()})
    t0 = time.perf_counter()
    loss, top1, top5 = _evaluate_net(net, pipeline, batch_size, dtype, split=split)
    return MetricsRow(epoch=epoch, split=split, loss=loss, top1=top1, top5=top5,
                      lr=0.0, seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# method comparison grid

@dataclass
class ComparisonCell:
    method: str
    seed: int
    status: str                      # "ok" | "failed"
    rows: list = field(default_factory=list)
    final: MetricsRow | None = None
    error: str | None = None


@dataclass
class ComparisonResult:
    cells: list
    aggregates: dict

    def final_csv(self) -> str:
        out = ["method,seed,status,final_test_loss,final_test_top1,final_test_top5"]
        for c in self.cells:
            if c.status == "ok":
                t5 = "" if c.final.top5 is None else repr(c.final.top5)
                out.append(f"{c.method},{c.seed},ok,{c.final.loss!r},{c.final.top1!r},{t5}")
            else:
                out.append(f"{c.method},{c.seed},failed,,,")
        return "\n".join(out) + "\n"

    def to_json(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "cells": [{
                "method": c.method, "seed": c.seed, "status": c.status,
                "error": c.error,
                "rows": [r.to_dict() for r in c.rows],
            } for c in self.cells],
        }


def run_comparison(spec: NetworkSpec, pipeline, methods, seeds,
                   pretrain_cfg: TrainConfig, finetune_cfg: TrainConfig,
                   aux_spec: AuxiliarySpec | None = None) -> ComparisonResult:
    """Pretrain once per seed, fine-tune every method from that shared
    initialization, and aggregate final test accuracy per method.

    A failing (method, seed) cell is recorded as failed without aborting the
    rest of the grid. Cells run sequentially; per-cell randomness is derived
    from (seed, method id), so the outcome would be identical under any
    parallel schedule.
    """
    methods = list(methods)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    for m in methods:
        if m not in METHODS:
            raise SpecValidationError([f"unknown method {m!r}; known: {METHODS}"])
    if "auxi" in methods and aux_spec is None:
        raise SpecValidationError(["comparison includes 'auxi' but no auxiliary spec given"])

    cells: list[ComparisonCell] = []
    for seed in seeds:
        ck = None
        pre_err = None
        try:
            ck, _ = pretrain(spec, pipeline, replace(pretrain_cfg, seed=seed))
        except Exception as e:  # noqa: BLE001 - cell isolation is the contract
            pre_err = f"pretraining failed: {e}"
        for method in methods:
            if ck is None:
                cells.append(ComparisonCell(method, seed, "failed", error=pre_err))
                continue
            try:
                _, rows = finetune(ck, method, pipeline,
                                   replace(finetune_cfg, seed=seed, method=method),
                                   aux_spec=aux_spec if method == "auxi" else None,
                                   spec=spec)
                final = [r for r in rows if r.split == "test"][-1]
                cells.append(ComparisonCell(method, seed, "ok", rows=rows, final=final))
            except Exception as e:  # noqa: BLE001
                cells.append(ComparisonCell(method, seed, "failed", error=str(e)))

    aggregates = {}
    for method in methods:
        finals = [c.final.top1 for c in cells
                  if c.method == method and c.status == "ok"]
        aggregates[method] = {
            "n": len(finals),
            "mean_top1": float(np.mean(finals)) if finals else None,
            "min_top1": float(np.min(finals)) if finals else None,
            "max_top1": float(np.max(finals)) if finals else None,
        }
    return ComparisonResult(cells=cells, aggregates=aggregates)
