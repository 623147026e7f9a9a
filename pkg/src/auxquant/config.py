"""Self-describing experiment documents.

One JSON document carries everything needed to reproduce an experiment:
dataset spec, network spec (explicit blocks or a named preset), optional
auxiliary spec, the fine-tune train config, and optionally a pretrain config
for stage one. Re-running a stored document with its seed reproduces the
run's metrics exactly (single-threaded mode).

Document schema (version 1):

    {
      "schema_version": 1,
      "seed": 0,
      "dataset":  { "source": {"kind": "idx" | "cifar10_binary" | "synthetic", ...},
                    "normalization": {"mean": [...], "std": [...]} | null,
                    "augment": "none" | "flip" | "crop_flip",
                    "crop_padding": 4 },
      "network":  { "preset": "plain4" | "res4", "num_classes": N, "in_channels": C,
                    "policy": {...}?, "tap_indices": [...]? }
                | { "in_channels": C, "stem_channels": S, "blocks": [...],
                    "num_classes": N, "policy": {...}?, "tap_indices": [...]? },
      "auxiliary": { "width": W, "kernel": 1 | 3 } | {"adaptors": [...], "width": W} | null,
      "train":    { "method": ..., "bitwidth": k, "epochs": ..., ... },
      "pretrain": { ... train config for stage one ... }?   // defaults when absent
    }

When ``network.policy`` is omitted, the default policy at ``train.bitwidth``
applies (8-bit first and last layers, k-bit interior and activations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .auxiliary import AuxiliarySpec
from .data import DatasetSpec
from .errors import SpecValidationError
from .network import NetworkSpec, plain4_spec, res4_spec
from .quantize import PrecisionPolicy
from .training import TrainConfig

__all__ = ["ExperimentConfig", "parse_experiment", "load_experiment"]

SCHEMA_VERSION = 1

DEFAULT_PRETRAIN = TrainConfig(
    method="baseline", epochs=3, batch_size=64,
    optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9})


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetSpec
    network: NetworkSpec
    train: TrainConfig
    auxiliary: AuxiliarySpec | None = None
    pretrain: TrainConfig | None = None

    def pretrain_config(self) -> TrainConfig:
        from dataclasses import replace
        base = self.pretrain if self.pretrain is not None else DEFAULT_PRETRAIN
        return replace(base, seed=self.seed, precision=self.train.precision)

    def finetune_config(self) -> TrainConfig:
        from dataclasses import replace
        return replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "network": self.network.to_dict(),
            "auxiliary": self.auxiliary.to_dict() if self.auxiliary else None,
            "train": self.train.to_dict(),
        }
        if self.pretrain is not None:
            doc["pretrain"] = self.pretrain.to_dict()
        return doc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _resolve_network(doc: dict, train: TrainConfig, errs: list) -> NetworkSpec | None:
    policy = None
    if doc.get("policy"):
        try:
            policy = PrecisionPolicy.from_dict(doc["policy"])
        except (KeyError, ValueError) as e:
            errs.append(f"network.policy: {e}")
    if policy is None:
        policy = PrecisionPolicy.default(train.bitwidth)
    taps = tuple(doc.get("tap_indices") or ())
    preset = doc.get("preset")
    try:
        if preset is not None:
            builder = {"plain4": plain4_spec, "res4": res4_spec}.get(preset)
            if builder is None:
                errs.append(f"network.preset: unknown preset {preset!r}")
                return None
            return builder(num_classes=doc["num_classes"],
                           in_channels=doc.get("in_channels", 1),
                           policy=policy, tap_indices=taps)
        return NetworkSpec.from_dict({**doc, "policy": policy.to_dict(),
                                      "tap_indices": list(taps)})
    except (KeyError, ValueError) as e:
        errs.append(f"network: {e}")
        return None


def _resolve_auxiliary(doc, network: NetworkSpec | None, errs: list) -> AuxiliarySpec | None:
    if doc is None:
        return None
    try:
        if "adaptors" in doc:
            return AuxiliarySpec.from_dict(doc)
        num_taps = len(network.tap_indices) if network is not None else 0
        return AuxiliarySpec.uniform(num_taps, width=doc.get("width", 64),
                                     kernel=doc.get("kernel", 1))
    except (KeyError, ValueError) as e:
        errs.append(f"auxiliary: {e}")
        return None


def parse_experiment(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a loaded JSON document.

    Raises SpecValidationError listing every violation found.
    """
    errs: list[str] = []
    if not isinstance(doc, dict):
        raise SpecValidationError(["experiment document must be a JSON object"])
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errs.append(f"unsupported schema_version {version}")
    for key in ("dataset", "network", "train"):
        if key not in doc:
            errs.append(f"missing required section {key!r}")
    if errs:
        raise SpecValidationError(errs)

    seed = doc.get("seed", 0)
    train = TrainConfig.from_dict(doc["train"])
    errs.extend(f"train: {e}" for e in train.validate())
    dataset = DatasetSpec.from_dict(doc["dataset"])
    errs.extend(f"dataset: {e}" for e in dataset.validate())
    network = _resolve_network(doc["network"], train, errs)
    if network is not None:
        errs.extend(f"network: {e}" for e in network.validate())
    auxiliary = _resolve_auxiliary(doc.get("auxiliary"), network, errs)
    if auxiliary is not None and network is not None:
        errs.extend(f"auxiliary: {e}"
                    for e in auxiliary.validate(num_taps=len(network.tap_indices)))
    pretrain_cfg = None
    if doc.get("pretrain") is not None:
        pretrain_cfg = TrainConfig.from_dict(doc["pretrain"])
        errs.extend(f"pretrain: {e}" for e in pretrain_cfg.validate())
    if train.method == "auxi" and auxiliary is None:
        errs.append("train.method is 'auxi' but the document has no auxiliary section")
    if errs:
        raise SpecValidationError(errs)
    return ExperimentConfig(seed=seed, dataset=dataset, network=network,
                            train=train, auxiliary=auxiliary, pretrain=pretrain_cfg)


def load_experiment(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SpecValidationError([f"{path}: not valid JSON: {e}"]) from e
    return parse_experiment(doc)
