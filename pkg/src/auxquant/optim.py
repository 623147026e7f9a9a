"""SGD with momentum and Adam, with serializable per-parameter state."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter

__all__ = ["SGD", "Adam", "make_optimizer", "lr_at_epoch"]


def lr_at_epoch(initial_lr: float, milestones, epoch: int) -> float:
    """Step decay: one factor of 0.1 per milestone at or before this epoch
    (epochs are 1-based)."""
    passed = sum(1 for m in milestones if m <= epoch)
    return initial_lr * (0.1 ** passed)


class SGD:
    """Momentum SGD: v <- mu v + g; p <- p - lr v."""

    kind = "sgd"

    def __init__(self, lr: float = 0.1, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + g
            self.velocity[name] = v
            p.master.data = p.master.data - self.lr * v
            p.grad = g

    def state_dict(self) -> dict:
        return {"kind": self.kind, "momentum": self.momentum,
                "slots": {"velocity": dict(self.velocity)}}

    def load_state_dict(self, state: dict) -> None:
        self.momentum = state["momentum"]
        self.velocity = {k: np.array(v) for k, v in state["slots"]["velocity"].items()}


class Adam:
    """Adam with bias correction: p <- p - lr * m_hat / (sqrt(v_hat) + eps)."""

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            m_hat = m / b1t
            v_hat = v / b2t
            p.master.data = p.master.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = g

    def state_dict(self) -> dict:
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t,
                "slots": {"m": dict(self.m), "v": dict(self.v)}}

    def load_state_dict(self, state: dict) -> None:
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.t = state["t"]
        self.m = {k: np.array(v) for k, v in state["slots"]["m"].items()}
        self.v = {k: np.array(v) for k, v in state["slots"]["v"].items()}


def make_optimizer(cfg: dict):
    """Build from a config mapping like {"kind": "adam", "lr": 1e-3, ...}."""
    kind = cfg.get("kind", "adam")
    if kind == "sgd":
        return SGD(lr=cfg.get("lr", 0.1), momentum=cfg.get("momentum", 0.9))
    if kind == "adam":
        return Adam(lr=cfg.get("lr", 1e-3), beta1=cfg.get("beta1", 0.9),
                    beta2=cfg.get("beta2", 0.999), eps=cfg.get("eps", 1e-8))
    raise ValueError(f"unknown optimizer kind {kind!r}")
