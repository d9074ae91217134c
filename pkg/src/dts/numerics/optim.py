"""Gradient-based parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .params import ParameterStore


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.algorithm not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """Adam or plain SGD over one parameter store; keeps per-parameter moments."""

    def __init__(self, store: ParameterStore, config: OptimizerConfig | None = None):
        self.store = store
        self.config = config or OptimizerConfig()
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Update from ``grads`` (name -> array) or, by default, each parameter's ``.grad``."""
        cfg = self.config
        if grads is None:
            grads = {n: p.grad for n, p in self.store.items() if p.grad is not None}
        if cfg.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.clip_norm:
                scale = cfg.clip_norm / (total + 1e-12)
                grads = {n: g * scale for n, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            p = self.store[name]
            if cfg.algorithm == "sgd":
                p.data = p.data - cfg.lr * g
                continue
            m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(store: ParameterStore, config: OptimizerConfig) -> None:
    """Apply one update to ``store``; moments persist on the store between calls."""
    opt = getattr(store, "_optimizer", None)
    if opt is None or opt.config != config:
        opt = Optimizer(store, config)
        store._optimizer = opt
    opt.step()
