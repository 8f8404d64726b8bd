"""Gradient-descent optimizers over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class OptimizerSettings:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @staticmethod
    def from_dict(d: dict) -> "OptimizerSettings":
        s = OptimizerSettings(
            kind=str(d.get("kind", "adam")),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)),
        )
        s.validate()
        return s


class Sgd:
    def __init__(self, params: list[Tensor], learning_rate: float):
        if learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self) -> None:
        for p in self.params:
            p.values -= self.learning_rate * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: list[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.values -= self.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(params: list[Tensor], settings: OptimizerSettings):
    settings.validate()
    if settings.kind == "sgd":
        return Sgd(params, settings.learning_rate)
    return Adam(params, settings.learning_rate, settings.beta1, settings.beta2, settings.eps)
