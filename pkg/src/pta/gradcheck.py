"""Finite-difference verification of the backward pass on randomized models.

Each instance draws a small model, a decoder bank, a batch and a loss, then
compares every parameter's analytic gradient against central finite
differences. Instances whose relu pre-activations sit within the difference
step of a kink are redrawn (finite differences are invalid across the kink).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, numeric_gradient
from .model import ModelSpec, SharedModel, TaskHead


@dataclass(frozen=True)
class GradCheckReport:
    instances: int
    max_relative_error: float
    tolerance: float
    step: float
    redrawn: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    def to_json_dict(self) -> dict:
        return {"instances": self.instances, "max_relative_error": self.max_relative_error,
                "tolerance": self.tolerance, "step": self.step, "redrawn": self.redrawn,
                "passed": self.passed}


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    den = max(float(np.max(np.abs(analytic))) if analytic.size else 0.0,
              float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1.0)
    return num / den


def _relu_margin(model: SharedModel, head: TaskHead, x: np.ndarray) -> float:
    """Smallest |pre-activation| over relu layers; inf when none are used."""
    margin = float("inf")
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.values + b.values
        if i < len(model.spec.hidden_layers):
            if model.spec.hidden_layers[i][1] == "relu":
                margin = min(margin, float(np.min(np.abs(z))))
            z = np.maximum(z, 0.0) if model.spec.hidden_layers[i][1] == "relu" else np.tanh(z)
        h = z
    return margin


def _draw_instance(rng: np.random.Generator):
    input_dim = int(rng.integers(2, 9))
    embedding_dim = int(rng.integers(2, 9))
    hidden = tuple((int(rng.integers(2, 9)), rng.choice(["relu", "tanh"]))
                   for _ in range(int(rng.integers(1, 3))))
    spec = ModelSpec(input_dim=input_dim, hidden_layers=hidden, embedding_dim=embedding_dim)
    model = SharedModel(spec, seed=int(rng.integers(0, 2**32)))

    loss_kind = rng.choice(["mse", "cross_entropy"])
    output_dim = int(rng.integers(2, 6)) if loss_kind == "cross_entropy" else int(rng.integers(1, 4))
    n_decoders = int(rng.integers(1, 4))
    head = TaskHead(0, embedding_dim, output_dim, n_decoders, loss_kind,
                    seed=int(rng.integers(0, 2**32)))

    batch = int(rng.integers(1, 9))
    x = rng.normal(size=(batch, input_dim))
    if loss_kind == "mse":
        y = rng.normal(size=(batch, output_dim))
    else:
        y = rng.integers(0, output_dim, size=batch)
    return model, head, x, y


def _instance_loss(model: SharedModel, head: TaskHead, x: np.ndarray, y) -> Tensor:
    # Evaluation-mode decoder dropout is on the path (as an exact identity).
    emb = model.embed(x, training=False)
    losses = []
    for d in range(head.n_decoders):
        pred = head.decode(emb, d, training=False)
        if head.loss_kind == "mse":
            losses.append(ad.mse_loss(pred, Tensor(y)))
        else:
            losses.append(ad.softmax_cross_entropy(pred, y))
    return ad.scale(ad.add_n(losses), 1.0 / len(losses)) if len(losses) > 1 else losses[0]


def run_gradcheck(n_instances: int = 50, seed: int = 0, *, step: float = 1e-5,
                  tolerance: float = 1e-5, kink_margin: float = 1e-3) -> GradCheckReport:
    """Compare analytic and central-finite-difference gradients on
    ``n_instances`` randomized model+loss instances."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 60]))
    worst = 0.0
    redrawn = 0
    done = 0
    while done < n_instances:
        model, head, x, y = _draw_instance(rng)
        if _relu_margin(model, head, x) < kink_margin:
            redrawn += 1
            continue
        params = model.parameters() + head.parameters()
        for p in params:
            p.zero_grad()
        backward(_instance_loss(model, head, x, y))
        analytic = [p.grad.copy() for p in params]

        def loss_value() -> float:
            return _instance_loss(model, head, x, y).item()

        for p, a in zip(params, analytic):
            numeric = numeric_gradient(loss_value, p, h=step)
            worst = max(worst, relative_gradient_error(a, numeric))
        done += 1
    return GradCheckReport(instances=n_instances, max_relative_error=worst,
                           tolerance=tolerance, step=step, redrawn=redrawn)
