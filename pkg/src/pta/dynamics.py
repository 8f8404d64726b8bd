"""Numerical checks of the training-dynamics algebra.

Three facts about linear decoder banks over a shared model are verified
executably: (1) a bank of two fixed decoders can induce shared-model updates
that no single decoder reproduces at any learning rate — certified by exact
rational cross-multiplication on a concrete instance; (2) the converse
simulation: D duplicated decoders at rate lr/D match one decoder at rate lr;
(3) training the decoder-averaged ensemble is gradient-equivalent to training
a single mean-weight decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, add_n, backward, matmul, mse_loss
from .model import ModelSpec, SharedModel

NON_SIMULABLE = "NON-SIMULABLE"
SIMULABLE_CONSISTENT = "SIMULABLE-CONSISTENT"


class InadmissibleInstanceError(ValueError):
    """The instance has a zero residual-weighted sum, so the ratio test is undefined."""


@dataclass(frozen=True)
class WitnessInstance:
    """A single-sample regression task with fixed bias-free linear decoders,
    examined at several shared-model output points."""

    y: Fraction
    decoders: tuple[tuple[Fraction, ...], ...]   # D vectors of length M
    points: tuple[tuple[Fraction, ...], ...]     # K embedding vectors of length M
    alpha: Fraction = Fraction(1)

    def __post_init__(self):
        if len(self.decoders) < 1 or len(self.points) < 1:
            raise ValueError("need at least one decoder and one point")
        m = len(self.decoders[0])
        if any(len(w) != m for w in self.decoders) or any(len(f) != m for f in self.points):
            raise ValueError("all decoder and point vectors must share one length")
        if self.alpha <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def embedding_dim(self) -> int:
        return len(self.decoders[0])

    def residual(self, d: int, k: int) -> Fraction:
        w, f = self.decoders[d], self.points[k]
        return self.y - sum(wi * fi for wi, fi in zip(w, f))


def _fractions(values) -> tuple[Fraction, ...]:
    return tuple(Fraction(v) for v in values)


def witness_instance(y, decoders, points, alpha=1) -> WitnessInstance:
    """Build an instance from ints/floats, converting exactly to rationals."""
    return WitnessInstance(
        y=Fraction(y),
        decoders=tuple(_fractions(w) for w in decoders),
        points=tuple(_fractions(f) for f in points),
        alpha=Fraction(alpha),
    )


def paper_witness() -> WitnessInstance:
    """The concrete two-decoder instance whose update directions rotate
    between evaluation points: y=1, decoders (2,3) and (4,5), points (6,7)
    and (8,9)."""
    return witness_instance(1, [(2, 3), (4, 5)], [(6, 7), (8, 9)])


def residual_weighted_sum(instance: WitnessInstance, k: int) -> list[Fraction]:
    """Per-coordinate sum over decoders of residual * decoder weight at point k."""
    m = instance.embedding_dim
    out = [Fraction(0)] * m
    for d, w in enumerate(instance.decoders):
        r = instance.residual(d, k)
        for i in range(m):
            out[i] += r * w[i]
    return out


def pseudo_gradient_sum(instance: WitnessInstance, k: int) -> list[Fraction]:
    """The decoder bank's pull on the shared model's output at point k (with
    an identity Jacobian): twice the residual-weighted decoder sum."""
    return [2 * s for s in residual_weighted_sum(instance, k)]


@dataclass(frozen=True)
class NonsimulabilityReport:
    verdict: str
    coordinates: tuple[int, int]       # 1-based coordinate pair used
    points: tuple[int, int]            # 1-based point pair used
    cross_products: tuple[Fraction, Fraction]

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "coordinates": list(self.coordinates),
            "points": list(self.points),
            "cross_products": [_fraction_json(c) for c in self.cross_products],
        }


def _fraction_json(f: Fraction):
    return int(f) if f.denominator == 1 else str(f)


def check_nonsimulability(instance: WitnessInstance) -> NonsimulabilityReport:
    """Exact ratio test on coordinate pair (1, 2) at the first two points.

    A single decoder at any positive rate forces the per-coordinate update
    ratios to be constant across points; if the exact cross products differ,
    no single decoder simulates the bank. Equal cross products mean the test
    is consistent with simulability (not a proof of it).
    """
    if len(instance.points) < 2:
        raise ValueError("need at least two evaluation points")
    if instance.embedding_dim < 2:
        raise ValueError("need at least two coordinates")
    sums = [residual_weighted_sum(instance, k) for k in range(len(instance.points))]
    for k, s in enumerate(sums):
        zero = [i for i, v in enumerate(s) if v == 0]
        if zero:
            raise InadmissibleInstanceError(
                f"residual-weighted sum is zero at point {k + 1}, "
                f"coordinate(s) {[i + 1 for i in zero]}")
    i, j = 0, 1
    cross_a = sums[0][i] * sums[1][j]
    cross_b = sums[0][j] * sums[1][i]
    verdict = NON_SIMULABLE if cross_a != cross_b else SIMULABLE_CONSISTENT
    return NonsimulabilityReport(verdict=verdict, coordinates=(1, 2), points=(1, 2),
                                 cross_products=(cross_a, cross_b))


def _random_model(rng: np.random.Generator, input_dim: int, embedding_dim: int) -> SharedModel:
    spec = ModelSpec(
        input_dim=input_dim,
        hidden_layers=((int(rng.integers(2, 7)), "tanh"),),
        embedding_dim=embedding_dim,
    )
    model = SharedModel(spec, seed=int(rng.integers(0, 2**32)))
    return model


def shared_model_gradients(model: SharedModel, x: np.ndarray, y: np.ndarray,
                           decoder_weights: list[np.ndarray]) -> list[np.ndarray]:
    """Gradients of the decoder-summed squared-error objective w.r.t. the
    shared model's parameters, with the decoders held fixed and bias-free."""
    model.zero_grad()
    emb = model.embed(x, training=False)
    losses = [mse_loss(matmul(emb, Tensor(w)), Tensor(y)) for w in decoder_weights]
    backward(add_n(losses) if len(losses) > 1 else losses[0])
    return [p.grad.copy() for p in model.parameters()]


def _relative_gap(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    num = max(float(np.max(np.abs(ga - gb))) for ga, gb in zip(a, b))
    den = max(max(float(np.max(np.abs(g))) for g in a),
              max(float(np.max(np.abs(g))) for g in b), 1e-300)
    return num / den


@dataclass(frozen=True)
class VerdictReport:
    passed: bool
    max_relative_error: float
    tolerance: float

    def to_json_dict(self) -> dict:
        return {"passed": self.passed, "max_relative_error": self.max_relative_error,
                "tolerance": self.tolerance}


def verify_simulation_by_duplication(w_o: np.ndarray, gamma: float, D: int, *,
                                     seed: int = 0, tolerance: float = 1e-10) -> VerdictReport:
    """Check that D copies of one decoder at rate gamma/D update the shared
    model exactly like the single decoder at rate gamma, on a random model."""
    if D < 1:
        raise ValueError("need at least one duplicate")
    w_o = np.asarray(w_o, dtype=np.float64)
    if w_o.ndim != 2:
        raise ValueError(f"decoder weights must be M x C, got shape {w_o.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 50]))
    model = _random_model(rng, input_dim=int(rng.integers(2, 7)), embedding_dim=w_o.shape[0])
    n = int(rng.integers(1, 5))
    x = rng.normal(size=(n, model.spec.input_dim))
    y = rng.normal(size=(n, w_o.shape[1]))

    grads_bank = shared_model_gradients(model, x, y, [w_o] * D)
    updates_bank = [-(gamma / D) * g for g in grads_bank]
    grads_single = shared_model_gradients(model, x, y, [w_o])
    updates_single = [-gamma * g for g in grads_single]

    gap = _relative_gap(updates_bank, updates_single)
    return VerdictReport(passed=gap <= tolerance, max_relative_error=gap,
                         tolerance=tolerance)


def verify_ensemble_collapse(decoder_weights: list[np.ndarray], model: SharedModel,
                             x: np.ndarray, y: np.ndarray, *,
                             tolerance: float = 1e-10) -> VerdictReport:
    """Check that the averaged-prediction training objective gives the same
    shared-model gradient as a single decoder holding the mean weights."""
    weights = [np.asarray(w, dtype=np.float64) for w in decoder_weights]
    D = len(weights)

    model.zero_grad()
    emb = model.embed(x, training=False)
    preds = [matmul(emb, Tensor(w)) for w in weights]
    mean_pred = ad.scale(add_n(preds) if D > 1 else preds[0], 1.0 / D)
    backward(mse_loss(mean_pred, Tensor(y)))
    grads_ensemble = [p.grad.copy() for p in model.parameters()]

    grads_mean = shared_model_gradients(model, x, y, [np.mean(weights, axis=0)])

    gap = _relative_gap(grads_ensemble, grads_mean)
    return VerdictReport(passed=gap <= tolerance, max_relative_error=gap,
                         tolerance=tolerance)


def ensemble_vs_bank_gap(decoder_weights: list[np.ndarray], model: SharedModel,
                         x: np.ndarray, y: np.ndarray) -> float:
    """Relative gap between the decoder-averaged per-decoder objective's
    shared-model gradient and the mean-weight single decoder's gradient.
    Nonzero for generic distinct decoders: the bank's dynamics are richer."""
    weights = [np.asarray(w, dtype=np.float64) for w in decoder_weights]
    grads_bank = shared_model_gradients(model, x, y, weights)
    grads_bank = [g / len(weights) for g in grads_bank]
    grads_mean = shared_model_gradients(model, x, y, [np.mean(weights, axis=0)])
    return _relative_gap(grads_bank, grads_mean)


def random_instance_report(n_instances: int = 100, seed: int = 0, *,
                           tolerance: float = 1e-10) -> dict:
    """Run the duplication and ensemble-collapse checks over seeded random
    instances; used by the command-line verification report."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 51]))
    dup_worst = 0.0
    ens_worst = 0.0
    contrast_hits = 0
    for i in range(n_instances):
        m = int(rng.integers(2, 9))
        c = int(rng.integers(1, 4))
        d = int(rng.integers(2, 9))
        w_o = rng.normal(size=(m, c))
        rep = verify_simulation_by_duplication(w_o, gamma=float(rng.uniform(0.01, 1.0)),
                                               D=d, seed=int(rng.integers(0, 2**32)),
                                               tolerance=tolerance)
        dup_worst = max(dup_worst, rep.max_relative_error)

        model = _random_model(rng, input_dim=int(rng.integers(2, 7)), embedding_dim=m)
        n = int(rng.integers(1, 5))
        x = rng.normal(size=(n, model.spec.input_dim))
        y = rng.normal(size=(n, c))
        weights = [rng.normal(size=(m, c)) for _ in range(d)]
        rep = verify_ensemble_collapse(weights, model, x, y, tolerance=tolerance)
        ens_worst = max(ens_worst, rep.max_relative_error)
        if ensemble_vs_bank_gap(weights, model, x, y) > 1e-3:
            contrast_hits += 1
    return {
        "instances": n_instances,
        "duplication": {"max_relative_error": dup_worst, "tolerance": tolerance,
                        "passed": dup_worst <= tolerance},
        "ensemble_collapse": {"max_relative_error": ens_worst, "tolerance": tolerance,
                              "passed": ens_worst <= tolerance},
        "bank_objective_distinct_count": contrast_hits,
    }


def verification_report(n_instances: int = 20, seed: int = 0) -> dict:
    """The full machine-readable report: exact witness certificate plus the
    randomized duplication and ensemble-collapse checks."""
    witness = check_nonsimulability(paper_witness())
    randomized = random_instance_report(n_instances, seed)
    passed = (witness.verdict == NON_SIMULABLE
              and randomized["duplication"]["passed"]
              and randomized["ensemble_collapse"]["passed"])
    return {
        "witness": witness.to_json_dict(),
        "randomized": randomized,
        "passed": passed,
    }
