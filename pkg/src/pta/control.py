"""Decoder-control policies: initialization and between-meta-iteration updates.

Six composable primitives — independent initialization (I), freeze (F),
independent dropout (D), perturb (P), hyperperturb (H), greedy copy (G) —
drive the decoder banks without gradients. The named variants are fixed
combinations; independent initialization is always on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TaskHead

DEFAULT_EPS_P = 0.01
DEFAULT_EPS_H = 0.1
DEFAULT_RATE_CLAMP = (0.2, 0.8)
INITIAL_DROPOUT_RATE = 0.5

POLICY_NAMES = {
    "PTA-I": "I",
    "PTA-F": "IF",
    "PTA-P": "IP",
    "PTA-D": "ID",
    "PTA-FP": "IFP",
    "PTA-GP": "IGP",
    "PTA-GD": "IGD",
    "PTA-HGD": "IHGD",
}


@dataclass(frozen=True)
class ControlPolicy:
    """A flag set plus the noise and clamp hyperparameters of P and H."""

    independent_init: bool = True
    freeze: bool = False
    independent_dropout: bool = False
    perturb: bool = False
    hyperperturb: bool = False
    greedy: bool = False
    eps_p: float = DEFAULT_EPS_P        # weight-noise variance
    eps_h: float = DEFAULT_EPS_H        # rate-noise variance
    rate_clamp: tuple[float, float] = DEFAULT_RATE_CLAMP

    def __post_init__(self):
        if not self.independent_init:
            raise ValueError("independent initialization is assumed by every policy")
        lo, hi = self.rate_clamp
        if not (0.0 <= lo < hi < 1.0):
            raise ValueError(f"rate clamp must satisfy 0 <= lo < hi < 1, got {self.rate_clamp}")
        if self.eps_p < 0 or self.eps_h < 0:
            raise ValueError("noise variances must be nonnegative")

    @property
    def flags(self) -> str:
        out = "I"
        for ch, on in (("F", self.freeze), ("D", self.independent_dropout),
                       ("P", self.perturb), ("H", self.hyperperturb), ("G", self.greedy)):
            if on:
                out += ch
        return out

    def to_dict(self) -> dict:
        return {"flags": self.flags, "eps_p": self.eps_p, "eps_h": self.eps_h,
                "rate_clamp": list(self.rate_clamp)}


def policy_from_flags(flags: str, **kwargs) -> ControlPolicy:
    known = set("IFDPHG")
    bad = set(flags.upper()) - known
    if bad:
        raise ValueError(f"unknown policy flags {sorted(bad)}; valid flags are {sorted(known)}")
    up = flags.upper()
    return ControlPolicy(
        independent_init=True,
        freeze="F" in up,
        independent_dropout="D" in up,
        perturb="P" in up,
        hyperperturb="H" in up,
        greedy="G" in up,
        **kwargs,
    )


def policy_from_name(name: str, **kwargs) -> ControlPolicy:
    """Resolve one of the eight named variants (e.g. ``PTA-HGD``)."""
    key = name.upper()
    if key not in POLICY_NAMES:
        raise ValueError(f"unknown policy {name!r}; known: {sorted(POLICY_NAMES)}")
    return policy_from_flags(POLICY_NAMES[key], **kwargs)


def resolve_policy(spec, **kwargs) -> ControlPolicy:
    """Accept a ControlPolicy, a variant name, or a raw flag string."""
    if isinstance(spec, ControlPolicy):
        return spec
    if isinstance(spec, str):
        if spec.upper() in POLICY_NAMES:
            return policy_from_name(spec, **kwargs)
        return policy_from_flags(spec, **kwargs)
    raise TypeError(f"cannot resolve a policy from {type(spec).__name__}")


def dec_initialize(policy: ControlPolicy, heads: list[TaskHead], seed: int) -> None:
    """Set up the decoder banks before training.

    Re-initializes every decoder independently from per-decoder seed streams,
    resets all dropout rates to 0.5, and (with F) freezes every decoder but
    the first of each task.
    """
    for head in heads:
        for d, dec in enumerate(head.decoders):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), 30, head.task_id, d]))
            bound = 1.0 / np.sqrt(head.embedding_dim)
            dec.weights.values[...] = rng.uniform(
                -bound, bound, size=dec.weights.values.shape)
            dec.bias.values[...] = 0.0
            dec.dropout_rate = INITIAL_DROPOUT_RATE
            dec.frozen = policy.freeze and d >= 1
            dec.last_cost = float("inf")


def dec_update(policy: ControlPolicy, head: TaskHead, costs, rng: np.random.Generator) -> None:
    """Non-gradient decoder update after a meta-iteration, given per-decoder costs.

    Applies, in order: greedy copy of the argmin-cost decoder (lowest index on
    ties; frozen decoders are not overwritten but can be the source), then
    hyperperturb noise on the dropout rate, then perturb noise on weights and
    bias — the last two only on decoders whose pre-copy cost differs from the
    minimum. The best decoder's parameters survive the whole update bit-exactly.
    """
    if head.n_decoders == 0:
        raise ValueError(f"task {head.task_id} has no decoders to update")
    costs = [float(c) for c in costs]
    if len(costs) != head.n_decoders:
        raise ValueError(f"got {len(costs)} costs for {head.n_decoders} decoders")
    best = int(np.argmin(costs))
    c_min = costs[best]

    if policy.greedy:
        src = head.decoders[best]
        src_w = src.weights.values.copy()
        src_b = src.bias.values.copy()
        src_rate = src.dropout_rate
        for dec in head.decoders:
            if dec.frozen:
                continue
            dec.weights.values[...] = src_w
            dec.bias.values[...] = src_b
            dec.dropout_rate = src_rate

    if policy.hyperperturb:
        std = float(np.sqrt(policy.eps_h))
        lo, hi = policy.rate_clamp
        for d, dec in enumerate(head.decoders):
            if costs[d] == c_min:
                continue
            dec.dropout_rate = float(np.clip(dec.dropout_rate + rng.normal(0.0, std), lo, hi))

    if policy.perturb:
        std = float(np.sqrt(policy.eps_p))
        for d, dec in enumerate(head.decoders):
            if costs[d] == c_min:
                continue
            dec.weights.values += rng.normal(0.0, std, size=dec.weights.values.shape)
            dec.bias.values += rng.normal(0.0, std, size=dec.bias.values.shape)


def control_rng(seed: int, meta_iteration: int, task_id: int) -> np.random.Generator:
    """Per-(task, meta-iteration) noise substream, so task order is irrelevant."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), 31, int(meta_iteration), int(task_id)]))
