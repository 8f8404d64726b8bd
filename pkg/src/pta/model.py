"""Shared underlying model and per-task linear decoder banks.

The shared model maps inputs to an M-dimensional embedding; each task owns a
bank of linear decoders, every decoder preceded by its own dropout layer.
One embedding forward pass per batch feeds all decoders of all tasks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, derive_seed, dropout, matmul, relu, tanh

_ACTIVATIONS = {"relu": relu, "tanh": tanh}

CHECKPOINT_MAGIC = b"PTACKPT1"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the shared model: affine hidden layers with relu/tanh
    activations, then a final affine map to the embedding."""

    input_dim: int
    hidden_layers: tuple[tuple[int, str], ...] = ()
    embedding_dim: int = 16
    internal_dropout: float = 0.0

    def validate(self) -> None:
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ValueError(f"dimensions must be >= 1, got input_dim={self.input_dim}, "
                             f"embedding_dim={self.embedding_dim}")
        for units, act in self.hidden_layers:
            if units < 1:
                raise ValueError(f"hidden layer width must be >= 1, got {units}")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {sorted(_ACTIVATIONS)}")
        if not 0.0 <= self.internal_dropout < 1.0:
            raise ValueError(f"internal_dropout must lie in [0, 1), got {self.internal_dropout}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": [[u, a] for u, a in self.hidden_layers],
            "embedding_dim": self.embedding_dim,
            "internal_dropout": self.internal_dropout,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        spec = ModelSpec(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple((int(u), str(a)) for u, a in d.get("hidden_layers", [])),
            embedding_dim=int(d.get("embedding_dim", 16)),
            internal_dropout=float(d.get("internal_dropout", 0.0)),
        )
        spec.validate()
        return spec


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SharedModel:
    """The shared model: parameters live in leaf tensors reused across steps;
    the compute graph is rebuilt by every ``embed`` call."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.embed_calls = 0
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        fan_in = spec.input_dim
        dims = [units for units, _ in spec.hidden_layers] + [spec.embedding_dim]
        for out_dim in dims:
            self.weights.append(Tensor(_uniform_init(rng, fan_in, (fan_in, out_dim))))
            self.biases.append(Tensor(np.zeros(out_dim)))
            fan_in = out_dim

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def embed(self, x, training: bool = False, mask_seed=0) -> Tensor:
        """One forward pass through the shared model for a whole batch."""
        x = as_tensor(x)
        if x.values.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected batch of shape (n, {self.spec.input_dim}), got {x.shape}")
        self.embed_calls += 1
        h = x
        n_hidden = len(self.spec.hidden_layers)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < n_hidden:
                h = _ACTIVATIONS[self.spec.hidden_layers[i][1]](h)
                if self.spec.internal_dropout > 0.0:
                    h = dropout(h, self.spec.internal_dropout,
                                derive_seed(mask_seed, 1000 + i), training)
        return h

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Decoder:
    """One linear decoder: an M x C weight matrix and a length-C bias, plus its
    single hyperparameter (the dropout rate of the layer preceding it)."""

    def __init__(self, embedding_dim: int, output_dim: int, seed: int = 0,
                 dropout_rate: float = 0.5):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
        bound = 1.0 / np.sqrt(embedding_dim)
        self.weights = Tensor(rng.uniform(-bound, bound, size=(embedding_dim, output_dim)))
        self.bias = Tensor(np.zeros(output_dim))
        self.dropout_rate = float(dropout_rate)
        self.frozen = False
        self.last_cost = float("inf")

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.values.ravel(), self.bias.values])


@dataclass
class PseudoTask:
    """A frozen snapshot of one decoder over a true task's data: one 'way' of
    solving the task, with no fixed intermediate labels."""

    task_id: int
    decoder_index: int
    weights: np.ndarray
    bias: np.ndarray
    dropout_rate: float
    dataset: object = None

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])


class TaskHead:
    """The bank of D decoders owned by one task."""

    def __init__(self, task_id: int, embedding_dim: int, output_dim: int,
                 n_decoders: int, loss_kind: str, seed: int = 0):
        if n_decoders < 1:
            raise ValueError(f"need at least one decoder, got {n_decoders}")
        if loss_kind not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        self.task_id = task_id
        self.embedding_dim = embedding_dim
        self.output_dim = output_dim
        self.loss_kind = loss_kind
        self.decoders = [
            Decoder(embedding_dim, output_dim, seed=_decoder_seed(seed, task_id, d))
            for d in range(n_decoders)
        ]

    @property
    def n_decoders(self) -> int:
        return len(self.decoders)

    def decode(self, embedding: Tensor, d: int, training: bool = False, mask_seed=0,
               independent_dropout: bool = False) -> Tensor:
        """Apply decoder ``d``: its dropout on the embedding, then the affine map.

        With ``independent_dropout`` off, every decoder of the task shares the
        same mask seed for this batch; with it on, each decoder derives its
        own seed from the shared one.
        """
        if not 0 <= d < len(self.decoders):
            raise ValueError(f"decoder index {d} out of range for D={len(self.decoders)}")
        dec = self.decoders[d]
        seed = derive_seed(mask_seed, 2000 + d) if independent_dropout else mask_seed
        dropped = dropout(embedding, dec.dropout_rate, seed, training)
        return add(matmul(dropped, dec.weights), dec.bias)

    def snapshot(self, dataset=None) -> list[PseudoTask]:
        """Deep-copied pseudo-tasks; later training never mutates them."""
        return [
            PseudoTask(
                task_id=self.task_id,
                decoder_index=d,
                weights=dec.weights.values.copy(),
                bias=dec.bias.values.copy(),
                dropout_rate=dec.dropout_rate,
                dataset=dataset,
            )
            for d, dec in enumerate(self.decoders)
        ]

    def parameters(self, include_frozen: bool = True) -> list[Tensor]:
        out = []
        for dec in self.decoders:
            if include_frozen or not dec.frozen:
                out.extend(dec.parameters())
        return out

    def zero_grad(self) -> None:
        for dec in self.decoders:
            for p in dec.parameters():
                p.zero_grad()


def _decoder_seed(seed: int, task_id: int, d: int) -> int:
    ss = np.random.SeedSequence([int(seed), 2, int(task_id), int(d)])
    return int(ss.generate_state(1, np.uint64)[0])


def snapshot_decoders(head: TaskHead, dataset=None) -> list[PseudoTask]:
    return head.snapshot(dataset)


def save_checkpoint(path, model: SharedModel, heads: list[TaskHead]) -> None:
    """Write all parameters to a flat binary file.

    Layout: 8 magic bytes ``PTACKPT1``, a little-endian uint32 header length,
    a UTF-8 JSON header (model spec plus per-task head shapes, dropout rates
    and frozen flags), then every parameter as little-endian float64 in
    declaration order: model weight/bias pairs, then per task per decoder
    weights then bias.
    """
    header = {
        "schema_version": 1,
        "model": model.spec.to_dict(),
        "tasks": [
            {
                "task_id": h.task_id,
                "output_dim": h.output_dim,
                "loss_kind": h.loss_kind,
                "decoders": [
                    {"dropout_rate": dec.dropout_rate, "frozen": dec.frozen}
                    for dec in h.decoders
                ],
            }
            for h in heads
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [p.values for p in model.parameters()]
    for h in heads:
        for dec in h.decoders:
            chunks.extend((dec.weights.values, dec.bias.values))
    payload = np.concatenate([c.ravel() for c in chunks]).astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload.tobytes())


def load_checkpoint(path) -> tuple[SharedModel, list[TaskHead]]:
    """Rebuild a model and its heads from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)

    spec = ModelSpec.from_dict(header["model"])
    model = SharedModel(spec, seed=0)
    heads = []
    for t in header["tasks"]:
        head = TaskHead(
            task_id=int(t["task_id"]),
            embedding_dim=spec.embedding_dim,
            output_dim=int(t["output_dim"]),
            n_decoders=len(t["decoders"]),
            loss_kind=str(t["loss_kind"]),
        )
        for dec, dmeta in zip(head.decoders, t["decoders"]):
            dec.dropout_rate = float(dmeta["dropout_rate"])
            dec.frozen = bool(dmeta["frozen"])
        heads.append(head)

    offset = 0

    def take(tensor: Tensor) -> None:
        nonlocal offset
        n = tensor.values.size
        tensor.values[...] = payload[offset:offset + n].reshape(tensor.values.shape)
        offset += n

    for p in model.parameters():
        take(p)
    for head in heads:
        for dec in head.decoders:
            take(dec.weights)
            take(dec.bias)
    if offset != payload.size:
        raise ValueError(f"checkpoint payload size mismatch: used {offset} of {payload.size}")
    return model, heads
