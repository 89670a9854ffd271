"""Instruction-driven routing and fusion of projector outputs.

The router maps the instruction summary through two MLP stages to one logit
per projector; a softmax turns logits into gate values on the simplex; the
fused embedding is the gate-weighted elementwise sum of the projector token
streams.  The alternative fusion strategies used by the ablation harness
(uniform average, token concatenation, random simplex weights, random one-hot
choice) live here too.

The second router stage is zero-initialized, so an untrained router emits
exactly zero logits and uniform gates: the router strategy and the average
strategy coincide until tuning moves the gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .encoders import InstructionEncoding
from .layers import linear_params
from .projectors import VisualTokens
from .rng import Rng
from .tensor import Tensor, add, concat, gelu, matmul, reshape, slice_axis, softmax


class FusionError(ValueError):
    """Mismatched embeddings or an unknown fusion strategy."""


@dataclass
class RouterLogits:
    values: Tensor  # (B, 3)


@dataclass
class GateWeights:
    p: Tensor  # (B, n_slots); rows on the probability simplex


@dataclass
class FusionStrategy:
    kind: str  # router | average | concat | random-weights | random-choose
    rng: Optional[Rng] = None  # consumed by the random kinds only


class Router:
    """cls -> (linear, GELU) -> linear -> one logit per projector slot."""

    def __init__(self, cfg: Config, rng: Rng, n_slots: int = 3):
        d_text = cfg["text.dim"]
        hidden = cfg["router.hidden"]
        self.n_slots = n_slots
        self.w1, self.b1 = linear_params(rng, d_text, hidden)
        # Zero second stage: gates start exactly uniform and symmetric.
        self.w2 = Tensor(np.zeros((hidden, n_slots)), requires_grad=True)
        self.b2 = Tensor(np.zeros(n_slots), requires_grad=True)

    def route(self, instr: InstructionEncoding) -> RouterLogits:
        h = gelu(add(matmul(instr.cls, self.w1), self.b1))
        return RouterLogits(values=add(matmul(h, self.w2), self.b2))

    def parameters(self) -> dict[str, Tensor]:
        return {"mlp1.w": self.w1, "mlp1.b": self.b1,
                "mlp2.w": self.w2, "mlp2.b": self.b2}


def gate(logits: RouterLogits, active: Optional[Sequence[int]] = None) -> GateWeights:
    """Softmax gate values; with ``active`` set, excluded slots get exactly 0.

    Restricting to a subset is the -inf-logit limit: the softmax runs over
    the active columns only and the rest of the row is identically zero.
    """
    values = logits.values
    n = values.shape[-1]
    if active is None or len(active) == n:
        return GateWeights(p=softmax(values, axis=-1))
    cols = [slice_axis(values, values.ndim - 1, i, i + 1) for i in active]
    sub = softmax(concat(cols, axis=-1), axis=-1)
    zero = Tensor(np.zeros(values.shape[:-1] + (1,)))
    out_cols = []
    for i in range(n):
        if i in active:
            j = list(active).index(i)
            out_cols.append(slice_axis(sub, sub.ndim - 1, j, j + 1))
        else:
            out_cols.append(zero)
    return GateWeights(p=concat(out_cols, axis=-1))


def _exact_one_hot_rows(p: np.ndarray) -> Optional[np.ndarray]:
    """Selected index per row if every row is exactly one-hot, else None."""
    ones = p == 1.0
    zeros = p == 0.0
    if np.all(ones.sum(axis=-1) == 1) and np.all(ones | zeros):
        return ones.argmax(axis=-1)
    return None


def fuse(p: GateWeights, embeddings: Sequence[VisualTokens]) -> VisualTokens:
    """Convex combination of aligned token streams: sum_i p_i * E_i.

    Exact one-hot gates reduce to a bitwise copy of the selected stream (at a
    one-hot point the gate gradient through a softmax is identically zero, so
    the shortcut is gradient-equivalent).
    """
    shapes = {e.tokens.shape for e in embeddings}
    if len(shapes) != 1:
        raise FusionError(f"cannot fuse mismatched token shapes {sorted(shapes)}")
    pv = p.p
    if pv.ndim == 1:
        pv = reshape(pv, (1, pv.shape[0]))
    if pv.shape[-1] != len(embeddings):
        raise FusionError(f"{pv.shape[-1]} gate values for {len(embeddings)} embeddings")

    selected = _exact_one_hot_rows(pv.data)
    if selected is not None:
        if np.all(selected == selected[0]):
            src = embeddings[int(selected[0])].tokens
            out = src * 1.0  # identity op keeps the graph connected; bitwise equal
        else:
            rows = [slice_axis(embeddings[int(s)].tokens, 0, b, b + 1)
                    for b, s in enumerate(selected)]
            out = concat(rows, axis=0)
        return VisualTokens(tokens=out, source="fused")

    total = None
    for i, emb in enumerate(embeddings):
        weight = reshape(slice_axis(pv, 1, i, i + 1), (pv.shape[0], 1, 1))
        term = emb.tokens * weight
        total = term if total is None else add(total, term)
    return VisualTokens(tokens=total, source="fused")


def uniform_gates(batch: int, n_slots: int = 3) -> GateWeights:
    return GateWeights(p=Tensor(np.full((batch, n_slots), 1.0 / n_slots)))


def one_hot_gates(batch: int, index: int, n_slots: int = 3) -> GateWeights:
    p = np.zeros((batch, n_slots))
    p[:, index] = 1.0
    return GateWeights(p=Tensor(p))


def _scatter_gates(compact: np.ndarray, active: Sequence[int],
                   n_slots: int) -> GateWeights:
    full = np.zeros((compact.shape[0], n_slots))
    full[:, list(active)] = compact
    return GateWeights(p=Tensor(full))


def fuse_with_strategy(strategy: FusionStrategy, instr: InstructionEncoding,
                       embeddings: Sequence[VisualTokens], router: Router,
                       active: Optional[Sequence[int]] = None,
                       ) -> tuple[VisualTokens, Optional[GateWeights]]:
    """Fuse per the configured strategy; returns (tokens, gates or None).

    ``embeddings`` are the streams of the ``active`` slots, in slot order.
    Reported gates are always slot-aligned (exact zeros on inactive slots);
    concat needs no alignment and reports no gates.
    """
    kind = strategy.kind
    batch = embeddings[0].tokens.shape[0]
    n = len(embeddings)
    if active is None:
        active = tuple(range(n))
    n_slots = router.n_slots
    if kind == "concat":
        tokens = concat([e.tokens for e in embeddings], axis=1)
        return VisualTokens(tokens=tokens, source="fused"), None
    if kind == "router":
        logits = router.route(instr)
        g = gate(logits, active if len(active) < n_slots else None)
        if len(active) < n_slots:
            compact = GateWeights(
                p=concat([slice_axis(g.p, 1, i, i + 1) for i in active], axis=1))
        else:
            compact = g
        return fuse(compact, embeddings), g
    if kind == "average":
        compact = uniform_gates(batch, n)
    elif kind == "random-weights":
        if strategy.rng is None:
            raise FusionError("random-weights strategy needs an rng stream")
        rows = np.stack([_random_simplex(strategy.rng, n) for _ in range(batch)])
        compact = GateWeights(p=Tensor(rows))
    elif kind == "random-choose":
        if strategy.rng is None:
            raise FusionError("random-choose strategy needs an rng stream")
        rows = np.zeros((batch, n))
        for b in range(batch):
            rows[b, strategy.rng.integers(n)] = 1.0
        compact = GateWeights(p=Tensor(rows))
    else:
        raise FusionError(f"unknown fusion strategy {kind!r}")
    return fuse(compact, embeddings), _scatter_gates(compact.p.data, active, n_slots)


def _random_simplex(rng: Rng, n: int) -> np.ndarray:
    if n == 3:
        return rng.simplex3()
    u = rng.uniform((n,))
    while u.sum() == 0.0:
        u = rng.uniform((n,))
    return u / u.sum()


def modality_gate(modality: str, instr: Optional[InstructionEncoding],
                  router: Router, batch: int,
                  image_slot: int = 0) -> GateWeights:
    """Image inputs force a one-hot gate on the image-based slot, bypassing
    the router entirely; video inputs take the routed path."""
    if modality == "image":
        return one_hot_gates(batch, image_slot, router.n_slots)
    if modality == "video":
        if instr is None:
            raise FusionError("video modality requires an instruction encoding")
        return gate(router.route(instr))
    raise FusionError(f"unknown modality {modality!r}")
