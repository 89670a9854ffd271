"""Toy visual and instruction encoders.

These stand in for the frozen pretrained backbones of a full-size system:
randomly initialized, shape-compatible, and deliberately simple.  The visual
encoder is a per-patch linear map plus learned (t, h, w) positional
embeddings; the instruction encoder is a tiny transformer whose position-0
output is the pooled [CLS] summary the router consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .layers import TransformerBlock, prefix_params
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    broadcast_to,
    concat,
    embedding,
    matmul,
    reshape,
    slice_axis,
)


class EncodingError(ValueError):
    """Invalid frames, indices, or token ids handed to an encoder."""


@dataclass
class VideoSample:
    """One synthetic clip: grayscale frames, its answer, and its instruction."""

    frames: np.ndarray  # (T_total, G, G), values in [0, 1]
    answer: int
    family: str  # detail | motion | counting
    instruction_tokens: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise EncodingError(f"frames must be (T, G, G) with T >= 1, got {self.frames.shape}")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise EncodingError("frame values must lie in [0, 1]")
        if len(self.instruction_tokens) == 0:
            raise EncodingError("instruction_tokens must be non-empty")

    @property
    def total_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def modality(self) -> str:
        return "image" if self.total_frames == 1 else "video"


@dataclass
class FrameFeatures:
    """Patch feature grid from the visual encoder: (..., T, H, W, D)."""

    features: Tensor
    frame_indices: np.ndarray  # original frame positions of the T axis

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[-3], self.features.shape[-2]


@dataclass
class InstructionEncoding:
    """cls is the position-0 summary state; tokens are the per-token states."""

    cls: Tensor    # (B, D_text)
    tokens: Tensor  # (B, L, D_text)


def sample_frames(total_frames: int, k: int) -> np.ndarray:
    """Deterministic midpoint sampling: idx_i = floor((i + 0.5) * T / K)."""
    if not 1 <= k <= total_frames:
        raise EncodingError(f"cannot sample {k} frames from {total_frames}")
    idx = np.floor((np.arange(k) + 0.5) * total_frames / k).astype(np.int64)
    return idx


class VideoEncoder:
    """Non-overlapping patch flattening -> linear map -> 3-axis positions.

    Parameters are frozen in every training stage; the trainer enforces this
    through the stage freeze mask.
    """

    def __init__(self, cfg: Config, rng: Rng):
        self.patch = cfg["video.patch"]
        self.grid = cfg["video.grid"]
        self.dim = cfg["encoder.dim"]
        self.total_frames = cfg["video.total_frames"]
        pg = cfg.patch_grid()
        pin = self.patch * self.patch
        self.patch_w = Tensor(rng.normal((pin, self.dim), std=1.0 / np.sqrt(pin)),
                              requires_grad=True)
        self.patch_b = Tensor(np.zeros(self.dim), requires_grad=True)
        self.pos_t = Tensor(rng.normal((self.total_frames, self.dim), std=0.1),
                            requires_grad=True)
        self.pos_h = Tensor(rng.normal((pg, self.dim), std=0.1), requires_grad=True)
        self.pos_w = Tensor(rng.normal((pg, self.dim), std=0.1), requires_grad=True)

    def encode(self, frames: np.ndarray, frame_indices: np.ndarray) -> FrameFeatures:
        """frames: (B, T, G, G) raw values; frame_indices: original positions."""
        if frames.ndim != 4:
            raise EncodingError(f"expected (B, T, G, G) frames, got {frames.shape}")
        b, t, g1, g2 = frames.shape
        if g1 != g2 or g1 % self.patch != 0:
            raise EncodingError(f"frame grid {g1}x{g2} not divisible by patch {self.patch}")
        frame_indices = np.asarray(frame_indices, dtype=np.int64)
        if frame_indices.shape != (t,):
            raise EncodingError("frame_indices must match the frame axis")
        pg = g1 // self.patch
        patches = (frames.reshape(b, t, pg, self.patch, pg, self.patch)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(b, t, pg, pg, self.patch * self.patch))
        x = add(matmul(Tensor(patches), self.patch_w), self.patch_b)
        x = add(x, reshape(embedding(self.pos_t, frame_indices), (t, 1, 1, self.dim)))
        x = add(x, reshape(self.pos_h, (pg, 1, self.dim)))
        x = add(x, self.pos_w)
        return FrameFeatures(features=x, frame_indices=frame_indices)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "patch.w": self.patch_w, "patch.b": self.patch_b,
            "pos_t": self.pos_t, "pos_h": self.pos_h, "pos_w": self.pos_w,
        }


class InstructionEncoder:
    """CLS-prefixed token transformer over the synthetic instruction vocabulary."""

    def __init__(self, cfg: Config, rng: Rng):
        self.vocab = cfg["text.vocab"]
        self.dim = cfg["text.dim"]
        self.max_len = cfg["text.max_len"]
        self.embed = Tensor(rng.normal((self.vocab, self.dim), std=0.5), requires_grad=True)
        self.cls = Tensor(rng.normal((self.dim,), std=0.5), requires_grad=True)
        self.pos = Tensor(rng.normal((self.max_len + 1, self.dim), std=0.1),
                          requires_grad=True)
        self.blocks = [TransformerBlock(rng, self.dim, 2 * self.dim)
                       for _ in range(cfg["text.blocks"])]

    def encode(self, tokens: np.ndarray) -> InstructionEncoding:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, n = tokens.shape
        if n < 1 or n > self.max_len:
            raise EncodingError(f"instruction length {n} outside [1, {self.max_len}]")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise EncodingError(f"token id outside vocabulary of {self.vocab}")
        tok = embedding(self.embed, tokens)
        cls = broadcast_to(reshape(self.cls, (1, 1, self.dim)), (b, 1, self.dim))
        x = concat([cls, tok], axis=1)
        x = add(x, reshape(slice_axis(self.pos, 0, 0, n + 1), (1, n + 1, self.dim)))
        for block in self.blocks:
            x = block(x)
        cls_out = reshape(slice_axis(x, 1, 0, 1), (b, self.dim))
        tok_out = slice_axis(x, 1, 1, n + 1)
        return InstructionEncoding(cls=cls_out, tokens=tok_out)

    def parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embed, "cls": self.cls, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            params.update(prefix_params(f"block{i}", block.parameters()))
        return params
