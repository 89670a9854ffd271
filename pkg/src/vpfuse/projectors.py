"""The three visual projectors and the token-budget arithmetic that keeps
their outputs interchangeable.

Element-wise fusion only makes sense if every projector emits the same number
of tokens, so budgets are derived in closed form from the config (never by
running the network) and checked both at parse time and at model
construction.  The test suite separately asserts that each network's actual
output count equals its arithmetic count.

Projector families:

- image: per-position two-layer MLP (linear -> GELU -> linear) over the
  sampled frames' patch grid, optionally pre-pooled spatially.
- stc: strided/padded 3D convolution block(s) over (T, H, W) with GELU
  between blocks, then a per-token linear map into the decoder width.
- com: per-frame compression over the full frame set; a few cross-attention
  context tokens whose queries are conditioned on the instruction summary,
  plus spatially binned content tokens, with a learned separator token after
  every frame group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config, ConfigError
from .encoders import FrameFeatures, InstructionEncoding
from .layers import linear_params
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    broadcast_to,
    concat,
    conv3d,
    conv3d_out_dim,
    gelu,
    matmul,
    pool_bins,
    pool_grid,
    reshape,
    softmax,
    transpose,
)

SOURCE_TAGS = {
    "image": "image-based",
    "stc": "spatial-temporal",
    "com": "token-compress",
}


@dataclass
class VisualTokens:
    tokens: Tensor  # (B, N, D_model)
    source: str     # image-based | spatial-temporal | token-compress | fused

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class TokenBudget:
    label: str
    kind: str
    count: int
    derivation: str


@dataclass
class AlignmentReport:
    ok: bool
    message: str


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _image_budget(cfg: Config, label: str) -> TokenBudget:
    t = cfg["sampler.frames"]
    pg = cfg.patch_grid()
    pre = cfg["img.prepool"]
    g = _ceil_div(pg, pre)
    seps = t if cfg["img.separator"] else 0
    count = t * g * g + seps
    pool_note = f" (pre-pooled {pg}->{g})" if pre > 1 else ""
    sep_note = f" + {seps} separators" if seps else ""
    return TokenBudget(label, "image",
                       count, f"{t} frames x {g}x{g} grid{pool_note}{sep_note} = {count}")


def _stc_budget(cfg: Config, label: str) -> TokenBudget:
    k = cfg["stc.kernel"]
    stride = cfg["stc.stride"]
    pad = cfg["stc.pad"]
    pg = cfg.patch_grid()
    dims = (cfg["sampler.frames"], pg, pg)
    chain = [dims]
    for _ in range(cfg["stc.blocks"]):
        nxt = []
        for d, s, p in zip(dims, stride, pad):
            if k > d + 2 * p:
                raise ConfigError(f"stc kernel {k} exceeds padded extent {d + 2 * p}")
            o = conv3d_out_dim(d, k, s, p)
            if o <= 0:
                raise ConfigError(f"stc conv collapses dims {dims} to non-positive size")
            nxt.append(o)
        dims = tuple(nxt)
        chain.append(dims)
    count = dims[0] * dims[1] * dims[2]
    path = " -> ".join("x".join(str(d) for d in c) for c in chain)
    return TokenBudget(label, "stc",
                       count, f"conv k={k} stride={stride} pad={pad}: {path} = {count}")


def _com_budget(cfg: Config, label: str) -> TokenBudget:
    t = cfg["video.total_frames"]
    c = cfg["com.context"] + cfg["com.content"]
    m = cfg["com.sep_period"]
    if c == 0:
        raise ConfigError("com projector needs at least one context or content token")
    if m == 0:
        count = t * c
        return TokenBudget(label, "com",
                           count, f"{t} frames x {c} tokens, no separators = {count}")
    if t % m != 0:
        raise ConfigError(f"com.sep_period {m} must divide video.total_frames {t}")
    groups = t // m
    per_group = m * c + 1
    count = groups * per_group
    return TokenBudget(label, "com",
                       count, f"{groups} groups x ({m} frames x {c} tokens + 1 sep) "
                              f"= {groups} x {per_group} = {count}")


_BUDGET_FNS = {"image": _image_budget, "stc": _stc_budget, "com": _com_budget}


def compute_token_budget(cfg: Config) -> list[TokenBudget]:
    """Closed-form token count per projector slot."""
    labels = cfg.slot_labels()
    kinds = cfg["projectors.kinds"]
    return [_BUDGET_FNS[kind](cfg, label) for label, kind in zip(labels, kinds)]


def validate_alignment(budgets: list[TokenBudget]) -> AlignmentReport:
    """ok iff all counts are equal; otherwise a report naming the offenders."""
    counts = [b.count for b in budgets]
    lines = [f"  {b.label} ({SOURCE_TAGS[b.kind]}): {b.derivation}" for b in budgets]
    if len(set(counts)) == 1:
        return AlignmentReport(True, "\n".join(lines))
    majority = max(set(counts), key=counts.count)
    odd = [b.label for b in budgets if b.count != majority]
    lines.append(f"  mismatch: {', '.join(odd)} disagree(s) with the "
                 f"{majority}-token majority")
    return AlignmentReport(False, "\n".join(lines))


class ImageProjector:
    """Frame-local MLP2x-GELU projector; no cross-frame mixing by design."""

    kind = "image"

    def __init__(self, cfg: Config, rng: Rng):
        d_in = cfg["encoder.dim"]
        hidden = cfg["img.hidden"]
        d_out = cfg["model.dim"]
        self.prepool = cfg["img.prepool"]
        self.separator_enabled = cfg["img.separator"]
        self.w1, self.b1 = linear_params(rng, d_in, hidden)
        self.w2, self.b2 = linear_params(rng, hidden, d_out)
        self.sep = (Tensor(rng.normal((d_out,), std=0.1), requires_grad=True)
                    if self.separator_enabled else None)
        self.d_out = d_out

    def __call__(self, f: FrameFeatures) -> VisualTokens:
        x = pool_grid(f.features, self.prepool)
        b, t, h, w, d = x.shape
        x = reshape(x, (b, t * h * w, d))
        x = add(matmul(gelu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)
        if self.sep is not None:
            x = reshape(x, (b, t, h * w, self.d_out))
            sep = broadcast_to(reshape(self.sep, (1, 1, 1, self.d_out)),
                               (b, t, 1, self.d_out))
            x = reshape(concat([x, sep], axis=2), (b, t * (h * w + 1), self.d_out))
        return VisualTokens(tokens=x, source=SOURCE_TAGS[self.kind])

    def parameters(self) -> dict[str, Tensor]:
        params = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.sep is not None:
            params["sep"] = self.sep
        return params


class StcProjector:
    """Spatial-temporal 3D-conv connector over the sampled frame grid."""

    kind = "stc"

    def __init__(self, cfg: Config, rng: Rng):
        d_in = cfg["encoder.dim"]
        ch = cfg["stc.channels"]
        d_out = cfg["model.dim"]
        k = cfg["stc.kernel"]
        self.stride = cfg["stc.stride"]
        self.pad = cfg["stc.pad"]
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = d_in
        for _ in range(cfg["stc.blocks"]):
            fan_in = k * k * k * cin
            self.kernels.append(Tensor(rng.normal((k, k, k, cin, ch),
                                                  std=1.0 / math.sqrt(fan_in)),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(ch), requires_grad=True))
            cin = ch
        self.out_w, self.out_b = linear_params(rng, ch, d_out)
        self.d_out = d_out

    def __call__(self, f: FrameFeatures) -> VisualTokens:
        x = f.features
        for i, (kern, bias) in enumerate(zip(self.kernels, self.biases)):
            if i > 0:
                x = gelu(x)
            x = add(conv3d(x, kern, self.stride, self.pad), bias)
        b, t, h, w, c = x.shape
        x = add(matmul(reshape(x, (b, t * h * w, c)), self.out_w), self.out_b)
        return VisualTokens(tokens=x, source=SOURCE_TAGS[self.kind])

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (kern, bias) in enumerate(zip(self.kernels, self.biases)):
            params[f"conv{i}.k"] = kern
            params[f"conv{i}.b"] = bias
        params["out.w"] = self.out_w
        params["out.b"] = self.out_b
        return params


def _bin_layout(count: int) -> tuple[int, int]:
    bh = int(math.isqrt(count))
    while count % bh != 0:
        bh -= 1
    return bh, count // bh


class ComProjector:
    """Per-frame token compression over the full (unsampled) frame set.

    Context tokens: learned query slots, shifted additively by a projection
    of the instruction summary, attend over the frame's patch features.
    Content tokens: the patch grid averaged into a fixed number of spatial
    bins and mapped linearly.  A learned separator closes every group of
    ``sep_period`` frames.
    """

    kind = "com"

    def __init__(self, cfg: Config, rng: Rng):
        d_in = cfg["encoder.dim"]
        d_text = cfg["text.dim"]
        d_out = cfg["model.dim"]
        self.n_context = cfg["com.context"]
        self.n_content = cfg["com.content"]
        self.sep_period = cfg["com.sep_period"]
        self.d_in = d_in
        self.d_out = d_out
        if self.n_context > 0:
            self.query = Tensor(rng.normal((self.n_context, d_in), std=0.1),
                                requires_grad=True)
            self.cls_w, self.cls_b = linear_params(rng, d_text, d_in)
            self.ctx_w, self.ctx_b = linear_params(rng, d_in, d_out)
        if self.n_content > 0:
            self.bins = _bin_layout(self.n_content)
            self.cnt_w, self.cnt_b = linear_params(rng, d_in, d_out)
        self.sep = (Tensor(rng.normal((d_out,), std=0.1), requires_grad=True)
                    if self.sep_period > 0 else None)

    def __call__(self, f_all: FrameFeatures, instr: InstructionEncoding) -> VisualTokens:
        x = f_all.features
        b, t, h, w, d = x.shape
        parts = []
        if self.n_context > 0:
            flat = reshape(x, (b, t, h * w, d))
            q = add(reshape(add(matmul(instr.cls, self.cls_w), self.cls_b),
                            (b, 1, 1, d)),
                    self.query)  # (B, 1, n_ctx, D)
            scores = matmul(q, transpose(flat, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
            ctx = matmul(softmax(scores, axis=-1), flat)  # (B, T, n_ctx, D)
            parts.append(add(matmul(ctx, self.ctx_w), self.ctx_b))
        if self.n_content > 0:
            pooled = pool_bins(x, self.bins[0], self.bins[1])
            pooled = reshape(pooled, (b, t, self.n_content, d))
            parts.append(add(matmul(pooled, self.cnt_w), self.cnt_b))
        per_frame = parts[0] if len(parts) == 1 else concat(parts, axis=2)
        c = per_frame.shape[2]
        if self.sep is not None:
            m = self.sep_period
            grouped = reshape(per_frame, (b, t // m, m * c, self.d_out))
            sep = broadcast_to(reshape(self.sep, (1, 1, 1, self.d_out)),
                               (b, t // m, 1, self.d_out))
            tokens = reshape(concat([grouped, sep], axis=2),
                             (b, (t // m) * (m * c + 1), self.d_out))
        else:
            tokens = reshape(per_frame, (b, t * c, self.d_out))
        return VisualTokens(tokens=tokens, source=SOURCE_TAGS[self.kind])

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if self.n_context > 0:
            params.update({"query": self.query, "cls_proj.w": self.cls_w,
                           "cls_proj.b": self.cls_b, "ctx_out.w": self.ctx_w,
                           "ctx_out.b": self.ctx_b})
        if self.n_content > 0:
            params.update({"cnt_out.w": self.cnt_w, "cnt_out.b": self.cnt_b})
        if self.sep is not None:
            params["sep"] = self.sep
        return params


PROJECTOR_CLASSES = {"image": ImageProjector, "stc": StcProjector, "com": ComProjector}


def build_projector(kind: str, cfg: Config, rng: Rng):
    return PROJECTOR_CLASSES[kind](cfg, rng)
