"""Desk-scale vision transformer with learnable token merging blocks.

Two block styles are supported.  A *regular* block is pre-norm attention
followed by an MLP; when it merges, the attention output is averaged into
fewer tokens and only the MLP residual survives.  An *efficient* block keeps
tokens on an (H, W) grid, merges the block input and the attention output
with the same mask, concatenates them along channels and fuses back to D
channels with a per-token linear layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ib
from . import numerics as nx
from .mask import MaskModuleParams, grid_dims, init_mask, merge_tokens, merged_count, update_mask
from .numerics import Tensor

STYLES = ("regular", "efficient")


class ModelError(ValueError):
    pass


@dataclass
class TokenBatch:
    tokens: Tensor  # (B, N, D)
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.tokens.ndim != 3 or min(self.tokens.shape[1:]) < 1:
            raise ModelError(f"tokens must be (B, N, D) with N, D >= 1, got {self.tokens.shape}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.tokens.shape[1]:
            raise ModelError(f"grid {self.grid} does not hold {self.tokens.shape[1]} tokens")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ModelSpec:
    image_size: int = 16
    in_channels: int = 1
    patch: int = 4
    dim: int = 32
    heads: int = 1
    mlp_ratio: int = 2
    num_classes: int = 3
    styles: tuple = ("regular", "regular")
    ratios: tuple = (0.5, 0.5)
    tau: float = 0.5
    eta: float = 1.0

    def __post_init__(self):
        self.styles = tuple(self.styles)
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.styles) != len(self.ratios) or not self.styles:
            raise ModelError("styles and ratios must give one entry per block")
        for s in self.styles:
            if s not in STYLES:
                raise ModelError(f"unknown block style {s!r}")
        for r in self.ratios:
            if not 0 < r <= 1:
                raise ModelError(f"compression ratio {r} outside (0, 1]")
        if self.dim % self.heads:
            raise ModelError("heads must divide dim")
        if self.image_size % self.patch:
            raise ModelError("patch size must divide the image size")
        if self.tau <= 0:
            raise ModelError("tau must be positive")

    @classmethod
    def build(cls, depth: int = 2, ratio=0.5, style="regular", **kw) -> "ModelSpec":
        ratios = [ratio] * depth if np.isscalar(ratio) else list(ratio)
        styles = [style] * depth if isinstance(style, str) else list(style)
        return cls(styles=tuple(styles), ratios=tuple(ratios), **kw)

    @property
    def depth(self) -> int:
        return len(self.styles)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = list(self.styles)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "depth" in d or "ratio" in d or "style" in d:
            depth = d.pop("depth", 2)
            return cls.build(depth, d.pop("ratio", 0.5), d.pop("style", "regular"), **d)
        return cls(**d)

    def plan(self) -> list["BlockPlan"]:
        return plan_blocks(self)


@dataclass
class BlockPlan:
    index: int
    style: str
    ratio: float
    n_in: int
    n_out: int
    grid_in: tuple | None
    grid_out: tuple | None
    merges: bool
    stage: int
    stage_first: bool  # owns an initial-mask layer
    chained_update: bool  # applies the IBB update step


def plan_blocks(spec: ModelSpec) -> list[BlockPlan]:
    """Token bookkeeping, stage assignment and mask-module layout per block."""
    plans = []
    n, grid = spec.n_tokens, spec.grid
    prev_key = None
    seen_merge = False
    stage = -1
    for i, (style, r) in enumerate(zip(spec.styles, spec.ratios)):
        merges = r < 1.0
        if style == "efficient":
            if grid is None:
                raise ModelError(f"block {i} is efficient but its input has no grid")
            grid_out = grid_dims(*grid, r) if merges else grid
            p = grid_out[0] * grid_out[1]
        else:
            p = merged_count(n, r) if merges else n
            grid_out = grid if p == n else None
        key = (n, p, merges)
        if key != prev_key:
            stage += 1
        plans.append(BlockPlan(i, style, r, n, p, grid, grid_out, merges, stage,
                               stage_first=merges and key != prev_key,
                               chained_update=merges and seen_merge))
        seen_merge = seen_merge or merges
        prev_key = key
        n, grid = p, grid_out
    return plans


# ------------------------------------------------------------------ params


def _linear(rng, fan_in, fan_out, dtype):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)


def init_params(spec: ModelSpec, seed: int, dtype="f32") -> dict[str, Tensor]:
    """Named leaf tensors in a fixed order."""
    dt = nx.as_dtype(dtype)
    rng = nx.make_rng(seed, 0)
    D, H = spec.dim, spec.hidden
    pdim = spec.patch * spec.patch * spec.in_channels
    arrays: dict[str, np.ndarray] = {}
    arrays["embed.w"] = _linear(rng, pdim, D, dt)
    arrays["embed.b"] = np.zeros(D, dt)
    arrays["embed.pos"] = rng.normal(0.0, 0.02, size=(spec.n_tokens, D)).astype(dt)
    for plan in spec.plan():
        k = f"b{plan.index}."
        arrays[k + "ln1.g"] = np.ones(D, dt)
        arrays[k + "ln1.b"] = np.zeros(D, dt)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[k + name] = _linear(rng, D, D, dt)
        if plan.style == "efficient":
            arrays[k + "fuse.w"] = _linear(rng, 2 * D, D, dt)
            arrays[k + "fuse.b"] = np.zeros(D, dt)
        arrays[k + "ln2.g"] = np.ones(D, dt)
        arrays[k + "ln2.b"] = np.zeros(D, dt)
        arrays[k + "mlp.w1"] = _linear(rng, D, H, dt)
        arrays[k + "mlp.b1"] = np.zeros(H, dt)
        arrays[k + "mlp.w2"] = _linear(rng, H, D, dt)
        arrays[k + "mlp.b2"] = np.zeros(D, dt)
        if plan.stage_first:
            arrays[k + "mask.f.w"] = _linear(rng, D, plan.n_out, dt)
            arrays[k + "mask.f.b"] = np.zeros(plan.n_out, dt)
        if plan.chained_update:
            arrays[k + "mask.mlp.w1"] = _linear(rng, D, D, dt)
            arrays[k + "mask.mlp.b1"] = np.zeros(D, dt)
            # zero so the residual MLP starts as the identity
            arrays[k + "mask.mlp.w2"] = np.zeros((D, D), dt)
            arrays[k + "mask.mlp.b2"] = np.zeros(D, dt)
    arrays["head.w"] = _linear(rng, D, spec.num_classes, dt)
    arrays["head.b"] = np.zeros(spec.num_classes, dt)
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


# -------------------------------------------------------------- operations


def attention(x: TokenBatch | Tensor, p: dict, heads: int = 1) -> Tensor:
    """softmax(Q K^T / sqrt(d_h)) V, projected by Wo; shape preserved."""
    t = x.tokens if isinstance(x, TokenBatch) else x
    B, N, D = t.shape
    if D % heads:
        raise ModelError("head count must divide the token dimension")
    dh = D // heads

    def split(w):
        return nx.transpose(nx.reshape(nx.matmul(t, w), (B, N, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(p["wq"]), split(p["wk"]), split(p["wv"])
    scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(dh))
    out = nx.matmul(nx.softmax(scores, axis=-1), v)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, N, D))
    return nx.matmul(out, p["wo"])


def _mlp(h: Tensor, p: dict) -> Tensor:
    return nx.matmul(nx.relu(nx.matmul(h, p["mlp.w1"]) + p["mlp.b1"]), p["mlp.w2"]) + p["mlp.b2"]


def _mlp_path(h: Tensor, p: dict) -> Tensor:
    return h + _mlp(nx.layer_norm(h, p["ln2.g"], p["ln2.b"]), p)


def regular_block_forward(x: TokenBatch, p: dict, mask: Tensor | None = None, heads: int = 1,
                          z: Tensor | None = None) -> TokenBatch:
    """Pre-norm block; with a mask the attention output is merged before the MLP."""
    if z is None:
        z = attention(nx.layer_norm(x.tokens, p["ln1.g"], p["ln1.b"]), p, heads)
    if mask is None:
        return TokenBatch(_mlp_path(x.tokens + z, p), x.grid)
    if mask.shape[-2] != x.n_tokens:
        raise ModelError(f"mask expects {mask.shape[-2]} tokens, block input has {x.n_tokens}")
    merged = merge_tokens(z, mask)
    P = merged.shape[1]
    return TokenBatch(_mlp_path(merged, p), x.grid if P == x.n_tokens else None)


def efficient_block_forward(x: TokenBatch, p: dict, mask: Tensor | None = None, heads: int = 1,
                            grid_out: tuple | None = None, z: Tensor | None = None) -> TokenBatch:
    """Merge X and Z with one mask, concatenate channels, fuse to D, then MLP."""
    if x.grid is None:
        raise ModelError("efficient blocks need a token grid")
    if z is None:
        z = attention(nx.layer_norm(x.tokens, p["ln1.g"], p["ln1.b"]), p, heads)
    xs, zs, grid = x.tokens, z, x.grid
    if mask is not None:
        if mask.shape[-2] != x.n_tokens:
            raise ModelError(f"mask expects {mask.shape[-2]} tokens, block input has {x.n_tokens}")
        P = mask.shape[-1]
        if grid_out is None:
            side = int(round(math.sqrt(P)))
            grid_out = (side, side)
        if grid_out[0] * grid_out[1] != P:
            raise ModelError(f"{P} merged tokens cannot be laid out as {grid_out}")
        xs, zs, grid = merge_tokens(xs, mask), merge_tokens(zs, mask), tuple(grid_out)
    fused = nx.matmul(nx.concat([xs, zs], axis=-1), p["fuse.w"]) + p["fuse.b"]
    return TokenBatch(_mlp_path(fused, p), grid)


def patch_embed(images, w: Tensor, b: Tensor, patch: int, pos: Tensor | None = None) -> TokenBatch:
    """Flatten non-overlapping patches of (B, H, W, C) images and project to D."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[..., None]
    B, H, W, C = arr.shape
    if H % patch or W % patch:
        raise ModelError(f"patch {patch} does not divide image {H}x{W}")
    gh, gw = H // patch, W // patch
    flat = (arr.reshape(B, gh, patch, gw, patch, C)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(B, gh * gw, patch * patch * C)).astype(w.dtype)
    tokens = nx.matmul(Tensor(flat), w) + b
    if pos is not None:
        tokens = tokens + pos
    return TokenBatch(tokens, (gh, gw))


def classify_head(x: TokenBatch | Tensor, w: Tensor, b: Tensor) -> Tensor:
    t = x.tokens if isinstance(x, TokenBatch) else x
    return nx.matmul(nx.mean(t, axis=1), w) + b


# ------------------------------------------------------------------- model


@dataclass
class MaskInputs:
    """What the mask modules need beyond the tokens themselves."""

    states: Sequence  # per-block ClusterState or None
    phi_x: np.ndarray | None = None  # (B, C) input-cluster assignments
    labels: np.ndarray | None = None  # None selects the label-free psi
    coupling: str = "batch"


@dataclass
class BlockTrace:
    mask: Tensor | None
    z: Tensor
    rep: np.ndarray  # detached X~ (merged tokens, or Z when not merging), float64
    out: TokenBatch


@dataclass
class LTMNet:
    spec: ModelSpec
    params: dict = field(repr=False)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0, dtype="f32") -> "LTMNet":
        return cls(spec, init_params(spec, seed, dtype))

    def block_params(self, i: int) -> dict:
        k = f"b{i}."
        return {name[len(k):]: t for name, t in self.params.items() if name.startswith(k)}

    def mask_params(self, i: int) -> MaskModuleParams:
        p = self.block_params(i)
        mlp = None
        if "mask.mlp.w1" in p:
            mlp = (p["mask.mlp.w1"], p["mask.mlp.b1"], p["mask.mlp.w2"], p["mask.mlp.b2"])
        return MaskModuleParams(p.get("mask.f.w"), p.get("mask.f.b"), mlp,
                                tau=self.spec.tau, eta=self.spec.eta)

    def forward(self, images, merge: bool = True, ctx: MaskInputs | None = None,
                trace: bool = False):
        """Logits for a batch, plus per-block traces when ``trace`` is set.

        ``merge=False`` bypasses every mask module (warm-up / baseline).
        Blocks after the first merging block apply the IBB update step when
        ``ctx`` provides their ClusterState.
        """
        spec = self.spec
        x = patch_embed(images, self.params["embed.w"], self.params["embed.b"], spec.patch,
                        self.params["embed.pos"])
        traces = []
        G_prev = None
        for plan in spec.plan():
            p = self.block_params(plan.index)
            z = attention(nx.layer_norm(x.tokens, p["ln1.g"], p["ln1.b"]), p, spec.heads)
            G = None
            if merge and plan.merges:
                mp = self.mask_params(plan.index)
                G = init_mask(x.tokens, mp) if plan.stage_first else G_prev
                state = ctx.states[plan.index] if ctx is not None else None
                if plan.chained_update and state is not None:
                    G = update_mask(G, z, state, ctx.labels, mp, phi_x=ctx.phi_x,
                                    coupling=ctx.coupling)
            if plan.style == "efficient":
                out = efficient_block_forward(x, p, G, spec.heads, plan.grid_out, z=z)
            else:
                out = regular_block_forward(x, p, G, spec.heads, z=z)
            expected = plan.n_out if G is not None else x.n_tokens
            if out.n_tokens != expected:
                raise ModelError(f"block {plan.index} emitted {out.n_tokens} tokens, expected {expected}")
            if trace:
                rep = ib.merge_batch(G.data, z.data) if G is not None else z.data.astype(np.float64)
                traces.append(BlockTrace(G, z, rep, out))
            G_prev = G
            x = out
        logits = classify_head(x, self.params["head.w"], self.params["head.b"])
        return (logits, traces) if trace else logits
