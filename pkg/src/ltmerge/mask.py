"""Token-merging masks: sizing, initial masks, the IB-driven update, merging.

A mask ``G`` has shape (N, P) per sample (batched: (B, N, P)).  Column p
holds the convex weights that average the N attention-output tokens into
merged token p, so merging is ``G^T Z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ib
from . import numerics as nx
from .numerics import Tensor


class MaskError(ValueError):
    pass


def _check_ratio(r: float):
    if not (0.0 < r <= 1.0):
        raise MaskError(f"compression ratio must lie in (0, 1], got {r}")


def merged_count(N: int, r: float) -> int:
    """P = ceil(r * N)."""
    _check_ratio(r)
    if N < 1:
        raise MaskError("token count must be positive")
    # round before ceil so 0.33 * 12 style products do not creep past an integer
    return max(1, min(N, math.ceil(round(r * N, 9))))


def grid_dims(H: int, W: int, r: float) -> tuple[int, int]:
    """Merged grid (ceil(H sqrt r), ceil(W sqrt r)) for spatial blocks."""
    _check_ratio(r)
    if H < 1 or W < 1:
        raise MaskError("grid dimensions must be positive")
    s = math.sqrt(r)
    return max(1, math.ceil(round(H * s, 9))), max(1, math.ceil(round(W * s, 9)))


@dataclass
class MaskModuleParams:
    """Learnable parts of one block's mask module.

    ``f_w``/``f_b`` produce the initial mask (absent for blocks that chain
    the previous block's mask).  ``mlp`` is the two-layer ReLU network
    applied to Z before the update step; ``None`` stands for the identity.
    """

    f_w: Tensor | None = None
    f_b: Tensor | None = None
    mlp: tuple | None = None  # (w1, b1, w2, b2)
    tau: float = 0.5
    eta: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise MaskError("tau must be positive")
        if self.eta < 0:
            raise MaskError("eta must be non-negative")


def normalize_mask(G_raw) -> Tensor:
    """Softmax over the token axis so every column is a convex weight vector."""
    G_raw = G_raw if isinstance(G_raw, Tensor) else Tensor(G_raw)
    return nx.softmax(G_raw, axis=-2)


def init_mask(x: Tensor, params: MaskModuleParams) -> Tensor:
    """G = softmax_N(sigmoid(f(x / tau))) for tokens x of shape (..., N, D)."""
    if params.f_w is None:
        raise MaskError("this block has no initial-mask layer")
    h = nx.matmul(x * (1.0 / params.tau), params.f_w) + params.f_b
    return normalize_mask(nx.sigmoid(h))


def merge_tokens(Z, G) -> Tensor:
    """X~ = G^T Z: (..., N, D) tokens into (..., P, D) merged tokens."""
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    G = G if isinstance(G, Tensor) else Tensor(G, dtype=Z.dtype)
    if G.shape[-2] != Z.shape[-2]:
        raise MaskError(f"mask has {G.shape[-2]} token rows but Z has {Z.shape[-2]} tokens")
    return nx.matmul(nx.transpose(G), Z)


def mask_mlp(Z: Tensor, mlp) -> Tensor:
    """Residual two-layer MLP; with a zero second layer it is the identity."""
    if mlp is None:
        return Z
    w1, b1, w2, b2 = mlp
    return Z + nx.matmul(nx.relu(nx.matmul(Z, w1) + b1), w2) + b2


def update_direction(G_prev, Z, state: ib.ClusterState, phi_x, labels=None) -> np.ndarray:
    """Per-sample (B, P, D) weights of the IBB descent step, held constant.

    Computed from the detached mask and tokens with the frozen cluster
    state.  Without labels the label term of psi is averaged under the
    stored class prior.
    """
    if state is None:
        raise MaskError("mask update needs a ClusterState")
    G_arr = np.asarray(G_prev.data if isinstance(G_prev, Tensor) else G_prev, dtype=np.float64)
    Z_arr = np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=np.float64)
    B, N, D = Z_arr.shape
    if G_arr.shape[-2] != N:
        raise MaskError(f"mask shape {G_arr.shape} does not match {N} tokens")
    P = G_arr.shape[-1]
    if state.merged_centroids.shape[1] != P * D:
        raise MaskError(f"cluster state lives in dimension {state.merged_centroids.shape[1]}, "
                        f"merged tokens have {P * D}")
    merged = ib.merge_batch(G_arr, Z_arr).reshape(B, -1)
    if labels is None:
        psi_mat = ib.psi_prior(phi_x, state.prior, state.Q)
    else:
        psi_mat = ib.psi(phi_x, labels, state.Q)
    return ib.mask_direction(merged, state.merged_centroids, psi_mat).reshape(B, P, D)


def update_mask(G_prev, Z, state: ib.ClusterState, labels, params: MaskModuleParams, *,
                phi_x, coupling: str = "batch", normalize: bool = True) -> Tensor:
    """One IBB gradient step on the mask with MLP(Z) in place of Z, then softmax.

    G = G_prev - (2 eta / n) sum_i MLP(Z_i) M_i^T, with M_i from
    :func:`update_direction`.  ``coupling="batch"`` sums the step over the
    minibatch (n = batch size) and applies it to every sample;
    ``coupling="sample"`` gives each sample its own step (n = 1).
    ``labels=None`` selects the label-free psi used at inference.
    """
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    G_prev = G_prev if isinstance(G_prev, Tensor) else Tensor(G_prev, dtype=Z.dtype)
    if Z.ndim != 3:
        raise MaskError("Z must be (B, N, D)")
    B = Z.shape[0]
    if phi_x is None or len(phi_x) != B:
        raise MaskError("input assignments must cover the batch")
    M = Tensor(update_direction(G_prev, Z, state, phi_x, labels).astype(Z.dtype))
    step = nx.matmul(mask_mlp(Z, params.mlp), nx.transpose(M))  # (B, N, P)
    if coupling == "batch":
        step = nx.sum(step, axis=0, keepdims=True) * (2.0 * params.eta / B)
        if G_prev.ndim == 2:
            step = nx.reshape(step, step.shape[1:])
    elif coupling == "sample":
        step = step * (2.0 * params.eta)
    else:
        raise MaskError(f"unknown coupling {coupling!r}")
    raw = G_prev - step
    return normalize_mask(raw) if normalize else raw


def column_sums_ok(G, tol: float = 1e-6) -> bool:
    g = np.asarray(G.data if isinstance(G, Tensor) else G)
    return bool((g >= 0).all() and np.allclose(g.sum(axis=-2), 1.0, atol=tol))
