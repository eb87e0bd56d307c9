"""Scaled dot-product attention, multi-head composition and masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class AttentionHeadParams:
    Wq: Tensor  # n x d
    Wk: Tensor
    Wv: Tensor

    def __post_init__(self):
        shapes = {self.Wq.shape, self.Wk.shape, self.Wv.shape}
        if len(shapes) != 1 or self.Wq.ndim != 2:
            raise ShapeError(f"query/key/value weights disagree: {sorted(shapes)}")

    @property
    def head_dim(self) -> int:
        return self.Wq.shape[0]

    @property
    def model_dim(self) -> int:
        return self.Wq.shape[1]


@dataclass
class MultiHeadParams:
    heads: list[AttentionHeadParams]
    Wc: Tensor  # d x (L*n)

    def __post_init__(self):
        if not self.heads:
            raise ValueError("multi-head attention needs at least one head")
        n, d = self.heads[0].head_dim, self.heads[0].model_dim
        for h in self.heads[1:]:
            if (h.head_dim, h.model_dim) != (n, d):
                raise ShapeError("all heads must share head and model dimensions")
        if self.Wc.shape != (d, len(self.heads) * n):
            raise ShapeError(f"Wc must be ({d}, {len(self.heads) * n}), got {self.Wc.shape}")

    @property
    def num_heads(self) -> int:
        return len(self.heads)


def causal_mask(T: int) -> np.ndarray:
    """Boolean T x T mask, True where query i may attend key j (j <= i)."""
    if T < 1:
        raise ValueError("causal mask needs T >= 1")
    return np.tril(np.ones((T, T), dtype=bool))


def key_padding_mask(lengths: Sequence[int], T: int) -> np.ndarray:
    """(B, 1, T) mask that hides padded key frames beyond each sequence length."""
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None])[:, None, :]


def combine_masks(*masks) -> np.ndarray | None:
    present = [np.asarray(m, dtype=bool) for m in masks if m is not None]
    if not present:
        return None
    out = present[0]
    for m in present[1:]:
        out = out & m
    return out


def project_qkv(y, head: AttentionHeadParams, context=None) -> tuple[Tensor, Tensor, Tensor]:
    """Q from ``y``; K and V from ``context`` when given, else from ``y``."""
    y = nx.as_tensor(y)
    src = y if context is None else nx.as_tensor(context)
    d = head.model_dim
    if y.shape[-1] != d or src.shape[-1] != d:
        raise ShapeError(f"projection expects last dim {d}, got {y.shape} and {src.shape}")
    Q = nx.matmul(y, nx.transpose(head.Wq))
    K = nx.matmul(src, nx.transpose(head.Wk))
    V = nx.matmul(src, nx.transpose(head.Wv))
    return Q, K, V


def scaled_attention(Q, K, V, mask=None) -> tuple[Tensor, Tensor]:
    """softmax_j(q_i . k_j / sqrt(n)) weighted sum of value rows.

    Leading axes are batch axes. Returns the output and the weight matrix.
    """
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    n = Q.shape[-1]
    if K.shape[-1] != n or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention shapes inconsistent: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(n))
    alpha = nx.softmax(scores, axis=-1, mask=mask)
    return nx.matmul(alpha, V), alpha


def multi_head(y, mh: MultiHeadParams, context=None, mask=None,
               trace: dict | None = None, prefix: str = "") -> Tensor:
    """Multi-head attention of ``y`` (..., T, d) over itself or over ``context``.

    The L per-head projections run as one batched product over a stacked
    head axis; the outputs are concatenated in head order and mixed by Wc.
    """
    y = nx.as_tensor(y)
    src = y if context is None else nx.as_tensor(context)
    L = mh.num_heads
    n, d = mh.heads[0].head_dim, mh.heads[0].model_dim
    if y.shape[-1] != d or src.shape[-1] != d:
        raise ShapeError(f"multi_head expects last dim {d}, got {y.shape} and {src.shape}")
    # (L, d, n) stacks of transposed projection matrices
    wq = nx.transpose(nx.stack([h.Wq for h in mh.heads]))
    wk = nx.transpose(nx.stack([h.Wk for h in mh.heads]))
    wv = nx.transpose(nx.stack([h.Wv for h in mh.heads]))
    yh = nx.reshape(y, y.shape[:-2] + (1,) + y.shape[-2:])
    sh = yh if context is None else nx.reshape(src, src.shape[:-2] + (1,) + src.shape[-2:])
    Q, K, V = nx.matmul(yh, wq), nx.matmul(sh, wk), nx.matmul(sh, wv)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        # insert the head axis in front of (Tq, Tk)
        mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:]) if mask.ndim >= 3 else mask
    out, alpha = scaled_attention(Q, K, V, mask)
    if trace is not None:
        trace[prefix + "q"] = Q.data
        trace[prefix + "k"] = K.data
        trace[prefix + "v"] = V.data
        trace[prefix + "alpha"] = alpha.data
    # (..., L, T, n) -> (..., T, L, n) -> (..., T, L*n)
    nd = out.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    cat = nx.reshape(nx.transpose(out, perm), out.shape[:-3] + (out.shape[-2], L * n))
    return nx.matmul(cat, nx.transpose(mh.Wc))


def write_attention_csv(weights: np.ndarray, path: str | Path) -> None:
    """One row per query frame, one column per key frame."""
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise ShapeError(f"expected a 2-D weight matrix, got {weights.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query"] + [f"k{j}" for j in range(weights.shape[1])])
        for i, row in enumerate(weights):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_attention_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])
