"""Classification loss and the CAM-indexed feature contrast losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Value, bce_with_logits, where

SIM_FLOOR = 1e-6
EPSILON = 0.7


def _val(x):
    return x if isinstance(x, Value) else Value(np.asarray(x, dtype=np.float64))


def cls_loss(logit, label):
    """Binary cross-entropy of sigmoid(logit) against a 0/1 label (mean over a batch)."""
    return bce_with_logits(logit, label).mean()


@dataclass
class FeaturePartition:
    fg: Value  # m x d
    bg: Value  # n x d
    fg_index: np.ndarray  # m x 2 (row, col) at F4 resolution
    bg_index: np.ndarray

    @property
    def m(self):
        return len(self.fg_index)

    @property
    def n(self):
        return len(self.bg_index)


def partition_features(F4, cam, eps=EPSILON) -> FeaturePartition:
    """Split F4 locations by the normalised CAM: ``cam >= eps`` is foreground.

    The indices carry no gradient; the gathered features do.
    """
    F4 = _val(F4)
    cam = np.asarray(cam, dtype=np.float64)
    if F4.ndim != 3 or cam.shape != F4.shape[:2]:
        raise ValueError(f"CAM shape {cam.shape} does not match F4 spatial dims {F4.shape[:2]}")
    fg_mask = cam >= eps
    fg_idx = np.argwhere(fg_mask)
    bg_idx = np.argwhere(~fg_mask)
    return FeaturePartition(F4[fg_idx[:, 0], fg_idx[:, 1]], F4[bg_idx[:, 0], bg_idx[:, 1]], fg_idx, bg_idx)


def _unit_rows(F: Value) -> tuple[Value, np.ndarray]:
    norm2 = (F * F).sum(axis=1, keepdims=True)
    zero = norm2.data <= 0.0
    # zero-norm rows get similarity 0 with everything
    safe = where(zero, 1.0, norm2)
    return where(zero, 0.0, F / safe.sqrt()), zero


def cosine_sim(a, b):
    """Cosine similarity; defined as 0 if either vector has zero norm."""
    a = np.asarray(a.data if isinstance(a, Value) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Value) else b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(A: Value, B: Value) -> Value:
    ua, _ = _unit_rows(A)
    ub, _ = _unit_rows(B)
    return ua @ ub.T


def pos_loss(part: FeaturePartition) -> Value:
    """Mean of ``-log sim`` over all ordered foreground pairs; 0 when there is no foreground."""
    if part.m == 0:
        return Value(0.0)
    U, zero = _unit_rows(part.fg)
    S = U @ U.T
    # sim(f, f) is exactly 1 (gradient 0); pin it against rounding
    diag = np.eye(part.m, dtype=bool) & ~zero.reshape(-1)
    S = where(diag, 1.0, S)
    return -(S.clip(SIM_FLOOR, 1.0).log().mean())


def neg_loss(part: FeaturePartition) -> Value:
    """Mean of ``-log(1 - sim)`` over foreground x background pairs; 0 if either side is empty."""
    if part.m == 0 or part.n == 0:
        return Value(0.0)
    S = similarity_matrix(part.fg, part.bg)
    return -((1.0 - S).clip(SIM_FLOOR, 1.0).log().mean())


def total_loss(l_cls, l_pos, l_neg, contrast=True, use_pos=True, use_neg=True):
    """Unweighted sum; with ``contrast=False`` (warmup) only the classification term remains."""
    total = _val(l_cls)
    if contrast and use_pos:
        total = total + l_pos
    if contrast and use_neg:
        total = total + l_neg
    return total
