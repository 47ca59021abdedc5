"""Task heads: sequence classification, step-wise prediction, pair similarity.

Losses are summed over the batch (rows).
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray, ParamSet

PROB_FLOOR = 1e-12


class DataError(ValueError):
    """Labels or masks inconsistent with the head."""


def init_head_params(ps: ParamSet, kind: str, rep_dim: int, num_classes: int,
                     rng: np.random.Generator, pair_mode: str = "concat_product") -> None:
    bound = 1.0 / math.sqrt(rep_dim)
    if kind in ("cls", "step"):
        ps.add(f"{kind}.W", rng.uniform(-bound, bound, (num_classes, rep_dim)))
        ps.add(f"{kind}.b", np.zeros((1, num_classes)))
    elif kind == "sim":
        width = pair_width(rep_dim, pair_mode)
        ps.add("sim.v", rng.uniform(-bound, bound, (1, width)))
        ps.add("sim.b", np.zeros((1, 1)))
    else:
        raise ValueError(f"unknown head kind {kind!r}")


def pair_width(rep_dim: int, pair_mode: str) -> int:
    return {"concat": 2, "concat_product": 3}[pair_mode] * rep_dim


def logits(r: DiffArray, W: DiffArray, b: DiffArray) -> DiffArray:
    return dc.add(dc.matmul(r, dc.transpose(W)), b)


def _labels(labels, n: int, K: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise DataError(f"label outside [0, {K})")
    return y


def classification_loss(r: DiffArray, labels, W: DiffArray, b: DiffArray) -> DiffArray:
    """Summed negative log-likelihood of ``labels`` under softmax(r W^T + b)."""
    r = dc.constant(r)
    y = _labels(labels, r.rows, W.rows)
    lp = dc.log_softmax_rows(logits(r, W, b))
    return -dc.sum_all(dc.pick(lp, y))


def stepwise_loss(reps, labels, W: DiffArray, b: DiffArray, mask=None) -> DiffArray:
    """Sum over unmasked steps of -log P(y_t | r_t).

    ``reps`` is a list of per-step ``[B x rep]`` arrays or one ``[T x rep]``
    array (a single sequence).  ``labels``/``mask`` are ``[B, T]`` (or ``[T]``).
    """
    if isinstance(reps, DiffArray):
        reps = [dc.take_rows(reps, [t]) for t in range(reps.rows)]
    T, B = len(reps), reps[0].rows
    y = np.asarray(labels, dtype=np.intp).reshape(B, T)
    mk = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=float).reshape(B, T)
    if not mk.any():
        raise DataError("every step is masked; the loss is undefined")
    # step-major stacking: row t*B + b
    stacked = dc.concat_rows(reps) if T > 1 else reps[0]
    flat_y = y.T.reshape(-1)
    flat_m = mk.T.reshape(-1, 1)
    flat_y = np.where(flat_m[:, 0] > 0, flat_y, 0)
    flat_y = _labels(flat_y, T * B, W.rows)
    lp = dc.pick(dc.log_softmax_rows(logits(stacked, W, b)), flat_y)
    return -dc.sum_all(lp * dc.constant(flat_m.astype(dc.get_dtype())))


def pair_features(r1: DiffArray, r2: DiffArray, pair_mode: str = "concat") -> DiffArray:
    parts = [r1, r2]
    if pair_mode == "concat_product":
        parts.append(r1 * r2)
    return dc.concat_cols(parts)


def similarity_score(r1, r2, v: DiffArray, b: DiffArray, pair_mode: str = "concat") -> DiffArray:
    feats = pair_features(dc.constant(r1), dc.constant(r2), pair_mode)
    if feats.cols != v.cols:
        raise dc.DimensionError(f"pair features {feats.cols} wide, v is {v.shape}")
    return dc.add(dc.matmul(feats, dc.transpose(v)), b)


def similarity_loss(r1, r2, labels, v: DiffArray, b: DiffArray, pair_mode: str = "concat"):
    """Binary cross-entropy of sigmoid(v . features(r1, r2) + b).

    Returns ``(probabilities [B x 1], summed loss)``.
    """
    p = dc.sigmoid(similarity_score(r1, r2, v, b, pair_mode))
    y = np.asarray(labels, dtype=float).reshape(-1, 1)
    if y.shape[0] != p.rows or not np.isin(y, (0.0, 1.0)).all():
        raise DataError("similarity labels must be 0/1, one per pair")
    y = y.astype(dc.get_dtype())
    pos = dc.log(dc.clip(p, PROB_FLOOR, 1.0))
    negl = dc.log(dc.clip(1.0 - p, PROB_FLOOR, 1.0))
    loss = -dc.sum_all(pos * dc.constant(y) + negl * dc.constant(1.0 - y))
    return p, loss


def class_probabilities(r, W, b) -> np.ndarray:
    with dc.no_grad():
        return dc.softmax_rows(logits(dc.constant(r), W, b)).value
