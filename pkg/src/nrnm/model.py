"""Parameter construction and task-level forward passes."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .backbone import init_backbone_params, run_batch
from .config import ConfigError, ModelConfig
from .data import SequenceBatch
from .diffcore import DiffArray, ParamSet
from .heads import (classification_loss, init_head_params, logits, similarity_loss,
                    similarity_score, stepwise_loss)

HEAD_FOR_TASK = {"copy": "cls", "lag_label": "step", "pair_sim": "sim"}


def build_params(cfg: ModelConfig, heads: tuple[str, ...] | None = None) -> ParamSet:
    """Deterministic initial parameters for ``cfg`` (seeded by ``cfg.seed``)."""
    dc.set_precision(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    ps = ParamSet()
    init_backbone_params(ps, cfg, rng)
    for kind in heads or (HEAD_FOR_TASK[cfg.task],):
        init_head_params(ps, kind, cfg.rep_dim, cfg.num_classes, rng, cfg.pair_mode)
    return ps


def last_step(reps: list[DiffArray], lengths: np.ndarray) -> DiffArray:
    """Representation at each sequence's final valid step -> [B x rep]."""
    T, B = len(reps), reps[0].rows
    lengths = np.asarray(lengths)
    if (lengths == T).all():
        return reps[-1]
    return dc.take_rows(dc.concat_rows(reps), (lengths - 1) * B + np.arange(B))


def encode(ps, cfg: ModelConfig, data: SequenceBatch, idx, training=False, rng=None,
           second: bool = False):
    x, lens = data.padded(idx, second=second)
    return run_batch(x, ps, cfg, lens, training, rng), lens


def _check_task(cfg: ModelConfig, data: SequenceBatch) -> None:
    if data.task != cfg.task:
        raise ConfigError(f"data task {data.task!r} does not match model task {cfg.task!r}")


def batch_loss(ps, cfg: ModelConfig, data: SequenceBatch, idx, training=False, rng=None
               ) -> DiffArray:
    """Summed task loss over the sequences (or pairs) ``idx``."""
    _check_task(cfg, data)
    idx = list(idx)
    if cfg.task == "copy":
        out, lens = encode(ps, cfg, data, idx, training, rng)
        y = np.array([data.labels[i] for i in idx])
        return classification_loss(last_step(out.reps, lens), y, ps["cls.W"], ps["cls.b"])
    if cfg.task == "lag_label":
        out, _ = encode(ps, cfg, data, idx, training, rng)
        y, m = data.step_targets(idx)
        return stepwise_loss(out.reps, y, ps["step.W"], ps["step.b"], m)
    r1, r2 = pair_reps(ps, cfg, data, idx, training, rng)
    y = np.array([data.labels[i] for i in idx])
    _, loss = similarity_loss(r1, r2, y, ps["sim.v"], ps["sim.b"], cfg.pair_mode)
    return loss


def pair_reps(ps, cfg, data: SequenceBatch, idx, training=False, rng=None):
    """Siamese encoding: both sides share parameters and run as one batch."""
    x1, l1 = data.padded(idx)
    x2, l2 = data.padded(idx, second=True)
    T = max(x1.shape[1], x2.shape[1])
    X = np.zeros((2 * len(idx), T, x1.shape[2]))
    X[:len(idx), :x1.shape[1]] = x1
    X[len(idx):, :x2.shape[1]] = x2
    lens = np.concatenate([l1, l2])
    out = run_batch(X, ps, cfg, lens, training, rng)
    r = last_step(out.reps, lens)
    B = len(idx)
    return dc.take_rows(r, np.arange(B)), dc.take_rows(r, np.arange(B, 2 * B))


def predict(ps, cfg: ModelConfig, data: SequenceBatch, idx):
    """Evaluation-mode outputs for ``idx``.

    copy: class log-probabilities ``[B, K]``; lag_label: per-step
    log-probabilities ``[B, T, K]``; pair_sim: similarity scores ``[B]``
    (pre-sigmoid).
    """
    _check_task(cfg, data)
    idx = list(idx)
    with dc.no_grad():
        if cfg.task == "pair_sim":
            r1, r2 = pair_reps(ps, cfg, data, idx)
            return similarity_score(r1, r2, ps["sim.v"], ps["sim.b"], cfg.pair_mode).value[:, 0]
        out, lens = encode(ps, cfg, data, idx)
        if cfg.task == "copy":
            z = logits(last_step(out.reps, lens), ps["cls.W"], ps["cls.b"])
            return dc.log_softmax_rows(z).value
        steps = [dc.log_softmax_rows(logits(r, ps["step.W"], ps["step.b"])).value
                 for r in out.reps]
        return np.stack(steps, axis=1)


ALL_HEADS = ("cls", "step", "sim")


def verification_loss(ps, cfg: ModelConfig, T: int = 12, batch: int = 2, seed: int = 0):
    """Deterministic loss touching every parameter group and all three heads.

    Random inputs and labels; the pair head sees the first half of the batch
    against the second half.  Evaluation mode (no dropout/zoneout).
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2 * batch, T, cfg.input_dim))
    y_seq = rng.integers(0, cfg.num_classes, size=2 * batch)
    y_step = rng.integers(0, cfg.num_classes, size=(2 * batch, T))
    y_pair = np.arange(batch) % 2

    def loss(p):
        out = run_batch(x, p, cfg)
        r = out.reps[-1]
        total = classification_loss(r, y_seq, p["cls.W"], p["cls.b"])
        total = total + stepwise_loss(out.reps, y_step, p["step.W"], p["step.b"])
        r1 = dc.take_rows(r, np.arange(batch))
        r2 = dc.take_rows(r, np.arange(batch, 2 * batch))
        _, pl = similarity_loss(r1, r2, y_pair, p["sim.v"], p["sim.b"], cfg.pair_mode)
        return total + pl

    return loss


def gradient_check(cfg: ModelConfig, sample: int = 200, T: int = 12, seed: int = 0,
                   h: float = 1e-5) -> float:
    """Max relative finite-difference error over ``sample`` coordinates of the full model."""
    cfg = cfg.replace(dropout=0.0, zoneout=0.0, precision=64)
    ps = build_params(cfg, heads=ALL_HEADS)
    return dc.finite_diff_check(verification_loss(ps, cfg, T=T, seed=seed), ps, h=h,
                                sample=min(sample, ps.size()), seed=seed)
