"""Optimisers, the training loop, evaluation metrics and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import diffcore as dc
from .config import ConfigError, ModelConfig
from .data import SequenceBatch
from .diffcore import Graph, ParamSet
from .heads import PROB_FLOOR
from .model import batch_loss, build_params, predict

log = logging.getLogger(__name__)

MAGIC = b"NRNMCKP1"
FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class NonFiniteGradientError(DivergenceError):
    pass


# optimisers -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteGradientError(f"gradient of {name!r} has {bad} non-finite entries")


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    _check_finite(grads)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise dc.DimensionError(f"gradient of {name!r} is {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def sgd_step(params: ParamSet, grads, state: AdamState, lr: float, momentum: float = 0.0
             ) -> AdamState:
    """Plain/momentum SGD; velocity kept in ``state.m``."""
    _check_finite(grads)
    state.t += 1
    for name, p in params.items():
        vel = state.m.setdefault(name, np.zeros_like(p.value))
        vel *= momentum
        vel += grads[name]
        p.value -= lr * vel
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# metrics --------------------------------------------------------------------

def accuracy(log_probs: np.ndarray, labels, mask=None) -> float:
    """Fraction of (unmasked) positions whose arg-max class equals the label."""
    pred = np.argmax(log_probs, axis=-1)
    labels = np.asarray(labels)
    hit = (pred == labels).astype(float)
    if mask is None:
        return float(hit.mean())
    mask = np.asarray(mask, dtype=float)
    return float((hit * mask).sum() / mask.sum())


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


class MetricsLog:
    """Append-only (step, split, metric, value) records."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(step), split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, sp, m, v in self.rows if sp == split and m == metric]

    def last(self, split: str, metric: str) -> float:
        return self.series(split, metric)[-1][1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "metric", "value"])
            for s, sp, m, v in self.rows:
                w.writerow([s, sp, m, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["step", "split", "metric", "value"]:
                raise ValueError(f"{path}: expected header step,split,metric,value")
            for row in reader:
                out.add(int(row["step"]), row["split"], row["metric"], float(row["value"]))
        return out


def evaluate_params(ps, cfg: ModelConfig, data: SequenceBatch, chunk: int = 250) -> dict:
    """Task metrics plus mean loss per sequence (or pair) on ``data``.

    One forward pass per chunk; the loss is recomputed from the evaluation
    outputs with the same formulas as the training losses.
    """
    if data.task != cfg.task:
        raise ConfigError(f"data task {data.task!r} does not match model task {cfg.task!r}")
    n = len(data)
    outs = [predict(ps, cfg, data, range(lo, min(n, lo + chunk))) for lo in range(0, n, chunk)]
    res = {}
    if cfg.task == "copy":
        lp, y = np.concatenate(outs), np.asarray(data.labels)
        res["loss"] = float(-lp[np.arange(n), y].sum() / n)
        res["accuracy"] = accuracy(lp, y)
    elif cfg.task == "lag_label":
        y, m = data.step_targets()
        Tm = y.shape[1]
        lp = np.concatenate([np.pad(o, ((0, 0), (0, Tm - o.shape[1]), (0, 0))) for o in outs])
        picked = np.take_along_axis(lp, np.where(m > 0, y, 0)[..., None], axis=2)[..., 0]
        res["loss"] = float(-(picked * m).sum() / n)
        res["accuracy"] = accuracy(lp, y, m)
    else:
        scores = np.concatenate(outs)
        labels = np.asarray(data.labels)
        p = expit(scores)
        ll = labels * np.log(np.clip(p, PROB_FLOOR, 1.0)) + \
            (1 - labels) * np.log(np.clip(1.0 - p, PROB_FLOOR, 1.0))
        res["loss"] = float(-ll.sum() / n)
        res["accuracy"] = float(((scores > 0) == (labels == 1)).mean())
        res["auc"] = roc_auc(scores, labels)
    return {"loss": res.pop("loss"), **res}


def primary_metric(cfg: ModelConfig) -> str:
    return "auc" if cfg.task == "pair_sim" else "accuracy"


# checkpoints ----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)

    def param_set(self) -> ParamSet:
        cfg = self.model_config
        ps = build_params(cfg, heads=tuple(self.extra.get("heads", ())) or None)
        ps.load_state(self.params)
        return ps


def _arrays(ck: Checkpoint):
    yield from ((n, a) for n, a in ck.params.items())
    yield from ((f"adam.m/{n}", a) for n, a in ck.opt_m.items())
    yield from ((f"adam.v/{n}", a) for n, a in ck.opt_v.items())


def save_checkpoint(ck: Checkpoint, path) -> None:
    manifest, blobs, offset = [], [], 0
    for name, arr in _arrays(ck):
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        manifest.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                         "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": ck.version, "config": ck.config, "step": ck.step, "opt_t": ck.opt_t,
        "rng_state": ck.rng_state, "extra": ck.extra, "manifest": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 16:
        raise CheckpointTruncatedError(f"{path}: header length missing")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if len(buf) < 16 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointManifestError(f"{path}: unreadable header ({exc})") from None
    base = 16 + hlen
    ck = Checkpoint(config=header["config"], params={}, opt_t=header["opt_t"],
                    step=header["step"], rng_state=header["rng_state"], extra=header["extra"],
                    version=header["version"])
    end = base
    for entry in header["manifest"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dtype.itemsize
        start = base + entry["offset"]
        if start + nbytes > len(buf):
            raise CheckpointTruncatedError(f"{path}: array {entry['name']!r} truncated")
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=start)
        arr = arr.reshape(shape).astype(dtype.newbyteorder("="))
        name = entry["name"]
        if name.startswith("adam.m/"):
            ck.opt_m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            ck.opt_v[name[7:]] = arr
        else:
            ck.params[name] = arr
        end = max(end, start + nbytes)
    if end != len(buf):
        raise CheckpointManifestError(f"{path}: {len(buf) - end} trailing bytes")
    _validate_manifest(ck)
    return ck


def _validate_manifest(ck: Checkpoint) -> None:
    try:
        cfg = ck.model_config
    except (ConfigError, TypeError) as exc:
        raise CheckpointManifestError(f"config in checkpoint is invalid: {exc}") from None
    ref = build_params(cfg, heads=tuple(ck.extra.get("heads", ())) or None)
    if set(ref) != set(ck.params):
        diff = sorted(set(ref) ^ set(ck.params))
        raise CheckpointManifestError(f"parameter names differ from config: {diff[:5]}")
    for name, p in ref.items():
        if ck.params[name].shape != p.shape:
            raise CheckpointManifestError(
                f"parameter {name!r} has shape {ck.params[name].shape}, config implies {p.shape}")


def make_checkpoint(cfg: ModelConfig, ps: ParamSet, opt: AdamState | None = None, step: int = 0,
                    rng: np.random.Generator | None = None, extra: dict | None = None
                    ) -> Checkpoint:
    opt = opt or AdamState()
    return Checkpoint(
        config=cfg.to_dict(), params=ps.state(),
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_t=opt.t, step=step,
        rng_state=rng.bit_generator.state if rng is not None else None,
        extra=dict(extra or {}),
    )


# training -------------------------------------------------------------------

@dataclass
class TrainResult:
    history: MetricsLog
    final: Checkpoint
    best: Checkpoint | None
    summary: dict


def train(cfg: ModelConfig, train_data: SequenceBatch, eval_data: SequenceBatch | None = None,
          out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Seeded minibatch training with periodic evaluation.

    Minibatch indices, dropout and zoneout masks all come from one numpy
    generator whose state is checkpointed, so a resumed run reproduces an
    uninterrupted one exactly.
    """
    if train_data.task != cfg.task:
        raise ConfigError(f"data task {train_data.task!r} does not match model task {cfg.task!r}")
    if eval_data is not None and eval_data.task != cfg.task:
        raise ConfigError(f"eval data task {eval_data.task!r} does not match {cfg.task!r}")
    ps = build_params(cfg)
    opt = AdamState()
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    extra: dict = {"best_metric": None, "best_step": None}
    if resume is not None:
        ps.load_state(resume.params)
        opt = AdamState({k: v.copy() for k, v in resume.opt_m.items()},
                        {k: v.copy() for k, v in resume.opt_v.items()}, resume.opt_t)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        step = resume.step
        extra.update({k: resume.extra.get(k) for k in ("best_metric", "best_step")})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = MetricsLog()
    best: Checkpoint | None = None
    metric = primary_metric(cfg)
    n = len(train_data)
    bs = min(cfg.batch_size, n)
    last_good = make_checkpoint(cfg, ps, opt, step, rng, extra)
    while step < cfg.steps:
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        with Graph() as g:
            loss = batch_loss(ps, cfg, train_data, idx, training=True, rng=rng)
            lval = loss.item()
            if not np.isfinite(lval):
                _abort(out, last_good, f"non-finite loss at step {step + 1}")
            dc.backward(loss, g, ps)
        grads = ps.grads()
        try:
            _check_finite(grads)
        except NonFiniteGradientError as exc:
            _abort(out, last_good, f"step {step + 1}: {exc}")
        gnorm = clip_grad_norm(grads, cfg.clip_norm)
        if cfg.optimizer == "adam":
            adam_step(ps, grads, opt, cfg.lr)
        else:
            sgd_step(ps, grads, opt, cfg.lr, cfg.momentum)
        step += 1
        history.add(step, "train", "loss", lval / bs)
        history.add(step, "train", "grad_norm", gnorm)
        if eval_data is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            res = evaluate_params(ps, cfg, eval_data)
            for k, v in res.items():
                history.add(step, "eval", k, v)
            log.info("step %d loss %.4f eval %s", step, lval / bs, res)
            if extra["best_metric"] is None or res[metric] > extra["best_metric"]:
                extra.update(best_metric=res[metric], best_step=step)
                best = make_checkpoint(cfg, ps, opt, step, rng, extra)
                if out is not None:
                    save_checkpoint(best, out / "best.ckpt")
            if cfg.stop_at is not None and res[metric] >= cfg.stop_at:
                log.info("step %d: %s %.4f reached stop_at", step, metric, res[metric])
                break
        last_good = make_checkpoint(cfg, ps, opt, step, rng, extra)
    final = make_checkpoint(cfg, ps, opt, step, rng, extra)
    summary = {"steps": step, "task": cfg.task, **{k: v for k, v in extra.items()}}
    if history.series("train", "loss"):
        summary["final_train_loss"] = history.last("train", "loss")
    for k in ("accuracy", "auc", "loss"):
        if history.series("eval", k):
            summary[f"final_eval_{k}"] = history.last("eval", k)
    if out is not None:
        save_checkpoint(final, out / "final.ckpt")
        if best is None and not (out / "best.ckpt").exists():
            save_checkpoint(final, out / "best.ckpt")
        history.to_csv(out / "metrics.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return TrainResult(history, final, best, summary)


def _abort(out, last_good: Checkpoint, reason: str):
    if out is not None:
        save_checkpoint(last_good, out / "last_good.ckpt")
    raise DivergenceError(reason)


def evaluate(checkpoint: Checkpoint, data: SequenceBatch) -> dict:
    """Metrics of a checkpointed model on ``data``."""
    cfg = checkpoint.model_config
    if data.task != cfg.task:
        raise ConfigError(f"data task {data.task!r} does not match checkpoint task {cfg.task!r}")
    return evaluate_params(checkpoint.param_set(), cfg, data)


def sweep_block_size(base: ModelConfig, ks, train_data, eval_data, path=None) -> list[dict]:
    """Train one model per block size ``k`` (single scale, l = k) and tabulate accuracy."""
    rows = []
    for k in ks:
        cfg = base.replace(k=k, l=k // min(base.stride_set))
        res = train(cfg, train_data, eval_data)
        metrics = evaluate(res.final, eval_data)
        rows.append({"k": k, "accuracy": metrics["accuracy"], "loss": metrics["loss"]})
        log.info("sweep k=%d -> %s", k, metrics)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["k", "accuracy", "loss"])
            w.writeheader()
            w.writerows(rows)
    return rows
